import os
import random
import struct
import zlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import apply_records
from xufs.cache import (
    CacheEntry,
    EntryState,
    MetaOpQueue,
    coalesce_records,
    coalesce_shadow,
    init_cache_space,
    read_blob_extents,
)
from xufs.errors import ErrorCode, SimulatedCrash, XufsError
from xufs.model import EntryAttributes, EntryKind, OpKind


def attrs(name, size=0, version=1, kind=EntryKind.FILE, mode=0o644):
    return EntryAttributes(name, kind, size, mode, 1_700_000_000_123_456_789, version)


@pytest.fixture
def space(tmp_path):
    s = init_cache_space(str(tmp_path / "cache"), "exp")
    yield s
    s.close()


# -- init --

def test_init_creates_skeleton(tmp_path, space):
    root = tmp_path / "cache" / "exp"
    for d in ("data", "shadow", "queue", "meta"):
        assert (root / d).is_dir()
    assert space.queue.pending == []


def test_reinit_preserves_pending(tmp_path):
    s = init_cache_space(str(tmp_path), "exp")
    for t in ("a", "b", "c"):
        s.queue.append(OpKind.CREATE, t)
    s.close()
    s2 = init_cache_space(str(tmp_path), "exp")
    assert [op.target for op in s2.queue.pending] == ["a", "b", "c"]
    s2.close()


def test_unwritable_root(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_bytes(b"")
    with pytest.raises(XufsError) as ei:
        init_cache_space(str(blocker), "exp")
    assert ei.value.code == ErrorCode.IO_ERROR


# -- attribute records --

def test_materialize_placeholder_and_hidden_record(space):
    space.materialize_dir([attrs("a.txt", size=3)], "")
    data = os.path.join(space.data_dir, "a.txt")
    hidden = os.path.join(space.data_dir, ".xufs.a.txt")
    assert os.path.getsize(data) == 0
    assert space.get("a.txt").state == EntryState.EMPTY
    raw = open(hidden, "rb").read()
    # documented layout: magic, format, kind, state, flags, mode, size, mtime_ns, version, cached_version, crc32
    fmt = ">2sBBBBIQqQQ"
    body = raw[: struct.calcsize(fmt)]
    assert struct.unpack(">I", raw[len(body):])[0] == zlib.crc32(body)
    magic, version, kind, state, flags, mode, size, mtime, ver, cached = struct.unpack(fmt, body)
    assert (magic, version, kind, state, flags) == (b"XA", 1, 0, 0, 0)
    assert (mode, size, mtime, ver, cached) == (0o644, 3, 1_700_000_000_123_456_789, 1, 0)
    assert space.read_cached_attrs("a.txt").size == 3


def test_materialize_leaves_current_cached_entry(space):
    space.materialize_dir([attrs("a.txt", size=3, version=4)], "")
    with open(space.data_path("a.txt"), "wb") as f:
        f.write(b"abc")
    space.set_state("a.txt", EntryState.CACHED, cached_version=4)
    before = os.stat(space.data_path("a.txt"))
    space.materialize_dir([attrs("a.txt", size=3, version=4)], "")
    after = os.stat(space.data_path("a.txt"))
    assert space.get("a.txt").state == EntryState.CACHED
    assert (before.st_ino, before.st_mtime_ns) == (after.st_ino, after.st_mtime_ns)
    assert open(space.data_path("a.txt"), "rb").read() == b"abc"


def test_materialize_newer_version_invalidates(space):
    space.materialize_dir([attrs("a.txt", size=3, version=4)], "")
    space.set_state("a.txt", EntryState.CACHED, cached_version=4)
    space.materialize_dir([attrs("a.txt", size=7, version=5)], "")
    e = space.get("a.txt")
    assert e.state == EntryState.INVALID and e.attrs.size == 7


def test_materialize_drops_remotely_deleted(space):
    space.materialize_dir([attrs("a"), attrs("b"), attrs("d", kind=EntryKind.DIR)], "")
    space.materialize_dir([attrs("x")], "d")
    space.materialize_dir([attrs("a")], "")
    assert space.get("b") is None and space.get("d") is None and space.get("d/x") is None
    assert not os.path.exists(space.data_path("d"))


def test_read_cached_attrs_unmaterialized(space):
    with pytest.raises(XufsError) as ei:
        space.read_cached_attrs("never")
    assert ei.value.code == ErrorCode.NOT_MATERIALIZED


def test_entry_pack_round_trip_and_corruption():
    e = CacheEntry("d/f", EntryState.DIRTY, attrs("f", 9, 3, mode=0o600), 2, localized=True)
    assert CacheEntry.unpack("d/f", e.pack()) == e
    raw = bytearray(e.pack())
    raw[5] ^= 1
    with pytest.raises(XufsError):
        CacheEntry.unpack("d/f", bytes(raw))


def test_entries_reload_from_disk(tmp_path):
    s = init_cache_space(str(tmp_path), "exp")
    s.materialize_dir([attrs("a", 1), attrs("d", kind=EntryKind.DIR)], "", attrs("", kind=EntryKind.DIR))
    s.materialize_dir([attrs("b", 2)], "d")
    s.close()
    s2 = init_cache_space(str(tmp_path), "exp")
    assert set(s2.entries) == {"", "a", "d", "d/b"}
    assert s2.get("d/b").attrs.size == 2
    s2.close()


def test_hidden_names_never_listed(space):
    space.materialize_dir([attrs(".xufs.evil"), attrs("ok")], "")
    names = [c.attrs.name for c in space.children("")]
    assert names == ["ok"]
    assert all(not n.startswith(".xufs.") for n in names)


# -- shadows --

def _open_data(space, rel, content=b""):
    p = space.data_path(rel)
    with open(p, "wb") as f:
        f.write(content)
    return os.open(p, os.O_RDWR)


def test_shadow_append_order_and_local_data(space):
    sh = space.new_shadow("f", 0)
    sh.data_fd = _open_data(space, "f")
    space.shadow_append(sh, 0, b"ab")
    space.shadow_append(sh, 1, b"XY")
    space.shadow_append(sh, 5, b"")
    assert sh.records == [(0, b"ab"), (1, b"XY")]
    assert open(space.data_path("f"), "rb").read() == b"aXY"
    assert coalesce_shadow(sh) == [(0, b"aXY")]
    os.close(sh.data_fd)
    space.discard_shadow(sh)


def test_shadow_append_past_eof_zero_extends(space, tmp_path):
    sh = space.new_shadow("f", 0)
    sh.data_fd = _open_data(space, "f", b"12")
    space.shadow_append(sh, 6, b"zz")
    os.close(sh.data_fd)
    oracle = tmp_path / "oracle"
    with open(oracle, "wb") as f:
        f.write(b"12")
        f.seek(6)
        f.write(b"zz")
    assert open(space.data_path("f"), "rb").read() == oracle.read_bytes() == b"12\0\0\0\0zz"
    space.discard_shadow(sh)


def test_shadow_file_is_self_describing(space):
    sh = space.new_shadow("dir/target", 0)
    space.shadow_append(sh, 3, b"hello")
    raw = open(sh.path, "rb").read()
    assert raw[:8] == b"XUFSSHD1"
    n = struct.unpack(">I", raw[8:12])[0]
    assert raw[12 : 12 + n] == b"dir/target"
    off, length, crc = struct.unpack(">QII", raw[12 + n : 28 + n])
    assert (off, length, crc) == (3, 5, zlib.crc32(b"hello"))
    assert raw[28 + n :] == b"hello"
    space.discard_shadow(sh)


def test_coalesce_examples():
    assert coalesce_records([(0, b"ab"), (1, b"XY")]) == [(0, b"aXY")]
    assert coalesce_records([(0, b"ab"), (10, b"cd")]) == [(0, b"ab"), (10, b"cd")]
    assert coalesce_records([]) == []
    assert coalesce_records([(0, b"ab"), (2, b"cd")]) == [(0, b"abcd")]
    assert coalesce_records([(4, b"zz"), (0, b"abcdefgh")]) == [(0, b"abcdefgh")]


def _random_records(rng, max_off=200, n=None):
    n = rng.randrange(1, 30) if n is None else n
    return [(rng.randrange(max_off), rng.randbytes(rng.randrange(0, 40))) for _ in range(n)]


def _check_equivalence(pre, records):
    extents = coalesce_records(records)
    assert apply_records(pre, extents) == apply_records(pre, records)
    # minimal: sorted, disjoint and not touching
    for (o1, d1), (o2, _) in zip(extents, extents[1:]):
        assert o1 + len(d1) < o2
    assert all(d for _, d in extents)


def test_shadow_equivalence_ten_thousand_sequences():
    rng = random.Random(2024)
    for _ in range(10_000):
        pre = rng.randbytes(rng.randrange(0, 150))
        _check_equivalence(pre, _random_records(rng))


@settings(max_examples=300, deadline=None)
@given(st.binary(max_size=64), st.lists(st.tuples(st.integers(0, 100), st.binary(max_size=24)), max_size=20))
def test_shadow_equivalence_property(pre, records):
    _check_equivalence(pre, records)


def test_on_disk_shadow_matches_in_memory(space):
    rng = random.Random(3)
    for _ in range(50):
        recs = _random_records(rng)
        sh = space.new_shadow("f", 0)
        for off, data in recs:
            space.shadow_append(sh, off, data)
        assert coalesce_shadow(sh) == coalesce_records(recs)
        blob, index = space.seal_shadow(sh)
        frags = read_blob_extents(os.path.join(space.queue.blob_dir, blob), index, 1 << 20)
        assert [e for f in frags for e in f] == coalesce_records(recs)
        os.unlink(os.path.join(space.queue.blob_dir, blob))


def test_blob_extents_fragment_bound(space):
    sh = space.new_shadow("f", 0)
    for i in range(40):
        space.shadow_append(sh, i * 1000, bytes([i]) * 1000)
    blob, index = space.seal_shadow(sh)
    frags = read_blob_extents(os.path.join(space.queue.blob_dir, blob), index, 4096)
    assert len(frags) == 10
    assert all(sum(len(d) for _, d in f) <= 4096 for f in frags)
    flat = apply_records(b"", [e for f in frags for e in f])
    assert flat == b"".join(bytes([i]) * 1000 for i in range(40))


def test_orphan_shadows_report_targets(tmp_path):
    s = init_cache_space(str(tmp_path), "exp")
    s.new_shadow("left/open", 0)
    sealed = s.new_shadow("sealed/no-op", 0)
    s.shadow_append(sealed, 0, b"x")
    s.seal_shadow(sealed)
    s.close()
    s2 = init_cache_space(str(tmp_path), "exp")
    assert sorted(s2.orphan_shadow_targets()) == ["left/open", "sealed/no-op"]
    assert os.listdir(s2.shadow_dir) == [] and os.listdir(s2.queue.blob_dir) == []
    s2.close()


# -- queue --

def test_enqueue_survives_process_kill(tmp_path):
    q = MetaOpQueue(str(tmp_path))
    ops = [q.append(OpKind.CREATE, "f"), q.append(OpKind.FLUSH_SHADOW, "f", {"extents": [[0, b"hi"]]}),
           q.append(OpKind.UNLINK, "g")]
    # no close: the file descriptor is simply abandoned
    q2 = MetaOpQueue(str(tmp_path))
    assert q2.pending == ops


def test_op_ids_continue_after_ack(tmp_path):
    q = MetaOpQueue(str(tmp_path))
    for _ in range(5):
        q.append(OpKind.MKDIR, "d")
    q.ack_through(5)
    assert q.append(OpKind.MKDIR, "d").op_id == 6
    q.close()
    q2 = MetaOpQueue(str(tmp_path))
    assert q2.next_op_id == 7
    q2.ack_through(6)
    q2.close()
    assert MetaOpQueue(str(tmp_path)).next_op_id == 7


def test_ack_examples(tmp_path):
    q = MetaOpQueue(str(tmp_path))
    for i in range(5):
        q.append(OpKind.CREATE, f"f{i}")
    released = q.ack_through(3)
    assert [op.op_id for op in released] == [1, 2, 3]
    assert [op.op_id for op in q.pending] == [4, 5]
    assert q.ack_through(3) == []
    with pytest.raises(XufsError) as ei:
        q.ack_through(2)
    assert ei.value.code == ErrorCode.PROTOCOL_ERROR
    q.close()
    assert [op.op_id for op in MetaOpQueue(str(tmp_path)).pending] == [4, 5]


def test_ten_thousand_enqueues_replay_in_order(tmp_path):
    q = MetaOpQueue(str(tmp_path))
    targets = [f"t{i}" for i in range(10_000)]
    for t in targets:
        q.append(OpKind.CREATE, t)
    q.close()
    q2 = MetaOpQueue(str(tmp_path))
    assert [op.target for op in q2.pending] == targets
    assert [op.op_id for op in q2.pending] == list(range(1, 10_001))


def test_torn_tail_is_cut(tmp_path):
    q = MetaOpQueue(str(tmp_path))
    q.append(OpKind.CREATE, "a")
    q.append(OpKind.CREATE, "b")
    q.close()
    log = tmp_path / "log"
    good = log.read_bytes()
    log.write_bytes(good + struct.pack(">II", 50, 0) + b"partial")
    q2 = MetaOpQueue(str(tmp_path))
    assert [op.target for op in q2.pending] == ["a", "b"]
    assert log.read_bytes() == good
    q2.append(OpKind.CREATE, "c")
    q2.close()
    assert [op.target for op in MetaOpQueue(str(tmp_path)).pending] == ["a", "b", "c"]


def test_compaction_reclaims_acked_records(tmp_path):
    q = MetaOpQueue(str(tmp_path))
    for i in range(10):
        q.append(OpKind.CREATE, f"f{i}")
    full = os.path.getsize(q.log_path)
    q.ack_through(4)
    assert os.path.getsize(q.log_path) == full
    q.ack_through(6)
    assert os.path.getsize(q.log_path) < full
    assert q.log_size() == os.path.getsize(q.log_path)
    q.close()
    assert [op.op_id for op in MetaOpQueue(str(tmp_path)).pending] == [7, 8, 9, 10]


def test_blob_removed_on_ack(space):
    sh = space.new_shadow("f", 0)
    space.shadow_append(sh, 0, b"data")
    blob, index = space.seal_shadow(sh)
    op = space.queue.append(OpKind.FLUSH_SHADOW, "f", {"blob": blob, "index": index})
    assert os.listdir(space.queue.blob_dir) == [blob]
    space.ack_through(op.op_id)
    assert os.listdir(space.queue.blob_dir) == []


QUEUE_POINTS = ["queue.append:before", "queue.append:written", "queue.append:synced"]


@pytest.mark.parametrize("point", QUEUE_POINTS)
def test_crash_during_append(tmp_path, point):
    def hook(p):
        if p == point and armed:
            raise SimulatedCrash(p)

    armed = False
    q = MetaOpQueue(str(tmp_path), crash_hook=hook)
    returned = [q.append(OpKind.CREATE, "a"), q.append(OpKind.CREATE, "b")]
    armed = True
    with pytest.raises(SimulatedCrash):
        q.append(OpKind.CREATE, "c")
    recovered = MetaOpQueue(str(tmp_path)).pending
    # every op whose enqueue returned is present, in order
    assert recovered[:2] == returned
    # the interrupted op is there exactly when its bytes reached the log
    assert [op.target for op in recovered[2:]] == ([] if point == "queue.append:before" else ["c"])


@pytest.mark.parametrize("point", ["queue.ack:before", "queue.ack:synced"])
def test_crash_during_ack(tmp_path, point):
    def hook(p):
        if p == point:
            raise SimulatedCrash(p)

    q = MetaOpQueue(str(tmp_path))
    for t in "abc":
        q.append(OpKind.CREATE, t)
    q.close()
    q = MetaOpQueue(str(tmp_path), crash_hook=hook)
    with pytest.raises(SimulatedCrash):
        q.ack_through(2)
    rec = MetaOpQueue(str(tmp_path))
    expected = [1, 2, 3] if point == "queue.ack:before" else [3]
    assert [op.op_id for op in rec.pending] == expected


@pytest.mark.parametrize("point", ["queue.compact:before-rename", "queue.compact:renamed"])
def test_crash_during_compaction(tmp_path, point):
    def hook(p):
        if p == point:
            raise SimulatedCrash(p)

    q = MetaOpQueue(str(tmp_path))
    for i in range(6):
        q.append(OpKind.CREATE, f"f{i}")
    q.close()
    q = MetaOpQueue(str(tmp_path), crash_hook=hook)
    with pytest.raises(SimulatedCrash):
        q.ack_through(4)
    rec = MetaOpQueue(str(tmp_path))
    assert [op.op_id for op in rec.pending] == [5, 6]
    assert rec.next_op_id == 7
    assert not os.path.exists(rec.log_path + ".tmp")


def test_corrupt_ack_cursor_detected(tmp_path):
    q = MetaOpQueue(str(tmp_path))
    q.append(OpKind.CREATE, "a")
    q.ack_through(1)
    q.close()
    raw = bytearray((tmp_path / "ack").read_bytes())
    raw[0] ^= 0xFF
    (tmp_path / "ack").write_bytes(bytes(raw))
    with pytest.raises(XufsError):
        MetaOpQueue(str(tmp_path))


def test_regressing_op_id_refused(tmp_path):
    q = MetaOpQueue(str(tmp_path))
    op = q.append(OpKind.CREATE, "a")
    with pytest.raises(XufsError):
        q.enqueue(op)


def test_config_and_session_marker(tmp_path):
    s = init_cache_space(str(tmp_path), "exp")
    assert s.read_config() is None and not s.recovered_unclean
    s.write_config({"server_addr": "h:1", "localized_dirs": ["scratch"]})
    s.begin_session()
    s.close()
    s2 = init_cache_space(str(tmp_path), "exp")
    assert s2.recovered_unclean
    assert s2.read_config()["localized_dirs"] == ["scratch"]
    s2.end_session()
    s2.close()
    assert not init_cache_space(str(tmp_path), "exp").recovered_unclean
