"""Client cache space.

Layout under ``<cache_root>/<export_id>/``::

    data/               mirror of the remote tree; files are whole copies
                        or zero-length placeholders
    data/<dir>/.xufs.<name>
                        hidden attribute record for entry <name>
    shadow/<handle>     write records of one open handle
    queue/log           append-only meta-operation log
    queue/ack           last acknowledged op_id
    queue/blobs/<h>     shadow bytes referenced by a queued FLUSH_SHADOW
    meta/mount.json     mount configuration
    meta/root.attr      attribute record of the export root
    meta/session        present while a client has the space open
    tmp/                staging area (same volume as data/)

All binary records carry a CRC32; a torn tail on the queue log is cut off
when the space is reopened.
"""

from __future__ import annotations

import bisect
import enum
import itertools
import json
import os
import shutil
import struct
import time
import uuid
import zlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence

import msgpack

from .errors import ErrorCode, XufsError
from .model import (
    HIDDEN_PREFIX,
    EntryAttributes,
    EntryKind,
    MetaOp,
    OpKind,
    basename,
    is_under,
    join,
    parent_of,
)

CrashHook = Callable[[str], None]


class EntryState(str, enum.Enum):
    EMPTY = "EMPTY"
    CACHED = "CACHED"
    DIRTY = "DIRTY"
    INVALID = "INVALID"


_KIND_CODES = {EntryKind.FILE: 0, EntryKind.DIR: 1, EntryKind.SYMLINK: 2}
_KINDS = {v: k for k, v in _KIND_CODES.items()}
_STATE_CODES = {EntryState.EMPTY: 0, EntryState.CACHED: 1, EntryState.DIRTY: 2, EntryState.INVALID: 3}
_STATES = {v: k for k, v in _STATE_CODES.items()}

# magic, format, kind, state, flags, mode, size, mtime_ns, version, cached_version
_ATTR = struct.Struct(">2sBBBBIQqQQ")
_ATTR_MAGIC = b"XA"
_CRC = struct.Struct(">I")
_FLAG_LOCALIZED = 1


@dataclass
class CacheEntry:
    rel_path: str
    state: EntryState
    attrs: EntryAttributes
    cached_version: int = 0
    localized: bool = False

    @property
    def is_dir(self) -> bool:
        return self.attrs.kind == EntryKind.DIR

    def pack(self) -> bytes:
        a = self.attrs
        body = _ATTR.pack(
            _ATTR_MAGIC, 1, _KIND_CODES[a.kind], _STATE_CODES[self.state],
            _FLAG_LOCALIZED if self.localized else 0,
            a.mode, a.size, a.mtime_ns, a.version, self.cached_version,
        )
        return body + _CRC.pack(zlib.crc32(body))

    @classmethod
    def unpack(cls, rel_path: str, raw: bytes) -> "CacheEntry":
        if len(raw) != _ATTR.size + _CRC.size:
            raise XufsError(ErrorCode.IO_ERROR, f"bad attribute record for {rel_path!r}")
        body = raw[: _ATTR.size]
        if _CRC.unpack_from(raw, _ATTR.size)[0] != zlib.crc32(body):
            raise XufsError(ErrorCode.IO_ERROR, f"corrupt attribute record for {rel_path!r}")
        magic, fmt, kind, state, flags, mode, size, mtime_ns, version, cached = _ATTR.unpack(body)
        if magic != _ATTR_MAGIC or fmt != 1:
            raise XufsError(ErrorCode.IO_ERROR, f"unknown attribute record for {rel_path!r}")
        attrs = EntryAttributes(basename(rel_path), _KINDS[kind], size, mode, mtime_ns, version)
        return cls(rel_path, _STATES[state], attrs, cached, bool(flags & _FLAG_LOCALIZED))


# -- shadow files -----------------------------------------------------------

_REC = struct.Struct(">QII")  # offset, length, crc
_SHADOW_MAGIC = b"XUFSSHD1"


@dataclass
class ShadowFile:
    """Write records of one open handle.

    Bytes live in the file at ``path``; ``index`` holds
    ``(offset, length, file_pos)`` per record in write order.
    """

    target: str
    handle_id: str
    path: str
    base_version: int
    truncate: bool = False
    index: list[tuple[int, int, int]] = field(default_factory=list)
    data_fd: int | None = None
    _fd: int | None = None
    _end: int = 0

    @property
    def records(self) -> list[tuple[int, bytes]]:
        with open(self.path, "rb") as f:
            out = []
            for offset, length, pos in self.index:
                f.seek(pos)
                out.append((offset, f.read(length)))
            return out

    def read_at(self, pos: int, length: int) -> bytes:
        with open(self.path, "rb") as f:
            f.seek(pos)
            return f.read(length)


def _overlay(records: Iterable[tuple[int, int, int]]) -> list[tuple[int, int, int]]:
    """Replay ``(offset, length, src)`` records; later ones win on overlap.

    Returns disjoint pieces ``(offset, length, src)`` sorted by offset, where
    ``src`` is the position of the piece's first byte in the source store.
    """
    starts: list[int] = []
    pieces: list[tuple[int, int, int]] = []
    for offset, length, src in records:
        if length <= 0:
            continue
        end = offset + length
        i = bisect.bisect_right(starts, offset)
        if i > 0 and pieces[i - 1][0] + pieces[i - 1][1] > offset:
            i -= 1
        j = i
        keep = []
        while j < len(pieces) and pieces[j][0] < end:
            po, pl, ps = pieces[j]
            pe = po + pl
            if po < offset:
                keep.append((po, offset - po, ps))
            if pe > end:
                keep.append((end, pe - end, ps + (end - po)))
            j += 1
        new = sorted(keep + [(offset, length, src)])
        pieces[i:j] = new
        starts[i:j] = [p[0] for p in new]
    return pieces


def _runs(pieces: Sequence[tuple[int, int, int]], max_len: int | None = None):
    """Group adjacent pieces into maximal runs (optionally capped in length)."""
    run: list[tuple[int, int, int]] = []
    run_len = 0
    for p in pieces:
        contiguous = run and run[-1][0] + run[-1][1] == p[0]
        if run and (not contiguous or (max_len is not None and run_len + p[1] > max_len)):
            yield run
            run, run_len = [], 0
        run.append(p)
        run_len += p[1]
    if run:
        yield run


def coalesce_records(records: Iterable[tuple[int, bytes]]) -> list[tuple[int, bytes]]:
    """Minimal disjoint extents equal to applying ``records`` in order."""
    buf = bytearray()
    idx = []
    for offset, data in records:
        idx.append((offset, len(data), len(buf)))
        buf += data
    out = []
    for run in _runs(_overlay(idx)):
        out.append((run[0][0], b"".join(bytes(buf[s : s + n]) for _, n, s in run)))
    return out


def coalesce_shadow(shadow: ShadowFile) -> list[tuple[int, bytes]]:
    pieces = _overlay(shadow.index)
    out = []
    with open(shadow.path, "rb") as f:
        for run in _runs(pieces):
            chunks = []
            for _, n, s in run:
                f.seek(s)
                chunks.append(f.read(n))
            out.append((run[0][0], b"".join(chunks)))
    return out


def read_blob_extents(path: str, index: Sequence[Sequence[int]], max_len: int) -> list[list[tuple[int, bytes]]]:
    """Load queued flush pieces as wire extents, grouped into fragments.

    Each fragment holds at most about ``max_len`` bytes of data.
    """
    fragments: list[list[tuple[int, bytes]]] = [[]]
    used = 0
    pieces = []
    for off, n, src in index:
        # a single oversized piece is cut so no fragment exceeds the bound
        for cut in range(0, n, max_len):
            pieces.append((off + cut, min(max_len, n - cut), src + cut))
    with open(path, "rb") as f:
        for run in _runs(pieces, max_len):
            length = sum(n for _, n, _ in run)
            if fragments[-1] and used + length > max_len:
                fragments.append([])
                used = 0
            chunks = []
            for _, n, s in run:
                f.seek(s)
                chunks.append(f.read(n))
            fragments[-1].append((run[0][0], b"".join(chunks)))
            used += length
    return fragments


# -- meta-operation queue ---------------------------------------------------

_LOG_HDR = struct.Struct(">II")  # length, crc
_ACK = struct.Struct(">QI")


def _fsync_dir(path: str) -> None:
    fd = os.open(path, os.O_RDONLY)
    try:
        os.fsync(fd)
    finally:
        os.close(fd)


class MetaOpQueue:
    """Durable FIFO of meta-operations.

    ``enqueue`` returns only after the record is fsynced. Acknowledgement
    moves a separate cursor; the log is rewritten without acknowledged
    records once they account for more than half of it.
    """

    def __init__(self, directory: str, crash_hook: CrashHook | None = None):
        self.dir = directory
        self.crash_hook = crash_hook
        self.log_path = os.path.join(directory, "log")
        self.ack_path = os.path.join(directory, "ack")
        self.blob_dir = os.path.join(directory, "blobs")
        os.makedirs(self.blob_dir, exist_ok=True)
        self.last_acked_op_id = 0
        self.pending: list[MetaOp] = []
        self._sizes: dict[int, int] = {}  # op_id -> bytes in log
        self._acked_bytes = 0
        self._last_op_id = 0
        self._fd: int | None = None
        self.orphan_blobs: list[str] = []
        self._recover()

    def _crash(self, point: str) -> None:
        if self.crash_hook is not None:
            self.crash_hook(point)

    def _recover(self) -> None:
        for stale in (self.log_path + ".tmp", self.ack_path + ".tmp"):
            if os.path.exists(stale):
                os.unlink(stale)
        try:
            with open(self.ack_path, "rb") as f:
                raw = f.read()
            op_id, crc = _ACK.unpack(raw)
            if crc != zlib.crc32(raw[:8]):
                raise XufsError(ErrorCode.IO_ERROR, "corrupt ack cursor")
            self.last_acked_op_id = op_id
        except FileNotFoundError:
            pass
        ops: list[tuple[MetaOp, int]] = []
        good = 0
        if os.path.exists(self.log_path):
            with open(self.log_path, "rb") as f:
                data = f.read()
            pos = 0
            while pos + _LOG_HDR.size <= len(data):
                length, crc = _LOG_HDR.unpack_from(data, pos)
                body = data[pos + _LOG_HDR.size : pos + _LOG_HDR.size + length]
                if len(body) != length or zlib.crc32(body) != crc:
                    break
                ops.append((MetaOp.from_wire(msgpack.unpackb(body, raw=False)), _LOG_HDR.size + length))
                pos += _LOG_HDR.size + length
                good = pos
            if good != len(data):
                with open(self.log_path, "r+b") as f:
                    f.truncate(good)
                    os.fsync(f.fileno())
        last = self.last_acked_op_id
        for op, size in ops:
            if op.op_id <= last:
                self._acked_bytes += size
                continue
            self.pending.append(op)
            self._sizes[op.op_id] = size
            last = op.op_id
        self._last_op_id = max(last, self.last_acked_op_id)
        # blobs sealed by a session that died before logging their op
        referenced = {op.args.get("blob") for op in self.pending if op.kind == OpKind.FLUSH_SHADOW}
        self.orphan_blobs = sorted(
            os.path.join(self.blob_dir, n) for n in os.listdir(self.blob_dir) if n not in referenced
        )
        self._fd = os.open(self.log_path, os.O_WRONLY | os.O_CREAT | os.O_APPEND, 0o600)

    @property
    def next_op_id(self) -> int:
        return self._last_op_id + 1

    def make_op(self, kind: OpKind, target: str, args: dict[str, Any] | None = None) -> MetaOp:
        return MetaOp(self.next_op_id, kind, target, args or {}, time.time())

    def enqueue(self, op: MetaOp) -> MetaOp:
        if op.op_id <= self._last_op_id:
            raise XufsError(ErrorCode.PROTOCOL_ERROR, f"op_id {op.op_id} not above {self._last_op_id}")
        body = msgpack.packb(op.to_wire(), use_bin_type=True)
        record = _LOG_HDR.pack(len(body), zlib.crc32(body)) + body
        self._crash("queue.append:before")
        try:
            os.write(self._fd, record)
            self._crash("queue.append:written")
            os.fsync(self._fd)
        except OSError as exc:
            raise XufsError(ErrorCode.IO_ERROR, f"queue append failed: {exc}") from None
        self._crash("queue.append:synced")
        self.pending.append(op)
        self._sizes[op.op_id] = len(record)
        self._last_op_id = op.op_id
        return op

    def append(self, kind: OpKind, target: str, args: dict[str, Any] | None = None) -> MetaOp:
        return self.enqueue(self.make_op(kind, target, args))

    def ack_through(self, op_id: int) -> list[MetaOp]:
        """Advance the ack cursor; return the ops it released."""
        if op_id < self.last_acked_op_id:
            raise XufsError(ErrorCode.PROTOCOL_ERROR, f"ack regression {op_id} < {self.last_acked_op_id}")
        if op_id == self.last_acked_op_id:
            return []
        raw = struct.pack(">Q", op_id)
        tmp = self.ack_path + ".tmp"
        self._crash("queue.ack:before")
        with open(tmp, "wb") as f:
            f.write(raw + struct.pack(">I", zlib.crc32(raw)))
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, self.ack_path)
        _fsync_dir(self.dir)
        self._crash("queue.ack:synced")
        self.last_acked_op_id = op_id
        released = [op for op in self.pending if op.op_id <= op_id]
        self.pending = [op for op in self.pending if op.op_id > op_id]
        for op in released:
            self._acked_bytes += self._sizes.pop(op.op_id, 0)
            blob = op.args.get("blob") if op.kind == OpKind.FLUSH_SHADOW else None
            if blob:
                try:
                    os.unlink(os.path.join(self.blob_dir, blob))
                except FileNotFoundError:
                    pass
        if self._acked_bytes * 2 > self.log_size():
            self.compact()
        return released

    def log_size(self) -> int:
        return self._acked_bytes + sum(self._sizes.values())

    def compact(self) -> None:
        tmp = self.log_path + ".tmp"
        with open(tmp, "wb") as f:
            for op in self.pending:
                body = msgpack.packb(op.to_wire(), use_bin_type=True)
                f.write(_LOG_HDR.pack(len(body), zlib.crc32(body)) + body)
            f.flush()
            os.fsync(f.fileno())
        self._crash("queue.compact:before-rename")
        os.replace(tmp, self.log_path)
        _fsync_dir(self.dir)
        self._crash("queue.compact:renamed")
        os.close(self._fd)
        self._fd = os.open(self.log_path, os.O_WRONLY | os.O_APPEND)
        self._acked_bytes = 0

    def close(self) -> None:
        if self._fd is not None:
            os.close(self._fd)
            self._fd = None


# -- cache space ------------------------------------------------------------


class CacheSpace:
    def __init__(self, cache_root: str, export_id: str, crash_hook: CrashHook | None = None):
        self.root = os.path.join(os.path.abspath(cache_root), export_id)
        self.export_id = export_id
        self.crash_hook = crash_hook
        self.data_dir = os.path.join(self.root, "data")
        self.shadow_dir = os.path.join(self.root, "shadow")
        self.queue_dir = os.path.join(self.root, "queue")
        self.meta_dir = os.path.join(self.root, "meta")
        self.tmp_dir = os.path.join(self.root, "tmp")
        try:
            for d in (self.data_dir, self.shadow_dir, self.queue_dir, self.meta_dir, self.tmp_dir):
                os.makedirs(d, exist_ok=True)
            probe = os.path.join(self.meta_dir, ".probe")
            with open(probe, "wb"):
                pass
            os.unlink(probe)
        except OSError as exc:
            raise XufsError(ErrorCode.IO_ERROR, f"cannot initialize cache space: {exc}") from None
        for name in os.listdir(self.tmp_dir):
            os.unlink(os.path.join(self.tmp_dir, name))
        self.queue = MetaOpQueue(self.queue_dir, crash_hook)
        self.entries: dict[str, CacheEntry] = {}
        self._load_entries()
        self.recovered_unclean = os.path.exists(os.path.join(self.meta_dir, "session"))
        self._handle_seq = itertools.count(1)

    # -- paths --

    def data_path(self, rel: str) -> str:
        # rel is normalized (no leading or doubled slashes), so plain concatenation is safe
        return f"{self.data_dir}/{rel}" if rel else self.data_dir

    def hidden_path(self, rel: str) -> str:
        if rel == "":
            return os.path.join(self.meta_dir, "root.attr")
        return os.path.join(self.data_dir, parent_of(rel), HIDDEN_PREFIX + basename(rel))

    # -- entries --

    def _load_entries(self) -> None:
        root_rec = self.hidden_path("")
        if os.path.exists(root_rec):
            with open(root_rec, "rb") as f:
                self.entries[""] = CacheEntry.unpack("", f.read())
        for dirpath, dirnames, filenames in os.walk(self.data_dir):
            rel_dir = os.path.relpath(dirpath, self.data_dir)
            rel_dir = "" if rel_dir == "." else rel_dir.replace(os.sep, "/")
            for name in filenames:
                if not name.startswith(HIDDEN_PREFIX):
                    continue
                rel = join(rel_dir, name[len(HIDDEN_PREFIX):])
                with open(os.path.join(dirpath, name), "rb") as f:
                    self.entries[rel] = CacheEntry.unpack(rel, f.read())

    def get(self, rel: str) -> CacheEntry | None:
        return self.entries.get(rel)

    def put(self, entry: CacheEntry) -> None:
        """Persist ``entry`` to its hidden attribute file."""
        tmp = os.path.join(self.tmp_dir, f"attr.{next(self._handle_seq)}")
        with open(tmp, "wb") as f:
            f.write(entry.pack())
        os.replace(tmp, self.hidden_path(entry.rel_path))
        self.entries[entry.rel_path] = entry

    def set_state(self, rel: str, state: EntryState, **changes) -> CacheEntry:
        e = self.entries[rel]
        e.state = state
        for k, v in changes.items():
            setattr(e, k, v)
        self.put(e)
        return e

    def children(self, rel: str) -> list[CacheEntry]:
        return [e for r, e in sorted(self.entries.items()) if r != "" and parent_of(r) == rel]

    def remove(self, rel: str) -> None:
        """Drop an entry, its data and (for directories) its whole subtree."""
        for r in [r for r in self.entries if r != "" and is_under(r, rel)]:
            del self.entries[r]
        p = self.data_path(rel)
        if os.path.isdir(p) and not os.path.islink(p):
            shutil.rmtree(p)
        elif os.path.lexists(p):
            os.unlink(p)
        try:
            os.unlink(self.hidden_path(rel))
        except FileNotFoundError:
            pass

    def move(self, src: str, dest: str) -> None:
        """Rename an entry (and its subtree) inside the cache."""
        if dest in self.entries:
            self.remove(dest)
        os.replace(self.data_path(src), self.data_path(dest))
        os.replace(self.hidden_path(src), self.hidden_path(dest))
        moved = sorted(r for r in self.entries if r != "" and is_under(r, src))
        for r in moved:
            e = self.entries.pop(r)
            new = dest + r[len(src):]
            e.rel_path = new
            e.attrs = e.attrs.evolve(name=basename(new))
            self.entries[new] = e
        self.put(self.entries[dest])

    def materialize_dir(self, entries: Iterable[EntryAttributes], dir: str,
                        dir_attrs: EntryAttributes | None = None) -> None:
        """Mirror one READDIR response into the cache.

        New entries become zero-length placeholders in state EMPTY. Entries
        whose remote version moved past the cached one become INVALID.
        Local entries missing remotely are dropped unless they carry
        unflushed local work or belong to a localized directory.
        """
        os.makedirs(self.data_path(dir), exist_ok=True)
        remote = {}
        for attrs in entries:
            if attrs.name.startswith(HIDDEN_PREFIX):
                continue
            remote[attrs.name] = attrs
            rel = join(dir, attrs.name)
            cur = self.entries.get(rel)
            if cur is not None and cur.localized:
                continue
            if cur is not None and cur.attrs.kind != attrs.kind and cur.state != EntryState.DIRTY:
                self.remove(rel)
                cur = None
            if cur is None:
                self._placeholder(rel, attrs)
                continue
            if attrs.version <= cur.cached_version:
                continue
            if cur.state == EntryState.EMPTY:
                cur.attrs = attrs
            elif cur.state == EntryState.DIRTY:
                cur.state = EntryState.INVALID
            else:
                cur.state = EntryState.INVALID
                cur.attrs = attrs
            self.put(cur)
        pending = self.pending_targets()
        for child in self.children(dir):
            name = basename(child.rel_path)
            if name in remote or child.localized or child.state == EntryState.DIRTY:
                continue
            if any(is_under(p, child.rel_path) for p in pending):
                continue
            self.remove(child.rel_path)
        d = self.entries.get(dir)
        if d is None:
            attrs = dir_attrs or EntryAttributes(basename(dir), EntryKind.DIR, 0, 0o755, 0, 0)
            d = CacheEntry(dir, EntryState.CACHED, attrs, attrs.version)
        else:
            d.state = EntryState.CACHED
            if dir_attrs is not None:
                d.attrs = dir_attrs.evolve(name=basename(dir))
                d.cached_version = dir_attrs.version
        self.put(d)

    def _placeholder(self, rel: str, attrs: EntryAttributes) -> None:
        p = self.data_path(rel)
        if attrs.kind == EntryKind.DIR:
            os.makedirs(p, exist_ok=True)
        else:
            with open(p, "wb"):
                pass
        self.put(CacheEntry(rel, EntryState.EMPTY, attrs, 0))

    def read_cached_attrs(self, rel: str) -> EntryAttributes:
        try:
            with open(self.hidden_path(rel), "rb") as f:
                return CacheEntry.unpack(rel, f.read()).attrs
        except FileNotFoundError:
            raise XufsError(ErrorCode.NOT_MATERIALIZED, rel) from None

    def pending_targets(self) -> set[str]:
        out = set()
        for op in self.queue.pending:
            out.add(op.target)
            if op.kind == OpKind.RENAME:
                out.add(op.args["dest"])
        return out

    # -- shadows --

    def new_shadow(self, target: str, base_version: int, truncate: bool = False) -> ShadowFile:
        handle_id = f"{os.getpid()}-{uuid.uuid4().hex[:12]}"
        path = os.path.join(self.shadow_dir, handle_id)
        fd = os.open(path, os.O_RDWR | os.O_CREAT | os.O_EXCL, 0o600)
        header = target.encode()
        os.write(fd, _SHADOW_MAGIC + struct.pack(">I", len(header)) + header)
        sh = ShadowFile(target, handle_id, path, base_version, truncate)
        sh._fd = fd
        sh._end = len(_SHADOW_MAGIC) + 4 + len(header)
        return sh

    def shadow_append(self, shadow: ShadowFile, offset: int, data: bytes) -> None:
        """Record a write and apply it to the local data file."""
        if not data:
            return
        if shadow._fd is None:
            raise XufsError(ErrorCode.BAD_HANDLE, "shadow already closed")
        try:
            os.write(shadow._fd, _REC.pack(offset, len(data), zlib.crc32(data)) + data)
            shadow.index.append((offset, len(data), shadow._end + _REC.size))
            shadow._end += _REC.size + len(data)
            if shadow.data_fd is not None:
                os.pwrite(shadow.data_fd, data, offset)
        except OSError as exc:
            raise XufsError(ErrorCode.IO_ERROR, str(exc)) from None

    def seal_shadow(self, shadow: ShadowFile) -> tuple[str, list[list[int]]]:
        """Make the shadow durable as a queue blob; return (blob, index)."""
        pieces = _overlay(shadow.index)
        os.fsync(shadow._fd)
        os.close(shadow._fd)
        shadow._fd = None
        self._crash("blob:synced")
        blob = shadow.handle_id
        os.replace(shadow.path, os.path.join(self.queue.blob_dir, blob))
        _fsync_dir(self.queue.blob_dir)
        shadow.path = os.path.join(self.queue.blob_dir, blob)
        self._crash("blob:renamed")
        return blob, [list(p) for p in pieces]

    def discard_shadow(self, shadow: ShadowFile) -> None:
        if shadow._fd is not None:
            os.close(shadow._fd)
            shadow._fd = None
        try:
            os.unlink(shadow.path)
        except FileNotFoundError:
            pass

    def orphan_shadow_targets(self) -> list[str]:
        """Remove shadows left by a crashed session; return their targets.

        Covers open-handle shadows and sealed blobs whose op never reached
        the log. In both cases the local data file holds writes the server
        will never see.
        """
        targets = []
        paths = [os.path.join(self.shadow_dir, n) for n in sorted(os.listdir(self.shadow_dir))]
        paths += self.queue.orphan_blobs
        self.queue.orphan_blobs = []
        for p in paths:
            try:
                with open(p, "rb") as f:
                    head = f.read(len(_SHADOW_MAGIC) + 4)
                    if head[: len(_SHADOW_MAGIC)] == _SHADOW_MAGIC:
                        (n,) = struct.unpack(">I", head[len(_SHADOW_MAGIC):])
                        targets.append(f.read(n).decode())
            finally:
                os.unlink(p)
        return targets

    def _crash(self, point: str) -> None:
        if self.crash_hook is not None:
            self.crash_hook(point)

    # -- queue --

    def enqueue(self, op: MetaOp) -> MetaOp:
        return self.queue.enqueue(op)

    def ack_through(self, op_id: int) -> list[MetaOp]:
        return self.queue.ack_through(op_id)

    # -- mount config and session marker --

    def read_config(self) -> dict[str, Any] | None:
        try:
            with open(os.path.join(self.meta_dir, "mount.json")) as f:
                return json.load(f)
        except FileNotFoundError:
            return None

    def write_config(self, cfg: dict[str, Any]) -> None:
        tmp = os.path.join(self.tmp_dir, "mount.json")
        with open(tmp, "w") as f:
            json.dump(cfg, f, indent=2, sort_keys=True)
        os.replace(tmp, os.path.join(self.meta_dir, "mount.json"))

    def begin_session(self) -> None:
        with open(os.path.join(self.meta_dir, "session"), "w") as f:
            f.write(str(os.getpid()))

    def end_session(self) -> None:
        try:
            os.unlink(os.path.join(self.meta_dir, "session"))
        except FileNotFoundError:
            pass

    def close(self) -> None:
        self.queue.close()


def init_cache_space(cache_root: str, export_id: str, crash_hook: CrashHook | None = None) -> CacheSpace:
    """Create (or reopen) the cache space for ``export_id`` under ``cache_root``."""
    return CacheSpace(cache_root, export_id, crash_hook)
