"""Client operations over a mounted export.

A :class:`Mount` owns one cache space and at most one live connection.
Reads are served from whole-file copies in the cache; the first open of a
file fetches it with striped transfers. Mutations touch only the cache and
the durable meta-operation queue, and a background drainer ships queued
operations to the server. Server pushes (INVALIDATE) mark cached copies
stale for the next open.

Operations that never need the network (``stat``, ``read``, ``write``,
``close``, ``mkdir``, ``unlink``, ``rmdir``, ``rename``, ``truncate``) are
plain methods; those that may need it (``opendir``, ``open``, ``chdir``,
``lock``, ``sync``) are coroutines.
"""

from __future__ import annotations

import asyncio
import enum
import fcntl
import itertools
import json
import logging
import os
import time
import uuid
from dataclasses import asdict, dataclass, field, fields
from typing import Any

from .cache import (
    CacheEntry,
    CacheSpace,
    CrashHook,
    EntryState,
    coalesce_shadow,
    init_cache_space,
    read_blob_extents,
)
from .errors import ErrorCode, XufsError
from .model import EntryAttributes, EntryKind, MetaOp, OpKind, basename, is_under, normalize, parent_of
from .transport import Channel, Transport
from .wire import AuthCredential, Kind, Message, Reassembler, challenge_digest, plan_stripes

log = logging.getLogger(__name__)


class ConnectionState(str, enum.Enum):
    CONNECTED = "CONNECTED"
    DISCONNECTED = "DISCONNECTED"


class OpenMode(str, enum.Enum):
    READ = "READ"
    WRITE = "WRITE"
    READWRITE = "READWRITE"


# knob -> environment variable
ENV_KNOBS = {
    "backoff_initial": "XUFS_BACKOFF_INITIAL",
    "backoff_cap": "XUFS_BACKOFF_CAP",
    "renew_retry": "XUFS_RENEW_RETRY",
    "prefetch_threshold": "XUFS_PREFETCH_THRESHOLD",
    "prefetch_parallelism": "XUFS_PREFETCH_PARALLELISM",
    "max_streams": "XUFS_MAX_STREAMS",
    "min_block": "XUFS_MIN_BLOCK",
    "batch_max_ops": "XUFS_BATCH_MAX_OPS",
    "fragment_bytes": "XUFS_FRAGMENT_BYTES",
}


@dataclass
class MountConfig:
    server_addr: str
    export_id: str
    cache_root: str
    localized_dirs: list[str] = field(default_factory=list)
    client_id: str = ""
    backoff_initial: float = 1.0
    backoff_cap: float = 30.0
    renew_retry: float = 1.0
    prefetch_threshold: int = 64 * 1024
    prefetch_parallelism: int = 12
    max_streams: int = 12
    min_block: int = 64 * 1024
    batch_max_ops: int = 64
    fragment_bytes: int = 8 * 1024 * 1024

    def __post_init__(self):
        self.localized_dirs = sorted({normalize(d) for d in self.localized_dirs})

    def with_env(self, environ=None) -> "MountConfig":
        environ = os.environ if environ is None else environ
        for name, var in ENV_KNOBS.items():
            if var in environ:
                kind = type(getattr(self, name))
                setattr(self, name, kind(environ[var]))
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "MountConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass(eq=False)
class OpenHandle:
    handle_id: str
    rel_path: str
    mode: OpenMode
    position: int = 0
    shadow: Any = None
    fd: int = -1
    localized: bool = False
    shared: bool = False  # another writer on the same path overlapped this one
    closed: bool = False
    mount: "Mount | None" = field(default=None, repr=False)

    def read(self, n: int = -1) -> bytes:
        return self.mount.read(self, n)

    def write(self, data: bytes) -> int:
        return self.mount.write(self, data)

    def seek(self, pos: int) -> int:
        return self.mount.seek(self, pos)

    def close(self) -> None:
        self.mount.close(self)


@dataclass(eq=False)
class LockToken:
    path: str
    mode: str
    lock_id: str | None = None
    expires_at: float = 0.0
    renewals: int = 0
    lost: bool = False
    released: bool = False
    local_fd: int | None = None
    _kick: asyncio.Event | None = field(default=None, repr=False)
    _task: asyncio.Task | None = field(default=None, repr=False)


@dataclass
class OpResult:
    op_id: int
    kind: str
    target: str
    status: str
    message: str = ""
    overwrote: int | None = None

    @property
    def ok(self) -> bool:
        return self.status in ("OK", "DUPLICATE")


@dataclass
class SyncReport:
    results: list[OpResult] = field(default_factory=list)
    remaining: int = 0

    @property
    def drained(self) -> bool:
        return self.remaining == 0

    def to_dict(self) -> dict[str, Any]:
        return {"results": [asdict(r) for r in self.results], "remaining": self.remaining}


@dataclass
class PrefetchReport:
    dir: str
    fetched: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)
    first_entry: bool = True


class Mount:
    def __init__(self, config: MountConfig, transport: Transport, credential: AuthCredential,
                 *, crash_hook: CrashHook | None = None):
        self.config = config
        self.transport = transport
        self.credential = credential
        self.crash_hook = crash_hook
        self.server_addr = config.server_addr
        self.export_id = config.export_id
        self.localized_dirs = set(config.localized_dirs)
        self.cache: CacheSpace | None = None
        self.connection_state = ConnectionState.DISCONNECTED
        self.channel: Channel | None = None
        self.stats = {"fetches": 0, "fetched_bytes": 0, "batches": 0, "reconnects": 0}
        self._handles: set[OpenHandle] = set()
        self._handle_seq = itertools.count(1)
        self._writers: dict[str, set[OpenHandle]] = {}
        self._fetches: dict[str, asyncio.Task] = {}
        self._entered: set[str] = set()
        self._remote_seen: dict[str, int] = {}  # highest version announced by INVALIDATE
        self._locks: set[LockToken] = set()
        self._results: list[OpResult] = []
        self._drain_lock = asyncio.Lock()
        self._work = asyncio.Event()
        self._wake = asyncio.Event()
        self._lost = asyncio.Event()
        self._tasks: list[asyncio.Task] = []
        self._closing = False
        self.drain_error: XufsError | None = None

    # -- lifecycle --

    @property
    def client_id(self) -> str:
        return self.config.client_id

    @property
    def connected(self) -> bool:
        return self.connection_state == ConnectionState.CONNECTED and self.channel is not None

    async def start(self) -> "Mount":
        cfg = self.config
        prior = os.path.exists(os.path.join(cfg.cache_root, cfg.export_id, "meta", "mount.json"))
        self.cache = init_cache_space(cfg.cache_root, cfg.export_id, self.crash_hook)
        stored = self.cache.read_config()
        if not cfg.client_id:
            cfg.client_id = (stored or {}).get("client_id") or uuid.uuid4().hex
        self._recover()
        try:
            await self._establish()
        except XufsError as exc:
            if exc.code in (ErrorCode.UNREACHABLE, ErrorCode.DISCONNECTED) and prior:
                log.info("server unreachable, mounting disconnected")
            else:
                self.cache.close()
                raise
        self.cache.write_config(cfg.to_dict())
        self.cache.begin_session()
        if self.connected:
            await self._after_connect(revalidate=prior)
        self._spawn(self._drain_loop())
        self._spawn(self._supervise())
        return self

    def _recover(self) -> None:
        """Reconcile entry states with what a crashed session left behind."""
        cache = self.cache
        for rel in cache.pending_targets():
            e = cache.get(rel)
            if e is not None and not e.is_dir and e.state in (EntryState.CACHED, EntryState.EMPTY):
                cache.set_state(rel, EntryState.DIRTY)
        for rel in cache.orphan_shadow_targets():
            e = cache.get(rel)
            if e is not None and not e.localized:
                cache.set_state(rel, EntryState.INVALID)

    def _spawn(self, coro) -> asyncio.Task:
        t = asyncio.get_running_loop().create_task(coro)
        self._tasks.append(t)
        return t

    async def unmount(self, drain: bool = True) -> None:
        for h in list(self._handles):
            self.close(h)
        if drain and self.connected:
            try:
                await self.drain()
            except XufsError as exc:
                log.warning("drain at unmount failed: %s", exc)
        for tok in list(self._locks):
            try:
                await self.unlock(tok)
            except XufsError:
                pass
        self._closing = True
        await self._stop_tasks()
        if self.channel is not None:
            self.channel.close()
            self.channel = None
        self.connection_state = ConnectionState.DISCONNECTED
        self.cache.end_session()
        self.cache.close()

    async def _stop_tasks(self) -> None:
        tasks = self._tasks + list(self._fetches.values()) + [t._task for t in self._locks if t._task]
        for t in tasks:
            t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)
        self._tasks.clear()

    def abandon(self) -> None:
        """Drop everything as if the process had been killed."""
        self._closing = True
        for t in self._tasks + list(self._fetches.values()) + [t._task for t in self._locks if t._task]:
            t.cancel()
        for h in list(self._handles):
            h.closed = True
            if h.shadow is not None and h.shadow._fd is not None:
                os.close(h.shadow._fd)
                h.shadow._fd = None
            os.close(h.fd)
        self._handles.clear()
        for tok in self._locks:
            if tok.local_fd is not None:
                os.close(tok.local_fd)
        if self.channel is not None:
            self.channel.close()
            self.channel = None
        self.connection_state = ConnectionState.DISCONNECTED
        if self.cache is not None:
            self.cache.close()

    # -- connection --

    async def _establish(self) -> None:
        conn = await self.transport.connect(self.server_addr)
        ch: Channel | None = None

        def lost():
            self._channel_lost(ch)

        ch = Channel(conn, on_push=self._on_push, on_lost=lost)
        try:
            m = await ch.call(Kind.HELLO, {"key": self.credential.key, "client_id": self.client_id})
            digest = challenge_digest(self.credential, m.payload["nonce"])
            r = await ch.call(Kind.CHALLENGE_RESPONSE, {"digest": digest})
            if r.payload["export_id"] != self.export_id:
                raise XufsError(ErrorCode.PROTOCOL_ERROR,
                                f"server exports {r.payload['export_id']!r}, not {self.export_id!r}")
            await ch.call(Kind.CALLBACK_REGISTER, {"watched": []})
        except BaseException:
            ch.close()
            raise
        if ch.lost.is_set():
            raise XufsError(ErrorCode.DISCONNECTED, "lost during handshake")
        self.channel = ch
        self.connection_state = ConnectionState.CONNECTED
        self._lost.clear()

    def _channel_lost(self, ch: Channel | None) -> None:
        if ch is None or ch is not self.channel:
            return
        self.channel = None
        self.connection_state = ConnectionState.DISCONNECTED
        if not self._closing:
            self._lost.set()

    async def _after_connect(self, revalidate: bool = True) -> None:
        await self.drain()
        if revalidate:
            await self._revalidate()
        for tok in self._locks:
            if tok._kick is not None:
                tok._kick.set()
        self._work.set()

    async def _revalidate(self) -> None:
        """Re-read every materialized directory; newer versions become INVALID."""
        dirs = sorted(
            rel for rel, e in self.cache.entries.items()
            if e.is_dir and e.state == EntryState.CACHED and not e.localized
        )
        for rel in dirs:
            e = self.cache.get(rel)
            if e is None or e.state != EntryState.CACHED:
                continue  # dropped along with a removed parent
            try:
                await self._readdir(rel)
            except XufsError as exc:
                if exc.code in (ErrorCode.NOT_FOUND, ErrorCode.NOT_A_DIRECTORY):
                    self.cache.set_state(rel, EntryState.INVALID)
                else:
                    raise

    async def _wait_wake(self, delay: float) -> None:
        try:
            await asyncio.wait_for(self._wake.wait(), delay)
        except asyncio.TimeoutError:
            pass
        self._wake.clear()

    async def _supervise(self) -> None:
        """Reconnect with exponential backoff whenever the channel is lost."""
        cfg = self.config
        delay = cfg.backoff_initial
        while True:
            if self.connected:
                await self._lost.wait()
                delay = cfg.backoff_initial
                continue
            await self._wait_wake(delay)
            try:
                await self._establish()
                self.stats["reconnects"] += 1
                await self._after_connect()
                delay = cfg.backoff_initial
            except XufsError as exc:
                log.debug("reconnect failed: %s", exc)
                delay = min(delay * 2, cfg.backoff_cap)

    def _on_push(self, m: Message) -> None:
        if m.kind == Kind.INVALIDATE:
            self.handle_invalidate(m.payload["path"], m.payload["version"])

    # -- draining --

    async def drain(self) -> None:
        """Ship queued operations until the queue is empty."""
        async with self._drain_lock:
            queue = self.cache.queue
            while queue.pending:
                if not self.connected:
                    raise XufsError(ErrorCode.DISCONNECTED, "not connected")
                ops, fragments = self._next_batch()
                ch = self.channel
                if fragments is None:
                    resp = await ch.call(Kind.METAOP_BATCH, {"ops": [w for _, w in ops]})
                    results = resp.payload["results"]
                else:
                    op, wire = ops[0]
                    for i, frag in enumerate(fragments):
                        w = dict(wire, args=dict(wire["args"], extents=frag, fragment=i,
                                                 fragments=len(fragments)))
                        resp = await ch.call(Kind.METAOP_BATCH, {"ops": [w]})
                    results = resp.payload["results"]
                self.stats["batches"] += 1
                self._settle([op for op, _ in ops], results)

    def _next_batch(self) -> tuple[list[tuple[MetaOp, dict]], list | None]:
        cfg = self.config
        out: list[tuple[MetaOp, dict]] = []
        size = 0
        for op in self.cache.queue.pending:
            if len(out) >= cfg.batch_max_ops or size >= cfg.fragment_bytes:
                break
            wire = op.to_wire()
            if op.kind == OpKind.FLUSH_SHADOW and "blob" in op.args:
                a = op.args
                frags = read_blob_extents(os.path.join(self.cache.queue.blob_dir, a["blob"]),
                                          a["index"], cfg.fragment_bytes)
                args = {"truncate": a.get("truncate", False), "base_version": a.get("base_version")}
                if len(frags) > 1:
                    if out:
                        break
                    return [(op, dict(wire, args=args))], frags
                wire = dict(wire, args=dict(args, extents=frags[0]))
                size += sum(len(d) for _, d in frags[0])
            out.append((op, wire))
        return out, None

    def _settle(self, ops: list[MetaOp], results: list[dict]) -> None:
        by_id = {r["op_id"]: r for r in results}
        self.cache.ack_through(ops[-1].op_id)
        still = self.cache.pending_targets()
        for op in ops:
            r = by_id.get(op.op_id, {"status": ErrorCode.PROTOCOL_ERROR.value, "message": "no result"})
            res = OpResult(op.op_id, op.kind.value, op.target, r["status"], r.get("message", ""),
                           r.get("overwrote"))
            self._results.append(res)
            self._apply_result(op, res, r.get("versions", {}), still)

    def _apply_result(self, op: MetaOp, res: OpResult, versions: dict, still: set[str]) -> None:
        cache = self.cache
        targets = [op.target, op.args["dest"]] if op.kind == OpKind.RENAME else [op.target]
        for rel in targets:
            e = cache.get(rel)
            if e is None or e.localized:
                continue
            v = versions.get(rel)
            if not res.ok or res.status == "DUPLICATE" or res.overwrote is not None:
                # our local copy may not match the server any more
                if rel not in still and not e.is_dir:
                    cache.set_state(rel, EntryState.INVALID)
                continue
            if v is None:
                continue
            stale = self._remote_seen.get(rel, 0) > v
            if e.is_dir:
                if e.cached_version < v:
                    e.cached_version = v
                    e.attrs = e.attrs.evolve(version=v)
                    cache.put(e)
                continue
            if e.state == EntryState.EMPTY:
                e.attrs = e.attrs.evolve(version=v)
                cache.put(e)
            elif e.state == EntryState.DIRTY:
                e.cached_version = v
                e.attrs = e.attrs.evolve(version=v)
                if stale:
                    e.state = EntryState.INVALID
                elif rel not in still:
                    e.state = EntryState.CACHED
                cache.put(e)

    async def _drain_loop(self) -> None:
        while True:
            await self._work.wait()
            self._work.clear()
            if not self.connected or not self.cache.queue.pending:
                continue
            try:
                await self.drain()
                self.drain_error = None
            except XufsError as exc:
                if exc.code != ErrorCode.DISCONNECTED:
                    log.error("drain failed: %s", exc)
                    self.drain_error = exc

    async def sync(self) -> SyncReport:
        """Drain the queue now and report every op settled since the last sync."""
        for attempt in range(2):
            try:
                if not self.connected:
                    await self._establish()
                    await self._after_connect()
                else:
                    await self.drain()
                break
            except XufsError as exc:
                if exc.code not in (ErrorCode.DISCONNECTED, ErrorCode.UNREACHABLE):
                    raise
                # the channel may have died before the reader noticed; retry once on a fresh one
                self._channel_lost(self.channel)
                if attempt:
                    raise XufsError(ErrorCode.UNREACHABLE, f"sync: {exc}") from None
        report = SyncReport(self._results, len(self.cache.queue.pending))
        self._results = []
        return report

    # -- invalidation --

    def handle_invalidate(self, path: str, new_version: int) -> None:
        try:
            rel = normalize(path)
        except XufsError:
            return
        if new_version > self._remote_seen.get(rel, 0):
            self._remote_seen[rel] = new_version
        e = self.cache.get(rel)
        if e is None or e.localized or new_version <= e.cached_version:
            return
        if e.state == EntryState.EMPTY:
            return
        self.cache.set_state(rel, EntryState.INVALID)
        if e.is_dir:
            self._entered.discard(rel)

    # -- helpers --

    def is_localized(self, rel: str) -> bool:
        return any(is_under(rel, d) for d in self.localized_dirs)

    def _entry(self, rel: str) -> CacheEntry:
        e = self.cache.get(rel)
        if e is None:
            self._require_parent(rel)
            raise XufsError(ErrorCode.NOT_FOUND, rel)
        return e

    def _require_parent(self, rel: str) -> None:
        if rel == "":
            return
        parent = parent_of(rel)
        if self.is_localized(rel):
            if self.is_localized(parent):
                self._ensure_local_dir(parent)
            return
        pe = self.cache.get(parent)
        if pe is None or pe.state == EntryState.EMPTY:
            raise XufsError(ErrorCode.NOT_MATERIALIZED, parent or "/")
        if not pe.is_dir:
            raise XufsError(ErrorCode.NOT_A_DIRECTORY, parent)

    def _ensure_local_dir(self, rel: str) -> None:
        e = self.cache.get(rel)
        if e is not None and e.is_dir:
            if not e.localized or e.state != EntryState.CACHED:
                self.cache.set_state(rel, EntryState.CACHED, localized=True)
            return
        if rel and self.is_localized(parent_of(rel)):
            self._ensure_local_dir(parent_of(rel))
        os.makedirs(self.cache.data_path(rel), exist_ok=True)
        attrs = EntryAttributes(basename(rel), EntryKind.DIR, 0, 0o755, time.time_ns(), 0)
        self.cache.put(CacheEntry(rel, EntryState.CACHED, attrs, 0, localized=True))

    def _enqueue(self, kind: OpKind, target: str, args: dict[str, Any]) -> MetaOp:
        op = self.cache.enqueue(self.cache.queue.make_op(kind, target, args))
        self._work.set()
        return op

    # -- directories --

    async def _readdir(self, rel: str) -> list[EntryAttributes]:
        resp = await self.channel.call(Kind.READDIR_REQ, {"path": rel})
        entries = [EntryAttributes.from_wire(d) for d in resp.payload["entries"]]
        dir_attrs = EntryAttributes.from_wire(resp.payload["attrs"])
        self.cache.materialize_dir(entries, rel, dir_attrs)
        if self._remote_seen.get(rel, 0) > dir_attrs.version:
            self.cache.set_state(rel, EntryState.INVALID)
        return entries

    def _listing(self, rel: str) -> list[EntryAttributes]:
        return [c.attrs for c in self.cache.children(rel)]

    async def opendir(self, path: str) -> list[EntryAttributes]:
        """Directory listing; the first call per directory materializes it."""
        rel = normalize(path)
        if self.is_localized(rel):
            self._ensure_local_dir(rel)
            return self._listing(rel)
        e = self.cache.get(rel)
        if e is not None and not e.is_dir:
            raise XufsError(ErrorCode.NOT_A_DIRECTORY, rel)
        if e is not None and e.state == EntryState.CACHED:
            return self._listing(rel)
        if not self.connected:
            if e is not None and e.state == EntryState.INVALID:
                return self._listing(rel)
            raise XufsError(ErrorCode.DISCONNECTED_MISS, rel or "/")
        await self._readdir(rel)
        return self._listing(rel)

    async def listdir(self, path: str) -> list[str]:
        return [a.name for a in await self.opendir(path)]

    async def chdir(self, path: str) -> PrefetchReport:
        """Enter a directory, prefetching its small files on first entry."""
        rel = normalize(path)
        await self.opendir(rel)
        report = PrefetchReport(rel)
        if rel in self._entered or self.is_localized(rel):
            report.first_entry = False
            return report
        self._entered.add(rel)
        cfg = self.config
        eligible = [
            c.rel_path for c in self.cache.children(rel)
            if c.attrs.kind == EntryKind.FILE
            and c.attrs.size < cfg.prefetch_threshold
            and c.state in (EntryState.EMPTY, EntryState.INVALID)
        ]
        sem = asyncio.Semaphore(cfg.prefetch_parallelism)

        async def one(child: str) -> None:
            async with sem:
                try:
                    await self._ensure_content(child)
                    report.fetched.append(basename(child))
                except XufsError as exc:
                    report.failed[basename(child)] = exc.code.value

        await asyncio.gather(*(one(c) for c in eligible))
        report.fetched.sort()
        return report

    # -- content --

    async def _ensure_content(self, rel: str) -> None:
        e = self.cache.get(rel)
        if e is None or e.localized or e.state in (EntryState.CACHED, EntryState.DIRTY):
            return
        task = self._fetches.get(rel)
        if task is None:
            task = asyncio.get_running_loop().create_task(self._fetch(rel))
            self._fetches[rel] = task
            task.add_done_callback(lambda _t: self._fetches.pop(rel, None))
        await asyncio.shield(task)

    async def _fetch(self, rel: str) -> None:
        if not self.connected:
            raise XufsError(ErrorCode.DISCONNECTED_MISS, rel)
        if rel in self.cache.pending_targets():
            await self.drain()
        for attempt in (0, 1):
            e = self.cache.get(rel)
            if e is None:
                raise XufsError(ErrorCode.NOT_FOUND, rel)
            try:
                await self._fetch_once(e)
                return
            except XufsError as exc:
                if exc.code == ErrorCode.DISCONNECTED:
                    raise XufsError(ErrorCode.DISCONNECTED_MISS, rel) from None
                if exc.code != ErrorCode.SIZE_CHANGED or attempt:
                    raise
                attrs = exc.detail.get("attrs")
                if attrs:
                    e.attrs = EntryAttributes.from_wire(attrs).evolve(name=basename(rel))
                    self.cache.put(e)

    async def _fetch_once(self, e: CacheEntry) -> None:
        rel = e.rel_path
        size = e.attrs.size
        plan = plan_stripes(size, self.config.max_streams, self.config.min_block)
        tmp = os.path.join(self.cache.tmp_dir, f"fetch.{uuid.uuid4().hex}")
        fd = os.open(tmp, os.O_RDWR | os.O_CREAT | os.O_TRUNC, 0o644)
        tracker = Reassembler(size)

        def on_segment(m: Message) -> None:
            if m.kind == Kind.FETCH_SEGMENT:
                data = m.payload["data"]
                tracker.add(m.payload["offset"], len(data))
                os.pwrite(fd, data, m.payload["offset"])

        try:
            resp = await self.channel.call(
                Kind.FETCH_REQ,
                {"path": rel, "total_length": size, "segments": plan.to_wire()},
                on_partial=on_segment,
                complete=lambda: tracker.complete,
            )
            tracker.check_complete()
        except BaseException:
            os.close(fd)
            os.unlink(tmp)
            raise
        os.close(fd)
        os.replace(tmp, self.cache.data_path(rel))
        version = resp.payload["version"]
        self.stats["fetches"] += 1
        self.stats["fetched_bytes"] += size
        cur = self.cache.get(rel)
        if cur is None:
            return
        cur.attrs = cur.attrs.evolve(size=resp.payload["size"], version=version)
        cur.cached_version = version
        stale = self._remote_seen.get(rel, 0) > version
        cur.state = EntryState.INVALID if stale else EntryState.CACHED
        self.cache.put(cur)

    # -- files --

    async def open(self, path: str, mode: OpenMode | str = OpenMode.READ, *, create: bool = False,
                   truncate: bool = False, file_mode: int = 0o644) -> OpenHandle:
        rel = normalize(path)
        mode = OpenMode(mode)
        localized = self.is_localized(rel)
        e = self.cache.get(rel)
        if e is None:
            if not create:
                self._entry(rel)
            e = self._create_file(rel, file_mode, localized)
        elif e.is_dir:
            raise XufsError(ErrorCode.IS_A_DIRECTORY, rel)
        writing = mode != OpenMode.READ
        if not (writing and truncate):
            await self._ensure_content(rel)
        fd = os.open(self.cache.data_path(rel), os.O_RDWR if writing else os.O_RDONLY)
        h = OpenHandle(f"h{next(self._handle_seq)}", rel, mode, fd=fd, localized=localized, mount=self)
        if writing:
            if truncate:
                os.ftruncate(fd, 0)
            if not localized:
                e = self.cache.get(rel)
                h.shadow = self.cache.new_shadow(rel, e.cached_version, truncate and writing)
                h.shadow.data_fd = fd
                others = self._writers.setdefault(rel, set())
                if others:
                    h.shared = True
                    for o in others:
                        o.shared = True
                others.add(h)
        self._handles.add(h)
        return h

    def _create_file(self, rel: str, file_mode: int, localized: bool) -> CacheEntry:
        self._require_parent(rel)
        if not localized:
            self._enqueue(OpKind.CREATE, rel, {"mode": file_mode})
        with open(self.cache.data_path(rel), "wb"):
            pass
        attrs = EntryAttributes(basename(rel), EntryKind.FILE, 0, file_mode, time.time_ns(), 0)
        e = CacheEntry(rel, EntryState.CACHED if localized else EntryState.DIRTY, attrs, 0, localized)
        self.cache.put(e)
        return e

    def _check(self, h: OpenHandle) -> None:
        if h.closed:
            raise XufsError(ErrorCode.BAD_HANDLE, "handle is closed")

    def read(self, h: OpenHandle, n: int = -1) -> bytes:
        self._check(h)
        if n < 0:
            n = max(0, os.fstat(h.fd).st_size - h.position)
        data = os.pread(h.fd, n, h.position)
        h.position += len(data)
        return data

    def readinto(self, h: OpenHandle, buf) -> int:
        self._check(h)
        n = os.preadv(h.fd, [buf], h.position)
        h.position += n
        return n

    def write(self, h: OpenHandle, data: bytes) -> int:
        self._check(h)
        if h.mode == OpenMode.READ:
            raise XufsError(ErrorCode.BAD_HANDLE, "handle not open for writing")
        if h.shadow is not None:
            self.cache.shadow_append(h.shadow, h.position, data)
        else:
            os.pwrite(h.fd, data, h.position)
        h.position += len(data)
        return len(data)

    def seek(self, h: OpenHandle, pos: int) -> int:
        self._check(h)
        if pos < 0:
            raise XufsError(ErrorCode.IO_ERROR, "negative seek")
        h.position = pos
        return pos

    def close(self, h: OpenHandle) -> None:
        """Release a handle; writers queue one FLUSH_SHADOW with their changes."""
        if h.closed:
            return
        h.closed = True
        self._handles.discard(h)
        try:
            if h.mode == OpenMode.READ:
                return
            rel = h.rel_path
            e = self.cache.get(rel)
            if h.localized:
                if e is not None:
                    st = os.fstat(h.fd)
                    e.attrs = e.attrs.evolve(size=st.st_size, mtime_ns=st.st_mtime_ns)
                    self.cache.put(e)
                return
            self._writers.get(rel, set()).discard(h)
            sh = h.shadow
            if e is None or (not sh.index and not sh.truncate):
                self.cache.discard_shadow(sh)
                return
            current = self.cache.data_path(rel)
            if h.shared or os.fstat(h.fd).st_ino != os.stat(current).st_ino:
                # last close wins locally as well: replay this handle's bytes
                # over whatever other writers left in the current file
                with open(current, "r+b") as f:
                    if sh.truncate:
                        f.truncate(0)
                    for offset, data in coalesce_shadow(sh):
                        f.seek(offset)
                        f.write(data)
            # with our own ops still queued for this path the server version
            # will have moved on by the time the flush lands; skip the check
            base = None if rel in self.cache.pending_targets() else sh.base_version
            blob, index = self.cache.seal_shadow(sh)
            self._enqueue(OpKind.FLUSH_SHADOW, rel, {
                "truncate": sh.truncate, "base_version": base, "blob": blob, "index": index,
            })
            st = os.stat(current)
            e.attrs = e.attrs.evolve(size=st.st_size, mtime_ns=st.st_mtime_ns)
            e.state = EntryState.INVALID if e.state == EntryState.INVALID else EntryState.DIRTY
            self.cache.put(e)
        finally:
            os.close(h.fd)

    # -- namespace mutations --

    def stat(self, path: str) -> EntryAttributes:
        rel = normalize(path)
        try:
            return self.cache.read_cached_attrs(rel)
        except XufsError:
            self._require_parent(rel)
            raise XufsError(ErrorCode.NOT_FOUND, rel) from None

    def mkdir(self, path: str, mode: int = 0o755) -> None:
        rel = normalize(path)
        if rel == "":
            raise XufsError(ErrorCode.EXISTS, "/")
        self._require_parent(rel)
        if self.cache.get(rel) is not None:
            raise XufsError(ErrorCode.EXISTS, rel)
        localized = self.is_localized(rel)
        if not localized:
            self._enqueue(OpKind.MKDIR, rel, {"mode": mode})
        os.makedirs(self.cache.data_path(rel), exist_ok=True)
        attrs = EntryAttributes(basename(rel), EntryKind.DIR, 0, mode, time.time_ns(), 0)
        self.cache.put(CacheEntry(rel, EntryState.CACHED, attrs, 0, localized))

    def unlink(self, path: str) -> None:
        rel = normalize(path)
        e = self._entry(rel)
        if e.is_dir:
            raise XufsError(ErrorCode.IS_A_DIRECTORY, rel)
        if not e.localized:
            self._enqueue(OpKind.UNLINK, rel, {})
        self.cache.remove(rel)

    def rmdir(self, path: str) -> None:
        rel = normalize(path)
        if rel == "":
            raise XufsError(ErrorCode.ACCESS_DENIED, "cannot remove the export root")
        e = self._entry(rel)
        if not e.is_dir:
            raise XufsError(ErrorCode.NOT_A_DIRECTORY, rel)
        if self.cache.children(rel):
            raise XufsError(ErrorCode.NOT_EMPTY, rel)
        if not e.localized:
            self._enqueue(OpKind.RMDIR, rel, {})
        self.cache.remove(rel)
        self._entered.discard(rel)

    def rename(self, src: str, dest: str) -> None:
        s, d = normalize(src), normalize(dest)
        if s == "" or d == "":
            raise XufsError(ErrorCode.ACCESS_DENIED, "cannot rename the export root")
        e = self._entry(s)
        self._require_parent(d)
        if is_under(d, s) and d != s:
            raise XufsError(ErrorCode.ACCESS_DENIED, f"cannot move {s} into itself")
        if self.is_localized(s) != self.is_localized(d):
            raise XufsError(ErrorCode.ACCESS_DENIED, "rename across a localized boundary")
        old = self.cache.get(d)
        if old is not None:
            if old.is_dir != e.is_dir:
                raise XufsError(ErrorCode.IS_A_DIRECTORY if old.is_dir else ErrorCode.NOT_A_DIRECTORY, d)
            if old.is_dir and self.cache.children(d):
                raise XufsError(ErrorCode.NOT_EMPTY, d)
        if s == d:
            return
        if not e.localized:
            self._enqueue(OpKind.RENAME, s, {"dest": d})
        self.cache.move(s, d)
        for h in self._handles:
            if is_under(h.rel_path, s):
                new = d + h.rel_path[len(s):]
                if h.rel_path in self._writers:
                    self._writers[new] = self._writers.pop(h.rel_path)
                h.rel_path = new
                if h.shadow is not None:
                    h.shadow.target = new

    def truncate(self, path: str, size: int) -> None:
        self.setattr(path, size=size)

    def setattr(self, path: str, *, size: int | None = None, mode: int | None = None,
                mtime_ns: int | None = None) -> None:
        rel = normalize(path)
        e = self._entry(rel)
        args: dict[str, Any] = {}
        changes: dict[str, Any] = {}
        if size is not None:
            if e.is_dir:
                raise XufsError(ErrorCode.IS_A_DIRECTORY, rel)
            args["size"] = changes["size"] = size
        if mode is not None:
            args["mode"] = changes["mode"] = mode
        if mtime_ns is not None:
            args["mtime_ns"] = changes["mtime_ns"] = mtime_ns
        if not args:
            return
        if not e.localized:
            self._enqueue(OpKind.SETATTR, rel, args)
        if size is not None and e.state in (EntryState.CACHED, EntryState.DIRTY):
            os.truncate(self.cache.data_path(rel), size)
            if not e.localized:
                e.state = EntryState.DIRTY
        e.attrs = e.attrs.evolve(**changes)
        self.cache.put(e)

    # -- locks --

    async def lock(self, path: str, mode: str = "EXCLUSIVE") -> LockToken:
        rel = normalize(path)
        mode = str(getattr(mode, "value", mode)).upper()
        if mode not in ("SHARED", "EXCLUSIVE"):
            raise XufsError(ErrorCode.PROTOCOL_ERROR, f"bad lock mode {mode}")
        if self.is_localized(rel):
            e = self._entry(rel)
            if e.is_dir:
                raise XufsError(ErrorCode.IS_A_DIRECTORY, rel)
            fd = os.open(self.cache.data_path(rel), os.O_RDONLY)
            try:
                fcntl.flock(fd, (fcntl.LOCK_EX if mode == "EXCLUSIVE" else fcntl.LOCK_SH) | fcntl.LOCK_NB)
            except BlockingIOError:
                os.close(fd)
                raise XufsError(ErrorCode.CONFLICT, f"{rel} is locked") from None
            tok = LockToken(rel, mode, local_fd=fd)
            self._locks.add(tok)
            return tok
        if not self.connected:
            raise XufsError(ErrorCode.DISCONNECTED, "lock needs a connection")
        loop = asyncio.get_running_loop()
        sent = loop.time()
        resp = await self.channel.call(Kind.LOCK_REQ, {"path": rel, "mode": mode})
        lease = resp.payload["lease"]
        tok = LockToken(rel, mode, lease["lock_id"], sent + lease["expires_in"])
        tok._kick = asyncio.Event()
        tok._task = loop.create_task(self._renew_loop(tok))
        self._locks.add(tok)
        return tok

    async def _renew_loop(self, tok: LockToken) -> None:
        loop = asyncio.get_running_loop()
        while not tok.released:
            now = loop.time()
            if self.connected:
                wait = max(0.01, (tok.expires_at - now) / 2)
            else:
                wait = min(self.config.renew_retry, max(0.001, tok.expires_at - now))
            try:
                await asyncio.wait_for(tok._kick.wait(), wait)
            except asyncio.TimeoutError:
                pass
            tok._kick.clear()
            if tok.released:
                return
            # the epsilon keeps float residue from spinning the loop just short of expiry
            if loop.time() >= tok.expires_at - 1e-6:
                tok.lost = True
                log.warning("lease %s on %s expired", tok.lock_id, tok.path)
                return
            if not self.connected:
                self._wake.set()
                continue
            sent = loop.time()
            try:
                resp = await self.channel.call(Kind.LEASE_RENEW, {"lock_id": tok.lock_id})
            except XufsError as exc:
                if exc.code in (ErrorCode.EXPIRED, ErrorCode.NOT_OWNER):
                    tok.lost = True
                    return
                continue
            tok.expires_at = sent + resp.payload["lease"]["expires_in"]
            tok.renewals += 1

    async def unlock(self, tok: LockToken) -> None:
        if tok.released:
            return
        tok.released = True
        self._locks.discard(tok)
        if tok.local_fd is not None:
            fcntl.flock(tok.local_fd, fcntl.LOCK_UN)
            os.close(tok.local_fd)
            tok.local_fd = None
            return
        if tok._task is not None:
            tok._task.cancel()
            await asyncio.gather(tok._task, return_exceptions=True)
        if tok.lost or not self.connected:
            return
        try:
            await self.channel.call(Kind.UNLOCK, {"lock_id": tok.lock_id})
        except XufsError as exc:
            if exc.code not in (ErrorCode.EXPIRED, ErrorCode.NOT_OWNER, ErrorCode.DISCONNECTED):
                raise


async def mount(server_addr: str, export_id: str, cache_root: str, localized_dirs=(), *,
                transport: Transport, credential: AuthCredential, crash_hook: CrashHook | None = None,
                **knobs) -> Mount:
    """Mount ``export_id`` from ``server_addr`` with its cache under ``cache_root``."""
    cfg = MountConfig(server_addr, export_id, cache_root, list(localized_dirs)).with_env()
    for k, v in knobs.items():
        setattr(cfg, k, v)
    return await Mount(cfg, transport, credential, crash_hook=crash_hook).start()


async def sync(cache_root: str, export_id: str, *, transport: Transport, credential: AuthCredential,
               server_addr: str | None = None) -> SyncReport:
    """Replay the queue of an existing cache space against its server."""
    space = os.path.join(cache_root, export_id, "meta", "mount.json")
    if not os.path.exists(space):
        raise XufsError(ErrorCode.NOT_FOUND, f"no cache space for {export_id} under {cache_root}")
    with open(space) as f:
        cfg = MountConfig.from_dict(json.load(f))
    cfg.cache_root = cache_root
    if server_addr:
        cfg.server_addr = server_addr
    m = Mount(cfg.with_env(), transport, credential)
    await m.start()
    try:
        if not m.connected:
            raise XufsError(ErrorCode.UNREACHABLE, f"cannot reach {cfg.server_addr}")
        return await m.sync()
    finally:
        await m.unmount(drain=False)
