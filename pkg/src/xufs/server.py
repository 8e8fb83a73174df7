"""Personal file server exporting one home name space.

The server owns the authoritative tree under ``root``. It serves directory
listings and whole-file content (striped), applies meta-operation batches
from clients idempotently, pushes INVALIDATE messages to registered
clients, and hands out renewable lock leases.

All namespace mutations run synchronously on the event loop thread, which
gives per-export single-writer semantics without an explicit mutex; only
network sends yield.
"""

from __future__ import annotations

import asyncio
import enum
import errno
import fcntl
import hashlib
import logging
import os
import posixpath
import secrets
import stat as stat_mod
import struct
import time
import zlib
from dataclasses import dataclass
from typing import Any, Callable

import msgpack

from .errors import ErrorCode, XufsError
from .model import (
    SERVER_STATE_DIR,
    EntryAttributes,
    EntryKind,
    MetaOp,
    OpKind,
    basename,
    is_under,
    join,
    normalize,
    parent_of,
)
from .transport import Connection
from .wire import (
    AuthCredential,
    Kind,
    Message,
    Reassembler,
    StripePlan,
    error_message,
    verify_digest,
)

log = logging.getLogger(__name__)

STATE_MAGIC = b"XUFSSTAT"
STATE_FORMAT = 1
_STATE_HEADER = struct.Struct(">8sHI")


def write_state_file(path: str, obj: Any) -> None:
    """Atomically replace ``path`` with a checksummed msgpack document."""
    body = msgpack.packb(obj, use_bin_type=True)
    tmp = path + ".tmp"
    with open(tmp, "wb") as f:
        f.write(_STATE_HEADER.pack(STATE_MAGIC, STATE_FORMAT, zlib.crc32(body)))
        f.write(body)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)


def read_state_file(path: str) -> Any | None:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except FileNotFoundError:
        return None
    if len(raw) < _STATE_HEADER.size:
        raise XufsError(ErrorCode.IO_ERROR, f"{path}: truncated state file")
    magic, fmt, crc = _STATE_HEADER.unpack_from(raw)
    body = raw[_STATE_HEADER.size:]
    if magic != STATE_MAGIC or fmt != STATE_FORMAT or zlib.crc32(body) != crc:
        raise XufsError(ErrorCode.IO_ERROR, f"{path}: corrupt or unknown state file")
    return msgpack.unpackb(body, raw=False)


# -- versions ---------------------------------------------------------------


class VersionIndex:
    """Per-path version counters plus the stat signature they were taken at.

    A path whose on-disk signature no longer matches its record has been
    changed behind the server's back and gets a fresh version. Deleted paths
    keep a tombstone so a later re-creation continues the sequence.
    """

    def __init__(self, entries=None, applied=None):
        # rel -> [version, mtime_ns, size, kind or None]
        self.entries: dict[str, list] = entries or {}
        # client_id -> highest op_id applied
        self.applied: dict[str, int] = applied or {}
        self.dirty = False

    @staticmethod
    def signature(st) -> tuple[int, int, str] | None:
        if st is None:
            return None
        if stat_mod.S_ISDIR(st.st_mode):
            return (st.st_mtime_ns, 0, EntryKind.DIR.value)
        kind = EntryKind.SYMLINK if stat_mod.S_ISLNK(st.st_mode) else EntryKind.FILE
        return (st.st_mtime_ns, st.st_size, kind.value)

    def version(self, rel: str) -> int:
        rec = self.entries.get(rel)
        return rec[0] if rec else 0

    def observe(self, rel: str, st, force: bool = False) -> tuple[int, bool]:
        """Return ``(version, changed)`` for the current stat of ``rel``."""
        sig = self.signature(st)
        rec = self.entries.get(rel)
        if rec is None:
            if sig is None:
                return 0, False
            self.entries[rel] = [1, *sig]
            self.dirty = True
            return 1, False
        old_sig = None if rec[3] is None else (rec[1], rec[2], rec[3])
        if force or old_sig != sig:
            rec[0] += 1
            if sig is None:
                rec[1:] = [0, 0, None]
            else:
                rec[1:] = list(sig)
            self.dirty = True
            return rec[0], True
        return rec[0], False

    def to_state(self) -> dict:
        return {"entries": self.entries, "applied": self.applied}

    @classmethod
    def from_state(cls, d: dict | None) -> "VersionIndex":
        if not d:
            return cls()
        return cls(d.get("entries", {}), d.get("applied", {}))


# -- leases -----------------------------------------------------------------


class LockMode(str, enum.Enum):
    SHARED = "SHARED"
    EXCLUSIVE = "EXCLUSIVE"


@dataclass
class Lease:
    lock_id: str
    path: str
    holder: str
    mode: LockMode
    expires_at: float
    term: float

    def live(self, now: float) -> bool:
        return now < self.expires_at

    def to_wire(self, now: float) -> dict[str, Any]:
        return {
            "lock_id": self.lock_id,
            "path": self.path,
            "holder": self.holder,
            "mode": self.mode.value,
            "expires_in": self.expires_at - now,
            "term": self.term,
        }


class LeaseTable:
    """Lock leases with lazy reaping of expired entries."""

    def __init__(self, term: float = 30.0, clock: Callable[[], float] = time.time):
        self.term = term
        self.clock = clock
        self.leases: dict[str, Lease] = {}
        self._next = 1

    def _live_on(self, path: str, now: float) -> list[Lease]:
        out = []
        for lease in list(self.leases.values()):
            if lease.path != path:
                continue
            if lease.live(now):
                out.append(lease)
            else:
                del self.leases[lease.lock_id]
        return out

    def grant(self, path: str, mode: LockMode | str, holder: str) -> Lease:
        mode = LockMode(mode)
        now = self.clock()
        for other in self._live_on(path, now):
            if other.holder == holder:
                continue
            if mode == LockMode.EXCLUSIVE or other.mode == LockMode.EXCLUSIVE:
                raise XufsError(ErrorCode.CONFLICT, f"{path} locked by {other.holder}")
        lease = Lease(f"L{self._next}", path, holder, mode, now + self.term, self.term)
        self._next += 1
        self.leases[lease.lock_id] = lease
        return lease

    def renew(self, lock_id: str, holder: str) -> Lease:
        now = self.clock()
        lease = self.leases.get(lock_id)
        if lease is None or not lease.live(now):
            self.leases.pop(lock_id, None)
            raise XufsError(ErrorCode.EXPIRED, f"lease {lock_id} expired")
        if lease.holder != holder:
            raise XufsError(ErrorCode.NOT_OWNER, f"lease {lock_id} held by {lease.holder}")
        lease.expires_at = now + lease.term
        return lease

    def release(self, lock_id: str, holder: str) -> None:
        lease = self.leases.get(lock_id)
        if lease is None:
            return
        if lease.holder != holder:
            raise XufsError(ErrorCode.NOT_OWNER, f"lease {lock_id} held by {lease.holder}")
        del self.leases[lock_id]

    def live_leases(self) -> list[Lease]:
        now = self.clock()
        return [ls for ls in self.leases.values() if ls.live(now)]

    def to_state(self) -> dict:
        return {
            "next": self._next,
            "leases": [
                [ls.lock_id, ls.path, ls.holder, ls.mode.value, ls.expires_at, ls.term]
                for ls in self.leases.values()
            ],
        }

    def load_state(self, d: dict | None) -> None:
        if not d:
            return
        self._next = d["next"]
        for lock_id, path, holder, mode, expires_at, term in d["leases"]:
            self.leases[lock_id] = Lease(lock_id, path, holder, LockMode(mode), expires_at, term)


# -- callbacks --------------------------------------------------------------


class CallbackRegistration:
    def __init__(self, client_id: str, channel: Connection, watched=()):
        self.client_id = client_id
        self.channel = channel
        self.watched = frozenset(normalize(p) for p in watched)
        self.alive = True
        self.outbox: asyncio.Queue = asyncio.Queue()
        self.task: asyncio.Task | None = None

    def wants(self, rel: str) -> bool:
        return not self.watched or any(is_under(rel, w) for w in self.watched)

    def close(self) -> None:
        self.alive = False
        if self.task is not None:
            self.task.cancel()
        self.channel.close()


# -- server -----------------------------------------------------------------


@dataclass(eq=False)
class _Session:
    conn: Connection
    client_id: str | None = None
    key: str | None = None
    nonce: bytes | None = None
    authenticated: bool = False


class FileServer:
    def __init__(
        self,
        root: str,
        credential: AuthCredential,
        *,
        export_id: str | None = None,
        lease_term: float = 30.0,
        poll_interval: float | None = 2.0,
        clock: Callable[[], float] | None = None,
        nonce_source: Callable[[int], bytes] | None = None,
        chunk_size: int = 1 << 20,
    ):
        if not os.path.isdir(root):
            raise XufsError(ErrorCode.NOT_FOUND, f"export root {root!r} is not a directory")
        self.root = os.path.realpath(root)
        self.credential = credential
        self.poll_interval = poll_interval
        self.chunk_size = chunk_size
        self.clock = clock or time.time
        self._nonce = nonce_source or secrets.token_bytes
        self.state_dir = os.path.join(self.root, SERVER_STATE_DIR)
        os.makedirs(self.state_dir, exist_ok=True)
        self._lock_fd = os.open(os.path.join(self.state_dir, "lock"), os.O_RDWR | os.O_CREAT, 0o600)
        try:
            fcntl.flock(self._lock_fd, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except BlockingIOError:
            os.close(self._lock_fd)
            raise XufsError(ErrorCode.IO_ERROR, f"{self.root} is already being served") from None
        self._index_path = os.path.join(self.state_dir, "index")
        self._lease_path = os.path.join(self.state_dir, "leases")
        state = read_state_file(self._index_path) or {}
        self.index = VersionIndex.from_state(state.get("index"))
        self.export_id = export_id or state.get("export_id") or basename(self.root) or "home"
        self.leases = LeaseTable(lease_term, self._now)
        self.leases.load_state(read_state_file(self._lease_path))
        self.registrations: dict[str, CallbackRegistration] = {}
        self.executions: list[tuple[str, int]] = []  # (client_id, op_id), audit trail
        self.fetch_hook: Callable[[str], Any] | None = None
        self._listener = None
        self._sessions: set[_Session] = set()
        self._tasks: set[asyncio.Task] = set()
        self._closed = False
        self.poll_changes(notify=False)
        self.persist()

    def _now(self) -> float:
        return self.clock()

    # -- paths --

    def _abs(self, rel: str) -> str:
        """Backing-store path for a normalized relative path.

        The parent is resolved so a symlinked directory cannot lead outside
        the export; the final component itself is never followed.
        """
        if rel == "":
            return self.root
        parent = os.path.realpath(os.path.join(self.root, parent_of(rel)))
        if parent != self.root and not parent.startswith(self.root + os.sep):
            raise XufsError(ErrorCode.ACCESS_DENIED, f"{rel!r} resolves outside the export")
        return os.path.join(parent, basename(rel))

    def _lstat(self, rel: str):
        try:
            return os.lstat(self._abs(rel))
        except FileNotFoundError:
            return None
        except NotADirectoryError:
            return None

    def _attrs(self, rel: str, st) -> EntryAttributes:
        version, changed = self.index.observe(rel, st)
        if changed:
            self.notify_change(rel, version)
        return EntryAttributes.from_stat(basename(rel), st, version)

    # -- persistence --

    def persist(self) -> None:
        if self.index.dirty:
            write_state_file(self._index_path, {"export_id": self.export_id, "index": self.index.to_state()})
            self.index.dirty = False
        write_state_file(self._lease_path, self.leases.to_state())

    def _persist_index(self) -> None:
        if self.index.dirty:
            write_state_file(self._index_path, {"export_id": self.export_id, "index": self.index.to_state()})
            self.index.dirty = False

    # -- readdir --

    def handle_readdir(self, path: str) -> tuple[EntryAttributes, list[EntryAttributes]]:
        """Attributes of directory ``path`` and of each child, sorted bytewise."""
        rel = normalize(path)
        st = self._lstat(rel)
        if st is None:
            raise XufsError(ErrorCode.NOT_FOUND, path)
        if not stat_mod.S_ISDIR(st.st_mode):
            raise XufsError(ErrorCode.NOT_A_DIRECTORY, path)
        absdir = self._abs(rel)
        dir_attrs = self._attrs(rel, st)
        names = sorted(os.listdir(absdir), key=os.fsencode)
        entries = []
        for name in names:
            if rel == "" and name == SERVER_STATE_DIR:
                continue
            child = join(rel, name)
            cst = self._lstat(child)
            if cst is None:
                continue
            entries.append(self._attrs(child, cst))
        self._persist_index()
        return dir_attrs, entries

    # -- fetch --

    def _fetch_precheck(self, rel: str, total_length: int):
        st = self._lstat(rel)
        if st is None:
            raise XufsError(ErrorCode.NOT_FOUND, rel)
        if stat_mod.S_ISDIR(st.st_mode):
            raise XufsError(ErrorCode.IS_A_DIRECTORY, rel)
        if not stat_mod.S_ISREG(st.st_mode):
            raise XufsError(ErrorCode.ACCESS_DENIED, f"{rel}: not a regular file")
        attrs = self._attrs(rel, st)
        if st.st_size != total_length:
            raise XufsError(ErrorCode.SIZE_CHANGED, f"{rel}: size is {st.st_size}", attrs=attrs.to_wire())
        return st, attrs

    async def handle_fetch(self, path: str, plan: StripePlan, send: Callable[[Message], Any],
                           request_id: int = 0) -> Message:
        """Stream the file as FETCH_SEGMENTs through ``send``; return FETCH_DONE."""
        rel = normalize(path)
        cover = Reassembler(plan.total_length)
        for seg in plan.segments:
            cover.add(seg.offset, seg.length)
        cover.check_complete()
        st, attrs = self._fetch_precheck(rel, plan.total_length)
        self._persist_index()
        if self.fetch_hook is not None:
            r = self.fetch_hook(rel)
            if asyncio.iscoroutine(r):
                await r
        fd = os.open(self._abs(rel), os.O_RDONLY)
        try:
            await _gather_or_cancel(
                self._send_stripe(fd, seg, send, request_id)
                for seg in plan.segments if seg.length
            )
        finally:
            os.close(fd)
        after = self._lstat(rel)
        if (
            after is None
            or VersionIndex.signature(after) != VersionIndex.signature(st)
            or self.index.version(rel) != attrs.version
        ):
            cur = self._attrs(rel, after).to_wire() if after is not None else None
            raise XufsError(ErrorCode.SIZE_CHANGED, f"{rel} changed during fetch", attrs=cur)
        return Message(Kind.FETCH_DONE, request_id, {"path": rel, "version": attrs.version, "size": st.st_size})

    async def _send_stripe(self, fd: int, seg, send, request_id: int) -> None:
        pos, end = seg.offset, seg.end
        while pos < end:
            n = min(self.chunk_size, end - pos)
            data = os.pread(fd, n, pos)
            if len(data) != n:
                raise XufsError(ErrorCode.SIZE_CHANGED, "file shrank during fetch")
            await send(Message(Kind.FETCH_SEGMENT, request_id,
                               {"stream": seg.stream_index, "offset": pos, "data": data}))
            pos += n

    # -- meta-operations --

    def apply_metaops(self, client_id: str, batch: list[MetaOp | dict]) -> list[dict[str, Any]]:
        """Apply ``batch`` in order and return one result per op.

        Ops at or below the client's applied high-water mark are
        acknowledged as duplicates without being executed again. A failed op
        records its error code and the batch carries on.
        """
        results = []
        notes: list[tuple[str, int]] = []
        for raw in batch:
            op = raw if isinstance(raw, MetaOp) else MetaOp.from_wire(raw)
            applied = self.index.applied.get(client_id, 0)
            if op.op_id <= applied:
                results.append({"op_id": op.op_id, "status": "DUPLICATE", "versions": {}})
                continue
            result: dict[str, Any] = {"op_id": op.op_id, "status": "OK", "versions": {}}
            final = op.args.get("fragment", 0) + 1 >= op.args.get("fragments", 1)
            try:
                touched = self._execute(op, result)
                if final:
                    for rel in touched:
                        v, _ = self.index.observe(rel, self._lstat(rel), force=True)
                        result["versions"][rel] = v
                        notes.append((rel, v))
                else:
                    result["status"] = "PARTIAL"
            except XufsError as exc:
                result["status"] = exc.code.value
                result["message"] = exc.message
            except OSError as exc:
                result["status"] = ErrorCode.IO_ERROR.value
                result["message"] = str(exc)
            if final:
                self.index.applied[client_id] = op.op_id
                self.index.dirty = True
                self.executions.append((client_id, op.op_id))
                self._persist_index()
            results.append(result)
        for rel, v in notes:
            self.notify_change(rel, v, origin=client_id)
        return results

    def _execute(self, op: MetaOp, result: dict) -> list[str]:
        rel = normalize(op.target)
        if rel == "":
            raise XufsError(ErrorCode.ACCESS_DENIED, "cannot modify the export root")
        path = self._abs(rel)
        parent = parent_of(rel)
        a = op.args
        try:
            if op.kind == OpKind.CREATE:
                self._need_dir(parent)
                fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_EXCL, 0o600)
                try:
                    os.fchmod(fd, a.get("mode", 0o644))
                finally:
                    os.close(fd)
                return [rel, parent]
            if op.kind == OpKind.MKDIR:
                self._need_dir(parent)
                os.mkdir(path, 0o700)
                os.chmod(path, a.get("mode", 0o755))
                return [rel, parent]
            if op.kind == OpKind.UNLINK:
                st = self._need(rel)
                if stat_mod.S_ISDIR(st.st_mode):
                    raise XufsError(ErrorCode.IS_A_DIRECTORY, rel)
                os.unlink(path)
                return [rel, parent]
            if op.kind == OpKind.RMDIR:
                st = self._need(rel)
                if not stat_mod.S_ISDIR(st.st_mode):
                    raise XufsError(ErrorCode.NOT_A_DIRECTORY, rel)
                os.rmdir(path)
                return [rel, parent]
            if op.kind == OpKind.RENAME:
                dest = normalize(a["dest"])
                if dest == "":
                    raise XufsError(ErrorCode.ACCESS_DENIED, "cannot replace the export root")
                src_st = self._need(rel)
                self._need_dir(parent_of(dest))
                os.rename(path, self._abs(dest))
                touched = [rel, parent, dest, parent_of(dest)]
                if stat_mod.S_ISDIR(src_st.st_mode):
                    touched += self._retire_subtree(rel, dest)
                return list(dict.fromkeys(touched))
            if op.kind == OpKind.SETATTR:
                self._need(rel)
                if "size" in a:
                    os.truncate(path, a["size"])
                if "mode" in a:
                    os.chmod(path, a["mode"])
                if "mtime_ns" in a:
                    os.utime(path, ns=(a["mtime_ns"], a["mtime_ns"]))
                return [rel]
            if op.kind == OpKind.FLUSH_SHADOW:
                st = self._need(rel)
                if not stat_mod.S_ISREG(st.st_mode):
                    raise XufsError(ErrorCode.IS_A_DIRECTORY, rel)
                current = self.index.version(rel)
                base = a.get("base_version")
                if base is not None and a.get("fragment", 0) == 0 and base != current:
                    result["overwrote"] = current
                fd = os.open(path, os.O_WRONLY)
                try:
                    if a.get("truncate") and a.get("fragment", 0) == 0:
                        os.ftruncate(fd, 0)
                    for offset, data in a.get("extents", ()):
                        os.pwrite(fd, data, offset)
                finally:
                    os.close(fd)
                return [rel]
        except FileNotFoundError:
            raise XufsError(ErrorCode.NOT_FOUND, rel) from None
        except FileExistsError:
            raise XufsError(ErrorCode.EXISTS, rel) from None
        except NotADirectoryError:
            raise XufsError(ErrorCode.NOT_A_DIRECTORY, rel) from None
        except IsADirectoryError:
            raise XufsError(ErrorCode.IS_A_DIRECTORY, rel) from None
        except OSError as exc:
            if exc.errno == errno.ENOTEMPTY:
                raise XufsError(ErrorCode.NOT_EMPTY, rel) from None
            raise
        raise XufsError(ErrorCode.PROTOCOL_ERROR, f"unknown op kind {op.kind}")

    def _need(self, rel: str):
        st = self._lstat(rel)
        if st is None:
            raise XufsError(ErrorCode.NOT_FOUND, rel)
        return st

    def _need_dir(self, rel: str) -> None:
        st = self._need(rel)
        if not stat_mod.S_ISDIR(st.st_mode):
            raise XufsError(ErrorCode.NOT_A_DIRECTORY, rel)

    def _retire_subtree(self, old: str, new: str) -> list[str]:
        """Paths that moved along with a renamed directory."""
        moved = []
        for rel in sorted(self.index.entries):
            if rel.startswith(old + "/") and self.index.entries[rel][3] is not None:
                moved.append(rel)
                moved.append(new + rel[len(old):])
        return moved

    # -- local change detection --

    def poll_changes(self, notify: bool = True) -> list[tuple[str, int]]:
        """Scan the backing store for changes made outside the protocol."""
        changed = []
        seen = {""}
        v, did = self.index.observe("", os.lstat(self.root))
        if did:
            changed.append(("", v))
        for dirpath, dirnames, filenames in os.walk(self.root):
            rel_dir = os.path.relpath(dirpath, self.root)
            rel_dir = "" if rel_dir == "." else rel_dir.replace(os.sep, "/")
            if rel_dir == "":
                dirnames[:] = [d for d in dirnames if d != SERVER_STATE_DIR]
            dirnames.sort()
            for name in sorted(dirnames + filenames):
                rel = join(rel_dir, name)
                seen.add(rel)
                v, did = self.index.observe(rel, self._lstat(rel))
                if did:
                    changed.append((rel, v))
        for rel in sorted(self.index.entries):
            rec = self.index.entries[rel]
            if rec[3] is not None and rel not in seen:
                v, did = self.index.observe(rel, None)
                if did:
                    changed.append((rel, v))
        self._persist_index()
        if notify:
            for rel, v in changed:
                self.notify_change(rel, v)
        return changed

    async def _poll_loop(self) -> None:
        while True:
            await asyncio.sleep(self.poll_interval)
            try:
                self.poll_changes()
            except OSError as exc:
                log.warning("poll failed: %s", exc)

    # -- callbacks --

    def register_callback(self, client_id: str, channel: Connection, watched=(),
                          authenticated: bool = True) -> CallbackRegistration:
        if not authenticated:
            raise XufsError(ErrorCode.ACCESS_DENIED, "callback registration requires authentication")
        old = self.registrations.pop(client_id, None)
        if old is not None and old.channel is not channel:
            old.close()
        reg = CallbackRegistration(client_id, channel, watched)
        reg.task = self._spawn(self._pump(reg))
        self.registrations[client_id] = reg
        return reg

    async def _pump(self, reg: CallbackRegistration) -> None:
        try:
            while True:
                m = await reg.outbox.get()
                await reg.channel.send(m)
        except (XufsError, OSError):
            self._reap(reg)

    def _reap(self, reg: CallbackRegistration) -> None:
        reg.alive = False
        if reg.task is not None and reg.task is not asyncio.current_task():
            reg.task.cancel()
        if self.registrations.get(reg.client_id) is reg:
            del self.registrations[reg.client_id]

    def notify_change(self, path: str, new_version: int, origin: str | None = None) -> None:
        """Queue INVALIDATE for every live registration except ``origin``."""
        for reg in list(self.registrations.values()):
            if reg.client_id == origin:
                continue
            if not reg.alive or reg.channel.closed:
                self._reap(reg)
                continue
            if reg.wants(path):
                reg.outbox.put_nowait(Message(Kind.INVALIDATE, 0, {"path": path, "version": new_version}))

    # -- network --

    async def start(self, transport, addr: str):
        self._listener = await transport.listen(addr, self.serve_connection)
        if self.poll_interval:
            self._spawn(self._poll_loop())
        return self._listener

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.get_running_loop().create_task(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    async def stop(self) -> None:
        if self._listener is not None:
            self._listener.close()
            self._listener = None
        for reg in list(self.registrations.values()):
            reg.close()
        self.registrations.clear()
        for s in list(self._sessions):
            s.conn.close()
        for t in list(self._tasks):
            t.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)
        self.close()

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        self.persist()
        fcntl.flock(self._lock_fd, fcntl.LOCK_UN)
        os.close(self._lock_fd)

    async def serve_connection(self, conn: Connection) -> None:
        session = _Session(conn)
        self._sessions.add(session)
        inflight: set[asyncio.Task] = set()
        try:
            while True:
                m = await conn.recv()
                if m.kind == Kind.FETCH_REQ and session.authenticated:
                    t = asyncio.get_running_loop().create_task(self._respond(session, m))
                    inflight.add(t)
                    t.add_done_callback(inflight.discard)
                else:
                    await self._respond(session, m)
        except XufsError:
            pass
        finally:
            self._sessions.discard(session)
            for t in inflight:
                t.cancel()
            reg = self.registrations.get(session.client_id or "")
            if reg is not None and reg.channel is conn:
                self._reap(reg)
            conn.close()

    async def _respond(self, s: _Session, m: Message) -> None:
        try:
            reply = await self._dispatch(s, m)
        except XufsError as exc:
            reply = error_message(m.request_id, exc)
        except OSError as exc:
            reply = error_message(m.request_id, XufsError(ErrorCode.IO_ERROR, str(exc)))
        if reply is not None:
            try:
                await s.conn.send(reply)
            except XufsError:
                return
            if reply.kind == Kind.ERROR and reply.payload["code"] == ErrorCode.AUTH_FAILED.value:
                s.conn.close()

    async def _dispatch(self, s: _Session, m: Message) -> Message | None:
        p = m.payload
        rid = m.request_id
        if m.kind == Kind.HELLO:
            s.key, s.client_id = p["key"], p["client_id"]
            s.nonce = self._nonce(32)
            s.authenticated = False
            return Message(Kind.CHALLENGE, rid, {"nonce": s.nonce})
        if m.kind == Kind.CHALLENGE_RESPONSE:
            ok = (
                s.nonce is not None
                and s.key == self.credential.key
                and verify_digest(self.credential, s.nonce, p["digest"])
            )
            s.nonce = None
            if not ok:
                raise XufsError(ErrorCode.AUTH_FAILED, "challenge response rejected")
            s.authenticated = True
            return Message(Kind.AUTH_RESULT, rid, {"ok": True, "export_id": self.export_id})
        if not s.authenticated:
            raise XufsError(ErrorCode.ACCESS_DENIED, "not authenticated")
        now = self._now()
        if m.kind == Kind.READDIR_REQ:
            attrs, entries = self.handle_readdir(p["path"])
            return Message(Kind.READDIR_RESP, rid, {
                "path": normalize(p["path"]),
                "attrs": attrs.to_wire(),
                "entries": [e.to_wire() for e in entries],
            })
        if m.kind == Kind.FETCH_REQ:
            plan = StripePlan.from_wire(p["total_length"], p["segments"])
            return await self.handle_fetch(p["path"], plan, s.conn.send, rid)
        if m.kind == Kind.METAOP_BATCH:
            return Message(Kind.METAOP_ACK, rid, {"results": self.apply_metaops(s.client_id, p["ops"])})
        if m.kind == Kind.CALLBACK_REGISTER:
            self.register_callback(s.client_id, s.conn, p.get("watched", ()), s.authenticated)
            return Message(Kind.CALLBACK_ACK, rid, {})
        if m.kind == Kind.LOCK_REQ:
            lease = self.leases.grant(normalize(p["path"]), p["mode"], s.client_id)
            self._persist_leases()
            return Message(Kind.LOCK_RESP, rid, {"lease": lease.to_wire(now)})
        if m.kind == Kind.LEASE_RENEW:
            lease = self.leases.renew(p["lock_id"], s.client_id)
            self._persist_leases()
            return Message(Kind.LEASE_ACK, rid, {"lease": lease.to_wire(now)})
        if m.kind == Kind.UNLOCK:
            self.leases.release(p["lock_id"], s.client_id)
            self._persist_leases()
            return Message(Kind.UNLOCK_ACK, rid, {})
        raise XufsError(ErrorCode.PROTOCOL_ERROR, f"unexpected {m.kind.name}")

    def _persist_leases(self) -> None:
        write_state_file(self._lease_path, self.leases.to_state())

    def tree_digest(self) -> str:
        return tree_digest(self.root)


async def _gather_or_cancel(coros) -> None:
    tasks = [asyncio.get_running_loop().create_task(c) for c in coros]
    if not tasks:
        return
    try:
        await asyncio.gather(*tasks)
    finally:
        for t in tasks:
            if not t.done():
                t.cancel()
        await asyncio.gather(*tasks, return_exceptions=True)


def tree_digest(root: str, skip=(SERVER_STATE_DIR,)) -> str:
    """SHA-256 over every path, kind, permission bits and file content."""
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        rel_dir = os.path.relpath(dirpath, root)
        if rel_dir == ".":
            dirnames[:] = [d for d in dirnames if d not in skip]
        dirnames.sort()
        for name in sorted(dirnames):
            rel = posixpath.normpath(posixpath.join(rel_dir, name))
            st = os.lstat(os.path.join(dirpath, name))
            h.update(f"D {rel} {stat_mod.S_IMODE(st.st_mode):o}\n".encode())
        for name in sorted(filenames):
            rel = posixpath.normpath(posixpath.join(rel_dir, name))
            p = os.path.join(dirpath, name)
            st = os.lstat(p)
            h.update(f"F {rel} {stat_mod.S_IMODE(st.st_mode):o} {st.st_size}\n".encode())
            with open(p, "rb") as f:
                for chunk in iter(lambda: f.read(1 << 20), b""):
                    h.update(chunk)
    return h.hexdigest()
