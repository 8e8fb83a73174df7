"""Deterministic WAN simulator.

Client and server code talk to a :class:`SimTransport` through the same
``connect``/``listen`` interface as :class:`xufs.transport.TcpTransport`.
Timing comes from the running event loop, so under a
:class:`VirtualClockLoop` a 5 second transfer completes instantly in wall
time and identical schedules yield identical transcripts.

Link model, per direction of each connection:

* a frame of N bytes occupies its lane for ``N / bandwidth`` seconds and
  arrives ``one_way_latency`` after leaving it;
* with ``per_stream=False`` all streams share lane 0, otherwise each
  stripe stream index gets its own lane;
* ``send`` returns once the frame has left the lane (sender backpressure);
* a partition (or an explicit drop) tears down every affected connection,
  discarding frames still in flight.
"""

from __future__ import annotations

import asyncio
import collections
import json
import random
import selectors
from dataclasses import asdict, dataclass, field
from typing import Any, Awaitable, Callable, Coroutine, Iterable, TypeVar

from .errors import ErrorCode, XufsError
from .wire import Message, decode_message, encode_message

T = TypeVar("T")


# -- virtual clock ----------------------------------------------------------


class SimulationDeadlock(RuntimeError):
    pass


class _VirtualSelector(selectors.BaseSelector):
    # Real fds (the loop's self-pipe) are still polled, but never waited on.

    def __init__(self, loop: "VirtualClockLoop"):
        self._loop = loop
        self._real = selectors.DefaultSelector()

    def register(self, fileobj, events, data=None):
        return self._real.register(fileobj, events, data)

    def unregister(self, fileobj):
        return self._real.unregister(fileobj)

    def modify(self, fileobj, events, data=None):
        return self._real.modify(fileobj, events, data)

    def get_map(self):
        return self._real.get_map()

    def close(self):
        self._real.close()

    def select(self, timeout=None):
        events = self._real.select(0)
        if events:
            return events
        if timeout is None:
            raise SimulationDeadlock("no runnable task and no pending timer")
        if timeout > 0:
            self._loop._now += timeout
        return []


class VirtualClockLoop(asyncio.SelectorEventLoop):
    """Event loop whose clock jumps straight to the next timer."""

    def __init__(self, start: float = 0.0):
        self._now = start
        super().__init__(selector=_VirtualSelector(self))

    def time(self) -> float:
        return self._now


def run(main: Coroutine[Any, Any, T], *, virtual: bool = True) -> T:
    """Like :func:`asyncio.run`, optionally on a virtual clock."""
    loop = VirtualClockLoop() if virtual else asyncio.new_event_loop()
    try:
        asyncio.set_event_loop(loop)
        return loop.run_until_complete(main)
    finally:
        try:
            pending = [t for t in asyncio.all_tasks(loop) if not t.done()]
            for t in pending:
                t.cancel()
            if pending:
                loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
            loop.run_until_complete(loop.shutdown_asyncgens())
        finally:
            asyncio.set_event_loop(None)
            loop.close()


# -- profile and transcript -------------------------------------------------


@dataclass
class LinkProfile:
    one_way_latency: float = 0.0  # seconds
    bandwidth: float = 0.0  # bytes per second, 0 = unlimited
    partitioned: bool = False
    per_stream: bool = False
    partition_windows: list[tuple[float, float]] = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "LinkProfile":
        return cls(
            one_way_latency=float(d.get("latency_ms", 0)) / 1000.0,
            bandwidth=float(d.get("bandwidth_bps", 0)),
            per_stream=bool(d.get("per_stream", False)),
            partition_windows=[(float(a), float(b)) for a, b in d.get("partitions", [])],
        )

    @classmethod
    def from_json(cls, path: str) -> "LinkProfile":
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict[str, Any]:
        return {
            "latency_ms": self.one_way_latency * 1000.0,
            "bandwidth_bps": self.bandwidth,
            "per_stream": self.per_stream,
            "partitions": [list(w) for w in self.partition_windows],
        }


@dataclass(frozen=True)
class TranscriptEvent:
    seq: int
    t: float
    event: str  # send | deliver | drop | connect | refuse | lost
    conn: str
    direction: str  # c2s | s2c | ""
    nbytes: int
    stream: int
    summary: dict[str, Any]

    @property
    def kind(self) -> str | None:
        return self.summary.get("kind")

    @property
    def path(self) -> str | None:
        return self.summary.get("path")


class Transcript:
    """Append-only record of everything the simulated network carried."""

    def __init__(self):
        self.events: list[TranscriptEvent] = []

    def record(self, t, event, conn, direction="", nbytes=0, stream=0, summary=None):
        self.events.append(
            TranscriptEvent(len(self.events), t, event, conn, direction, nbytes, stream, summary or {})
        )

    def __len__(self) -> int:
        return len(self.events)

    def mark(self) -> int:
        return len(self.events)

    def query(self, predicate: Callable[[TranscriptEvent], bool] | None = None, *, since: int = 0,
              event: str | None = "send", kind: str | Iterable[str] | None = None,
              path: str | None = None, under: str | None = None, conn: str | None = None,
              ) -> list[TranscriptEvent]:
        kinds = {kind} if isinstance(kind, str) else (set(kind) if kind is not None else None)
        out = []
        for e in self.events[since:]:
            if event is not None and e.event != event:
                continue
            if kinds is not None and e.kind not in kinds:
                continue
            if path is not None and e.path != path:
                continue
            if under is not None and not _path_under(e, under):
                continue
            if conn is not None and not e.conn.startswith(conn):
                continue
            if predicate is not None and not predicate(e):
                continue
            out.append(e)
        return out

    def count(self, **kw) -> int:
        return len(self.query(**kw))

    def fetch_intervals(self, since: int = 0) -> list[tuple[float, float, str, int]]:
        """(start, end, conn, request_id) for every completed FETCH exchange."""
        starts: dict[tuple[str, int], float] = {}
        out = []
        for e in self.events[since:]:
            key = (e.conn, e.summary.get("request_id", -1))
            if e.event == "send" and e.kind == "FETCH_REQ":
                starts[key] = e.t
            elif e.event == "deliver" and e.kind in ("FETCH_DONE", "ERROR") and key in starts:
                out.append((starts.pop(key), e.t, key[0], key[1]))
        return out

    def peak_fetch_concurrency(self, since: int = 0) -> int:
        edges = []
        for start, end, _, _ in self.fetch_intervals(since):
            edges.append((start, 1))
            edges.append((end, -1))
        # at equal timestamps an ending fetch does not overlap a starting one
        edges.sort(key=lambda x: (x[0], x[1]))
        peak = cur = 0
        for _, d in edges:
            cur += d
            peak = max(peak, cur)
        return peak

    def streams_for_fetch(self, path: str, since: int = 0) -> list[set[int]]:
        """Distinct stream indices used by each FETCH of ``path``."""
        ids = [(e.conn, e.summary["request_id"]) for e in self.query(since=since, kind="FETCH_REQ", path=path)]
        out = []
        for conn, rid in ids:
            out.append({
                e.stream for e in self.events[since:]
                if e.event == "send" and e.kind == "FETCH_SEGMENT" and e.conn == conn
                and e.summary["request_id"] == rid
            })
        return out

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.events)

    def dump(self, path: str) -> None:
        with open(path, "w") as f:
            f.write(self.to_jsonl())


def _path_under(e: TranscriptEvent, prefix: str) -> bool:
    prefix = prefix.strip("/")
    paths = []
    if e.path is not None:
        paths.append(e.path)
    for op in e.summary.get("ops", ()):
        paths.append(op[2])
    for p in paths:
        p = p.strip("/")
        if p == prefix or p.startswith(prefix + "/"):
            return True
    return False


# -- simulated connections --------------------------------------------------

_EOF = object()
_LOST = object()


class _Lane:
    __slots__ = ("free_at", "frames", "timer")

    def __init__(self):
        self.free_at = 0.0
        self.frames: collections.deque = collections.deque()
        self.timer: asyncio.TimerHandle | None = None


class SimConnection:
    """One end of a simulated full-duplex message channel."""

    def __init__(self, link: "_Link", side: str):
        self._link = link
        self._side = side  # "c" or "s"
        self.label = link.label
        self._inbox: asyncio.Queue = asyncio.Queue()
        self._lanes: dict[int, _Lane] = {}
        self._closed = False
        self._lost = False

    @property
    def peer(self) -> "SimConnection":
        return self._link.server if self._side == "c" else self._link.client

    @property
    def direction(self) -> str:
        return "c2s" if self._side == "c" else "s2c"

    @property
    def closed(self) -> bool:
        return self._closed or self._lost

    def _lane(self, stream: int) -> _Lane:
        key = stream if self._link.profile.per_stream else 0
        lane = self._lanes.get(key)
        if lane is None:
            lane = self._lanes[key] = _Lane()
        return lane

    async def send(self, m: Message) -> None:
        if self.closed:
            raise XufsError(ErrorCode.DISCONNECTED, "connection closed")
        frame = encode_message(m)
        net = self._link.net
        loop = asyncio.get_running_loop()
        now = loop.time()
        profile = self._link.profile
        lane = self._lane(m.stream)
        start = max(now, lane.free_at)
        tx = len(frame) / profile.bandwidth if profile.bandwidth > 0 else 0.0
        lane.free_at = start + tx
        deliver_at = lane.free_at + profile.one_way_latency
        summary = m.summary()
        net.transcript.record(now, "send", self.label, self.direction, len(frame), m.stream, summary)
        net.bytes_sent += len(frame)
        lane.frames.append((deliver_at, frame, summary, m.stream))
        self._arm(lane)
        if lane.free_at > now:
            await asyncio.sleep(lane.free_at - now)
        if self._lost:
            raise XufsError(ErrorCode.DISCONNECTED, "connection lost")

    def _arm(self, lane: _Lane) -> None:
        if lane.timer is None and lane.frames:
            loop = asyncio.get_running_loop()
            lane.timer = loop.call_at(lane.frames[0][0], self._pump, lane)

    def _pump(self, lane: _Lane) -> None:
        lane.timer = None
        loop = asyncio.get_running_loop()
        now = loop.time()
        net = self._link.net
        peer = self.peer
        while lane.frames and lane.frames[0][0] <= now + 1e-12:
            _, frame, summary, stream = lane.frames.popleft()
            if frame is _EOF:
                peer._inbox.put_nowait(_EOF)
                continue
            if peer._closed:
                net.bytes_dropped += len(frame)
                net.transcript.record(now, "drop", self.label, self.direction, len(frame), stream, summary)
                continue
            net.bytes_delivered += len(frame)
            net.transcript.record(now, "deliver", self.label, self.direction, len(frame), stream, summary)
            peer._inbox.put_nowait(decode_message(frame))
        self._arm(lane)

    async def recv(self) -> Message:
        if self._lost or self._closed:
            raise XufsError(ErrorCode.DISCONNECTED, "connection closed")
        item = await self._inbox.get()
        if item is _LOST:
            raise XufsError(ErrorCode.DISCONNECTED, "connection lost")
        if item is _EOF:
            self._lost = True
            raise XufsError(ErrorCode.DISCONNECTED, "closed by peer")
        return item

    def close(self) -> None:
        if self.closed:
            return
        self._closed = True
        loop = asyncio.get_running_loop()
        lane0 = self._lane(0)
        last = max([f[0] for ln in self._lanes.values() for f in ln.frames], default=0.0)
        at = max(last, loop.time() + self._link.profile.one_way_latency,
                 lane0.frames[-1][0] if lane0.frames else 0.0)
        lane0.frames.append((at, _EOF, None, 0))
        self._arm(lane0)
        self._inbox.put_nowait(_LOST)
        if self.peer.closed:
            self._link.net._links.discard(self._link)

    def _break(self) -> None:
        net = self._link.net
        now = asyncio.get_running_loop().time()
        for lane in self._lanes.values():
            if lane.timer is not None:
                lane.timer.cancel()
                lane.timer = None
            while lane.frames:
                _, frame, summary, stream = lane.frames.popleft()
                if frame is _EOF:
                    continue
                net.bytes_dropped += len(frame)
                net.transcript.record(now, "drop", self.label, self.direction, len(frame), stream, summary)
        if not self._lost:
            self._lost = True
            self._inbox.put_nowait(_LOST)


class _Link:
    def __init__(self, net: "SimNetwork", label: str, profile: LinkProfile):
        self.net = net
        self.label = label
        self.profile = profile
        self.client = SimConnection(self, "c")
        self.server = SimConnection(self, "s")

    def tear_down(self) -> None:
        self.client._break()
        self.server._break()
        self.net._links.discard(self)


class SimListener:
    def __init__(self, net: "SimNetwork", addr: str):
        self._net = net
        self.addr = addr

    def close(self) -> None:
        self._net._listeners.pop(self.addr, None)


class SimNetwork:
    """A set of simulated links sharing one transcript and one partition state."""

    def __init__(self, profile: LinkProfile | None = None, seed: int = 0):
        self.profile = profile or LinkProfile()
        self.rng = random.Random(seed)
        self.transcript = Transcript()
        self._listeners: dict[str, Callable[[SimConnection], Awaitable[None]]] = {}
        self._links: set[_Link] = set()
        self._partitioned: set[str] = set()  # labels; "*" = everyone
        self._conn_seq = collections.Counter()
        self._tasks: list[asyncio.Task] = []
        self.bytes_sent = 0
        self.bytes_delivered = 0
        self.bytes_dropped = 0
        self._windows_armed = False

    def transport(self, label: str, profile: LinkProfile | None = None) -> "SimTransport":
        return SimTransport(self, label, profile)

    def now(self) -> float:
        return asyncio.get_running_loop().time()

    def is_partitioned(self, label: str) -> bool:
        return "*" in self._partitioned or label in self._partitioned

    def set_partition(self, on: bool, label: str | None = None) -> None:
        """Partition (or heal) everyone, or only the links of ``label``."""
        key = label or "*"
        if on:
            self._partitioned.add(key)
            loop = asyncio.get_running_loop()
            for link in sorted(self._links, key=lambda ln: ln.label):
                if key == "*" or link.label.split("#")[0] == key:
                    self.transcript.record(loop.time(), "lost", link.label)
                    link.tear_down()
        else:
            self._partitioned.discard(key)

    def drop_connections(self, label: str | None = None) -> None:
        """Reset connections without blocking new ones."""
        loop = asyncio.get_running_loop()
        for link in sorted(self._links, key=lambda ln: ln.label):
            if label is None or link.label.split("#")[0] == label:
                self.transcript.record(loop.time(), "lost", link.label)
                link.tear_down()

    def schedule_partitions(self, windows: Iterable[tuple[float, float]], label: str | None = None) -> None:
        loop = asyncio.get_running_loop()
        for start, end in windows:
            loop.call_at(start, self.set_partition, True, label)
            loop.call_at(end, self.set_partition, False, label)

    def arm_profile_schedule(self) -> None:
        if not self._windows_armed and self.profile.partition_windows:
            self._windows_armed = True
            self.schedule_partitions(self.profile.partition_windows)

    async def _connect(self, label: str, addr: str, profile: LinkProfile) -> SimConnection:
        self.arm_profile_schedule()
        loop = asyncio.get_running_loop()
        handler = self._listeners.get(addr)
        if handler is None or self.is_partitioned(label):
            self.transcript.record(loop.time(), "refuse", label)
            raise XufsError(ErrorCode.UNREACHABLE, f"cannot reach {addr}")
        self._conn_seq[label] += 1
        link = _Link(self, f"{label}#{self._conn_seq[label]}", profile)
        self._links.add(link)
        self.transcript.record(loop.time(), "connect", link.label)
        # SYN reaches the server after one latency, SYN-ACK returns after another
        await asyncio.sleep(profile.one_way_latency)
        if link.client.closed or self._listeners.get(addr) is None:
            link.tear_down()
            raise XufsError(ErrorCode.UNREACHABLE, f"connection to {addr} failed")
        task = loop.create_task(handler(link.server))
        self._tasks.append(task)
        await asyncio.sleep(profile.one_way_latency)
        if link.client.closed:
            raise XufsError(ErrorCode.UNREACHABLE, f"connection to {addr} failed")
        return link.client


class SimTransport:
    """Per-endpoint view of a :class:`SimNetwork`."""

    def __init__(self, net: SimNetwork, label: str, profile: LinkProfile | None = None):
        self.net = net
        self.label = label
        self.profile = profile

    async def connect(self, addr: str) -> SimConnection:
        return await self.net._connect(self.label, addr, self.profile or self.net.profile)

    async def listen(self, addr: str, handler: Callable[[SimConnection], Awaitable[None]]) -> SimListener:
        self.net._listeners[addr] = handler
        return SimListener(self.net, addr)
