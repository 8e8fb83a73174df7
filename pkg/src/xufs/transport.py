"""TCP transport and the request/response channel used by clients.

A connection (simulated or TCP) moves whole :class:`~xufs.wire.Message`
values. :class:`Channel` multiplexes concurrent requests over one
connection by ``request_id`` and routes server pushes (INVALIDATE) to a
callback.
"""

from __future__ import annotations

import asyncio
import logging
from typing import Any, Awaitable, Callable, Protocol

from .errors import ErrorCode, XufsError
from .wire import (
    HEADER_SIZE,
    MAX_FRAME,
    RESPONSE_KIND,
    Kind,
    Message,
    decode_header,
    decode_message,
    encode_message,
    raise_for_error,
)

log = logging.getLogger(__name__)


class Connection(Protocol):
    label: str

    @property
    def closed(self) -> bool: ...

    async def send(self, m: Message) -> None: ...

    async def recv(self) -> Message: ...

    def close(self) -> None: ...


class Transport(Protocol):
    async def connect(self, addr: str) -> Connection: ...

    async def listen(self, addr: str, handler: Callable[[Connection], Awaitable[None]]) -> Any: ...


def split_addr(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"address must be HOST:PORT, got {addr!r}")
    return host, int(port)


class StreamConnection:
    """Framed messages over an asyncio stream pair."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, label: str,
                 max_frame: int = MAX_FRAME):
        self._reader = reader
        self._writer = writer
        self.label = label
        self._max_frame = max_frame
        self._send_lock = asyncio.Lock()
        self._closed = False

    @property
    def closed(self) -> bool:
        return self._closed or self._writer.is_closing()

    async def send(self, m: Message) -> None:
        if self.closed:
            raise XufsError(ErrorCode.DISCONNECTED, "connection closed")
        frame = encode_message(m, self._max_frame)
        async with self._send_lock:
            try:
                self._writer.write(frame)
                await self._writer.drain()
            except (ConnectionError, OSError) as exc:
                self._closed = True
                raise XufsError(ErrorCode.DISCONNECTED, str(exc)) from None

    async def recv(self) -> Message:
        try:
            header = await self._reader.readexactly(HEADER_SIZE)
            _, _, length = decode_header(header, self._max_frame)
            body = await self._reader.readexactly(length)
        except (asyncio.IncompleteReadError, ConnectionError, OSError) as exc:
            self._closed = True
            raise XufsError(ErrorCode.DISCONNECTED, str(exc) or "closed by peer") from None
        return decode_message(header + body, self._max_frame)

    def close(self) -> None:
        self._closed = True
        self._writer.close()


class TcpTransport:
    def __init__(self, label: str = "tcp", max_frame: int = MAX_FRAME):
        self.label = label
        self.max_frame = max_frame
        self._seq = 0

    async def connect(self, addr: str) -> StreamConnection:
        host, port = split_addr(addr)
        try:
            reader, writer = await asyncio.open_connection(host, port, limit=self.max_frame + HEADER_SIZE)
        except OSError as exc:
            raise XufsError(ErrorCode.UNREACHABLE, f"{addr}: {exc}") from None
        self._seq += 1
        return StreamConnection(reader, writer, f"{self.label}#{self._seq}", self.max_frame)

    async def listen(self, addr: str, handler: Callable[[Connection], Awaitable[None]]) -> asyncio.AbstractServer:
        host, port = split_addr(addr)

        async def on_client(reader, writer):
            self._seq += 1
            peer = writer.get_extra_info("peername")
            conn = StreamConnection(reader, writer, f"{peer}#{self._seq}", self.max_frame)
            try:
                await handler(conn)
            finally:
                conn.close()

        return await asyncio.start_server(on_client, host, port, limit=self.max_frame + HEADER_SIZE)


_LOST = object()


class Channel:
    """Client-side request multiplexer over a single connection."""

    def __init__(self, conn: Connection, on_push: Callable[[Message], None] | None = None,
                 on_lost: Callable[[], None] | None = None):
        self.conn = conn
        self._on_push = on_push
        self._on_lost = on_lost
        self._next_id = 1
        self._pending: dict[int, asyncio.Queue] = {}
        self.lost = asyncio.Event()
        self._reader = asyncio.get_running_loop().create_task(self._read_loop())

    @property
    def alive(self) -> bool:
        return not self.lost.is_set()

    async def _read_loop(self) -> None:
        try:
            while True:
                m = await self.conn.recv()
                q = self._pending.get(m.request_id)
                if q is not None:
                    q.put_nowait(m)
                elif self._on_push is not None and m.kind == Kind.INVALIDATE:
                    self._on_push(m)
                else:
                    log.debug("dropping unsolicited %s", m.kind.name)
        except XufsError:
            pass
        except asyncio.CancelledError:
            raise
        finally:
            self.lost.set()
            for q in self._pending.values():
                q.put_nowait(_LOST)
            if self._on_lost is not None:
                self._on_lost()

    def _open(self) -> tuple[int, asyncio.Queue]:
        if not self.alive:
            raise XufsError(ErrorCode.DISCONNECTED, "channel lost")
        rid = self._next_id
        self._next_id += 1
        q: asyncio.Queue = asyncio.Queue()
        self._pending[rid] = q
        return rid, q

    async def call(self, kind: Kind, payload: dict[str, Any],
                   on_partial: Callable[[Message], None] | None = None,
                   complete: Callable[[], bool] | None = None) -> Message:
        """Send a request and wait for its response.

        Messages that are not the final response (FETCH_SEGMENT) are handed
        to ``on_partial`` as they arrive. Stripes travel on independent
        lanes and may trail the final response; with ``complete`` given,
        partials keep being consumed until it returns true.
        """
        rid, q = self._open()
        final = RESPONSE_KIND[kind]
        result: Message | None = None
        try:
            await self.conn.send(Message(kind, rid, payload))
            while result is None or (complete is not None and not complete()):
                m = await q.get()
                if m is _LOST:
                    raise XufsError(ErrorCode.DISCONNECTED, "connection lost during request")
                if m.kind == Kind.ERROR:
                    raise_for_error(m)
                if m.kind == final:
                    result = m
                elif on_partial is not None:
                    on_partial(m)
            return result
        finally:
            self._pending.pop(rid, None)

    def close(self) -> None:
        self.conn.close()
        self._reader.cancel()
