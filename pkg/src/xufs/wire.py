"""Message framing, stripe planning and challenge-response authentication.

Frame layout (all integers big-endian)::

    version     1 byte   (currently 1)
    kind        1 byte   (Kind value)
    request_id  8 bytes
    payload_len 4 bytes
    payload     payload_len bytes, a msgpack map

Everything here is a pure function over values.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import struct
import time
from dataclasses import dataclass, field
from typing import Any, Iterable

import msgpack

from .errors import ErrorCode, XufsError

WIRE_VERSION = 1
HEADER = struct.Struct(">BBQI")
HEADER_SIZE = HEADER.size
MAX_FRAME = 16 * 1024 * 1024

STRIPE_MAX_STREAMS = 12
STRIPE_MIN_BLOCK = 64 * 1024

DIGEST_SIZE = 32
MIN_NONCE = 16


class Kind(enum.IntEnum):
    HELLO = 1
    CHALLENGE = 2
    CHALLENGE_RESPONSE = 3
    AUTH_RESULT = 4
    READDIR_REQ = 5
    READDIR_RESP = 6
    FETCH_REQ = 7
    FETCH_SEGMENT = 8
    FETCH_DONE = 9
    METAOP_BATCH = 10
    METAOP_ACK = 11
    CALLBACK_REGISTER = 12
    CALLBACK_ACK = 13
    INVALIDATE = 14
    LOCK_REQ = 15
    LOCK_RESP = 16
    LEASE_RENEW = 17
    LEASE_ACK = 18
    UNLOCK = 19
    UNLOCK_ACK = 20
    ERROR = 21


# request kind -> its single response kind (ERROR may answer any request)
RESPONSE_KIND = {
    Kind.HELLO: Kind.CHALLENGE,
    Kind.CHALLENGE_RESPONSE: Kind.AUTH_RESULT,
    Kind.READDIR_REQ: Kind.READDIR_RESP,
    Kind.FETCH_REQ: Kind.FETCH_DONE,
    Kind.METAOP_BATCH: Kind.METAOP_ACK,
    Kind.CALLBACK_REGISTER: Kind.CALLBACK_ACK,
    Kind.LOCK_REQ: Kind.LOCK_RESP,
    Kind.LEASE_RENEW: Kind.LEASE_ACK,
    Kind.UNLOCK: Kind.UNLOCK_ACK,
}

# payload keys every message of a kind must carry
REQUIRED_FIELDS: dict[Kind, tuple[str, ...]] = {
    Kind.HELLO: ("key", "client_id"),
    Kind.CHALLENGE: ("nonce",),
    Kind.CHALLENGE_RESPONSE: ("digest",),
    Kind.AUTH_RESULT: ("ok", "export_id"),
    Kind.READDIR_REQ: ("path",),
    Kind.READDIR_RESP: ("path", "attrs", "entries"),
    Kind.FETCH_REQ: ("path", "total_length", "segments"),
    Kind.FETCH_SEGMENT: ("stream", "offset", "data"),
    Kind.FETCH_DONE: ("path", "version", "size"),
    Kind.METAOP_BATCH: ("ops",),
    Kind.METAOP_ACK: ("results",),
    Kind.CALLBACK_REGISTER: ("watched",),
    Kind.CALLBACK_ACK: (),
    Kind.INVALIDATE: ("path", "version"),
    Kind.LOCK_REQ: ("path", "mode"),
    Kind.LOCK_RESP: ("lease",),
    Kind.LEASE_RENEW: ("lock_id",),
    Kind.LEASE_ACK: ("lease",),
    Kind.UNLOCK: ("lock_id",),
    Kind.UNLOCK_ACK: (),
    Kind.ERROR: ("code", "message"),
}


@dataclass(frozen=True)
class Message:
    kind: Kind
    request_id: int
    payload: dict[str, Any] = field(default_factory=dict)

    @property
    def stream(self) -> int:
        """Logical stream the message travels on (stripe index for data)."""
        if self.kind == Kind.FETCH_SEGMENT:
            return int(self.payload["stream"])
        return 0

    def summary(self) -> dict[str, Any]:
        """Small, byte-free description used in transcripts."""
        out: dict[str, Any] = {"kind": self.kind.name, "request_id": self.request_id}
        p = self.payload
        if "path" in p:
            out["path"] = p["path"]
        if self.kind == Kind.FETCH_SEGMENT:
            out["stream"] = p["stream"]
            out["offset"] = p["offset"]
            out["length"] = len(p["data"])
        elif self.kind == Kind.METAOP_BATCH:
            out["ops"] = [[op["op_id"], op["kind"], op["target"]] for op in p["ops"]]
        elif self.kind == Kind.ERROR:
            out["code"] = p["code"]
        elif self.kind in (Kind.LOCK_RESP, Kind.LEASE_ACK):
            out["path"] = p["lease"].get("path")
        elif self.kind == Kind.INVALIDATE:
            out["version"] = p["version"]
        return out


def check_well_formed(m: Message) -> None:
    if not isinstance(m.kind, Kind):
        raise XufsError(ErrorCode.PROTOCOL_ERROR, f"unknown kind {m.kind!r}")
    if not 0 <= m.request_id < 2**64:
        raise XufsError(ErrorCode.PROTOCOL_ERROR, f"request_id out of range: {m.request_id}")
    if not isinstance(m.payload, dict):
        raise XufsError(ErrorCode.PROTOCOL_ERROR, "payload must be a map")
    missing = [k for k in REQUIRED_FIELDS[m.kind] if k not in m.payload]
    if missing:
        raise XufsError(ErrorCode.PROTOCOL_ERROR, f"{m.kind.name} missing {missing}")


def encode_message(m: Message, max_frame: int = MAX_FRAME) -> bytes:
    check_well_formed(m)
    body = msgpack.packb(m.payload, use_bin_type=True)
    if len(body) > max_frame:
        raise XufsError(ErrorCode.FRAME_TOO_LARGE, f"{len(body)} > {max_frame}")
    return HEADER.pack(WIRE_VERSION, int(m.kind), m.request_id, len(body)) + body


def decode_header(header: bytes, max_frame: int = MAX_FRAME) -> tuple[Kind, int, int]:
    """Parse a frame header into ``(kind, request_id, payload_len)``."""
    if len(header) < HEADER_SIZE:
        raise XufsError(ErrorCode.PROTOCOL_ERROR, "short header")
    version, kind, request_id, length = HEADER.unpack_from(header)
    if version != WIRE_VERSION:
        raise XufsError(ErrorCode.PROTOCOL_ERROR, f"unsupported wire version {version}")
    if length > max_frame:
        raise XufsError(ErrorCode.FRAME_TOO_LARGE, f"{length} > {max_frame}")
    try:
        return Kind(kind), request_id, length
    except ValueError:
        raise XufsError(ErrorCode.PROTOCOL_ERROR, f"unknown kind {kind}") from None


def decode_message(frame: bytes, max_frame: int = MAX_FRAME) -> Message:
    kind, request_id, length = decode_header(frame, max_frame)
    body = memoryview(frame)[HEADER_SIZE:]
    if len(body) != length:
        raise XufsError(ErrorCode.PROTOCOL_ERROR, f"payload length {len(body)} != {length}")
    try:
        payload = msgpack.unpackb(body, raw=False)
    except Exception as exc:
        raise XufsError(ErrorCode.PROTOCOL_ERROR, f"bad payload: {exc}") from None
    m = Message(kind, request_id, payload)
    check_well_formed(m)
    return m


def error_message(request_id: int, exc: XufsError) -> Message:
    payload: dict[str, Any] = {"code": exc.code.value, "message": exc.message}
    if exc.detail:
        payload["detail"] = exc.detail
    return Message(Kind.ERROR, request_id, payload)


def raise_for_error(m: Message) -> Message:
    if m.kind == Kind.ERROR:
        raise XufsError(m.payload["code"], m.payload["message"], **m.payload.get("detail", {}))
    return m


# -- striping ---------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    stream_index: int
    offset: int
    length: int

    @property
    def end(self) -> int:
        return self.offset + self.length


@dataclass(frozen=True)
class StripePlan:
    total_length: int
    segments: tuple[Segment, ...]

    def to_wire(self) -> list[list[int]]:
        return [[s.stream_index, s.offset, s.length] for s in self.segments]

    @classmethod
    def from_wire(cls, total_length: int, segments: Iterable[Iterable[int]]) -> "StripePlan":
        return cls(total_length, tuple(Segment(*map(int, s)) for s in segments))


def plan_stripes(
    total_length: int,
    max_streams: int = STRIPE_MAX_STREAMS,
    min_block: int = STRIPE_MIN_BLOCK,
) -> StripePlan:
    """Split a transfer into balanced contiguous segments.

    The count is ``max(1, min(max_streams, total_length // min_block))`` and
    the remainder is spread one byte at a time over the leading segments,
    so every segment of a striped transfer is at least ``min_block`` long.
    """
    if total_length < 0:
        raise ValueError("total_length must be >= 0")
    if max_streams < 1 or min_block < 1:
        raise ValueError("max_streams and min_block must be positive")
    count = max(1, min(max_streams, total_length // min_block))
    base, extra = divmod(total_length, count)
    segments = []
    offset = 0
    for i in range(count):
        length = base + (1 if i < extra else 0)
        segments.append(Segment(i, offset, length))
        offset += length
    return StripePlan(total_length, tuple(segments))


class Reassembler:
    """Tracks which byte ranges of a transfer have arrived.

    Used by the client to write stripe data straight to disk while still
    detecting gaps and overlaps.
    """

    def __init__(self, total_length: int):
        self.total_length = total_length
        self._ranges: list[tuple[int, int]] = []

    def add(self, offset: int, length: int) -> None:
        end = offset + length
        if offset < 0 or end > self.total_length:
            raise XufsError(ErrorCode.INCOMPLETE_TRANSFER, f"segment [{offset},{end}) outside transfer")
        if length == 0:
            return
        for lo, hi in self._ranges:
            if offset < hi and lo < end:
                raise XufsError(ErrorCode.INCOMPLETE_TRANSFER, f"overlap at [{offset},{end})")
        self._ranges.append((offset, end))

    @property
    def received(self) -> int:
        return sum(hi - lo for lo, hi in self._ranges)

    @property
    def complete(self) -> bool:
        return self.received == self.total_length

    def check_complete(self) -> None:
        if not self.complete:
            raise XufsError(
                ErrorCode.INCOMPLETE_TRANSFER,
                f"received {self.received} of {self.total_length} bytes",
            )


def reassemble(segments: Iterable[tuple[int, bytes]], total_length: int) -> bytes:
    tracker = Reassembler(total_length)
    out = bytearray(total_length)
    for offset, data in segments:
        tracker.add(offset, len(data))
        out[offset : offset + len(data)] = data
    tracker.check_complete()
    return bytes(out)


# -- authentication ---------------------------------------------------------


@dataclass(frozen=True)
class AuthCredential:
    key: str
    phrase: bytes = field(repr=False)
    expiry: float

    def expired(self, now: float | None = None) -> bool:
        return (time.time() if now is None else now) >= self.expiry


def challenge_digest(cred: AuthCredential, nonce: bytes, now: float | None = None) -> bytes:
    """HMAC-SHA256 of ``nonce ++ key`` keyed by the secret phrase."""
    if len(nonce) < MIN_NONCE:
        raise ValueError(f"nonce must be at least {MIN_NONCE} bytes")
    if cred.expired(now):
        raise XufsError(ErrorCode.CREDENTIAL_EXPIRED, f"credential {cred.key} expired")
    return hmac.new(cred.phrase, nonce + cred.key.encode(), hashlib.sha256).digest()


def verify_digest(cred: AuthCredential, nonce: bytes, digest: bytes, now: float | None = None) -> bool:
    try:
        expected = challenge_digest(cred, nonce, now)
    except XufsError:
        return False
    return hmac.compare_digest(expected, digest)
