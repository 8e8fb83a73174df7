"""Error codes shared by the client, the server and the wire protocol."""

from __future__ import annotations

import enum


class ErrorCode(str, enum.Enum):
    FRAME_TOO_LARGE = "FRAME_TOO_LARGE"
    INCOMPLETE_TRANSFER = "INCOMPLETE_TRANSFER"
    CREDENTIAL_EXPIRED = "CREDENTIAL_EXPIRED"
    PROTOCOL_ERROR = "PROTOCOL_ERROR"
    AUTH_FAILED = "AUTH_FAILED"
    ACCESS_DENIED = "ACCESS_DENIED"
    NOT_FOUND = "NOT_FOUND"
    NOT_A_DIRECTORY = "NOT_A_DIRECTORY"
    IS_A_DIRECTORY = "IS_A_DIRECTORY"
    EXISTS = "EXISTS"
    NOT_EMPTY = "NOT_EMPTY"
    IO_ERROR = "IO_ERROR"
    SIZE_CHANGED = "SIZE_CHANGED"
    CONFLICT = "CONFLICT"
    EXPIRED = "EXPIRED"
    NOT_OWNER = "NOT_OWNER"
    NOT_MATERIALIZED = "NOT_MATERIALIZED"
    DISCONNECTED = "DISCONNECTED"
    DISCONNECTED_MISS = "DISCONNECTED_MISS"
    UNREACHABLE = "UNREACHABLE"
    BAD_HANDLE = "BAD_HANDLE"


class XufsError(Exception):
    """Failure carrying a protocol error code.

    The same codes travel in ERROR messages, so a server-side failure
    re-raises on the client with an identical ``code``.
    """

    def __init__(self, code: ErrorCode | str, message: str = "", **detail):
        self.code = ErrorCode(code)
        self.message = message
        self.detail = detail
        super().__init__(f"{self.code.value}: {message}" if message else self.code.value)


class SimulatedCrash(BaseException):
    """Raised by crash-injection hooks to abandon a client mid-operation.

    Derives from BaseException so ordinary ``except Exception`` handlers
    cannot swallow it.
    """
