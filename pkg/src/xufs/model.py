"""Records shared by the client cache and the file server."""

from __future__ import annotations

import enum
import posixpath
import stat as stat_mod
from dataclasses import dataclass, field, replace
from typing import Any

from .errors import ErrorCode, XufsError

SERVER_STATE_DIR = ".xufs-server"
HIDDEN_PREFIX = ".xufs."


class EntryKind(str, enum.Enum):
    FILE = "FILE"
    DIR = "DIR"
    SYMLINK = "SYMLINK"


@dataclass(frozen=True)
class EntryAttributes:
    name: str
    kind: EntryKind
    size: int
    mode: int
    mtime_ns: int
    version: int

    @classmethod
    def from_stat(cls, name: str, st, version: int) -> "EntryAttributes":
        if stat_mod.S_ISDIR(st.st_mode):
            kind = EntryKind.DIR
        elif stat_mod.S_ISLNK(st.st_mode):
            kind = EntryKind.SYMLINK
        else:
            kind = EntryKind.FILE
        size = st.st_size if kind != EntryKind.DIR else 0
        return cls(name, kind, size, stat_mod.S_IMODE(st.st_mode), st.st_mtime_ns, version)

    def to_wire(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "kind": self.kind.value,
            "size": self.size,
            "mode": self.mode,
            "mtime_ns": self.mtime_ns,
            "version": self.version,
        }

    @classmethod
    def from_wire(cls, d: dict[str, Any]) -> "EntryAttributes":
        return cls(d["name"], EntryKind(d["kind"]), d["size"], d["mode"], d["mtime_ns"], d["version"])

    def evolve(self, **changes) -> "EntryAttributes":
        return replace(self, **changes)


class OpKind(str, enum.Enum):
    CREATE = "CREATE"
    UNLINK = "UNLINK"
    MKDIR = "MKDIR"
    RMDIR = "RMDIR"
    RENAME = "RENAME"
    SETATTR = "SETATTR"
    FLUSH_SHADOW = "FLUSH_SHADOW"


@dataclass(frozen=True)
class MetaOp:
    """One queued mutation.

    ``args`` per kind:

    * CREATE, MKDIR: ``mode``
    * RENAME: ``dest``
    * SETATTR: any of ``mode``, ``size``, ``mtime_ns``
    * FLUSH_SHADOW: ``truncate`` (bool), ``base_version`` and either
      ``extents`` as ``[[offset, bytes], ...]`` (wire form) or ``blob`` plus
      ``index`` as ``[[offset, length, blob_pos], ...]`` (queued form,
      bytes stay in a side file until sent)
    """

    op_id: int
    kind: OpKind
    target: str
    args: dict[str, Any] = field(default_factory=dict)
    enqueue_time: float = 0.0

    def to_wire(self) -> dict[str, Any]:
        return {
            "op_id": self.op_id,
            "kind": self.kind.value,
            "target": self.target,
            "args": self.args,
            "enqueue_time": self.enqueue_time,
        }

    @classmethod
    def from_wire(cls, d: dict[str, Any]) -> "MetaOp":
        return cls(d["op_id"], OpKind(d["kind"]), d["target"], d.get("args", {}), d.get("enqueue_time", 0.0))


def normalize(path: str) -> str:
    """Turn an export path into its normalized relative form.

    ``"/a/./b/"`` becomes ``"a/b"`` and the export root is ``""``. Any
    ``..`` component, NUL byte or reference to the server's private state
    directory is refused.
    """
    if "\x00" in path:
        raise XufsError(ErrorCode.ACCESS_DENIED, "NUL in path")
    parts = []
    for p in path.split("/"):
        if p in ("", "."):
            continue
        if p == "..":
            raise XufsError(ErrorCode.ACCESS_DENIED, f"path escapes export: {path!r}")
        parts.append(p)
    if parts and parts[0] == SERVER_STATE_DIR:
        raise XufsError(ErrorCode.ACCESS_DENIED, f"reserved path: {path!r}")
    return "/".join(parts)


def parent_of(rel: str) -> str:
    return posixpath.dirname(rel)


def basename(rel: str) -> str:
    return posixpath.basename(rel)


def join(parent: str, name: str) -> str:
    return f"{parent}/{name}" if parent else name


def is_under(rel: str, prefix: str) -> bool:
    return prefix == "" or rel == prefix or rel.startswith(prefix + "/")
