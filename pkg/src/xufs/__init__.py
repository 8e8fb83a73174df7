"""Whole-file caching client and personal file server for wide-area home spaces."""

from .errors import ErrorCode, SimulatedCrash, XufsError
from .model import EntryAttributes, EntryKind, MetaOp, OpKind
from .wire import AuthCredential, Kind, Message, plan_stripes

__all__ = [
    "AuthCredential",
    "EntryAttributes",
    "EntryKind",
    "ErrorCode",
    "Kind",
    "Message",
    "MetaOp",
    "OpKind",
    "SimulatedCrash",
    "XufsError",
    "plan_stripes",
]
__version__ = "0.1.0"
