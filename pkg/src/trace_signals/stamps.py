"""Identifiers and logical stamps, rendered as short strings in traces and CLI I/O."""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import InvalidStamp

_STAMP_RE = re.compile(r"(0|[1-9][0-9]*)@(0|[1-9][0-9]*)")
_ACTION_RE = re.compile(r"(0|[1-9][0-9]*):(0|[1-9][0-9]*)")
_TXN_RE = re.compile(r"(0|[1-9][0-9]*)/(0|[1-9][0-9]*)")


@dataclass(frozen=True, order=True)
class VersionStamp:
    """Totally ordered ``(lamport, replica)`` pair, rendered ``lamport@replica``."""

    lamport: int
    replica: int

    def __str__(self) -> str:
        return f"{self.lamport}@{self.replica}"

    @classmethod
    def parse(cls, text: str) -> VersionStamp:
        match = _STAMP_RE.fullmatch(text) if isinstance(text, str) else None
        if not match:
            raise InvalidStamp(f"expected lamport@replica, got {text!r}")
        return cls(int(match.group(1)), int(match.group(2)))


@dataclass(frozen=True, order=True)
class ActionId:
    replica: int
    seq: int

    def __str__(self) -> str:
        return f"{self.replica}:{self.seq}"

    @classmethod
    def parse(cls, text: str) -> ActionId:
        match = _ACTION_RE.fullmatch(text) if isinstance(text, str) else None
        if not match:
            raise InvalidStamp(f"expected replica:seq action id, got {text!r}")
        return cls(int(match.group(1)), int(match.group(2)))


@dataclass(frozen=True, order=True)
class TxnId:
    replica: int
    seq: int

    def __str__(self) -> str:
        return f"{self.replica}/{self.seq}"

    @classmethod
    def parse(cls, text: str) -> TxnId:
        match = _TXN_RE.fullmatch(text) if isinstance(text, str) else None
        if not match:
            raise InvalidStamp(f"expected replica/seq transaction id, got {text!r}")
        return cls(int(match.group(1)), int(match.group(2)))
