"""Sliding-window splitter for long sessions."""

from __future__ import annotations

from dataclasses import dataclass, replace

from .errors import PreconditionError
from .ingest import Session

LONG_SESSION_MIN = 5
WINDOW = 3


@dataclass(frozen=True)
class WindowSet:
    source: Session
    windows: tuple[Session, ...]

    def __len__(self) -> int:
        return len(self.windows)


def is_long(session: Session, threshold: int = LONG_SESSION_MIN) -> bool:
    return len(session.items) >= threshold


def window_items(items, window: int = WINDOW) -> list[tuple]:
    """Stride-1 windows of length ``window``; no windows when ``items`` is shorter."""
    items = tuple(items)
    return [items[k:k + window] for k in range(len(items) - window + 1)]


def split_long_session(session: Session, window: int = WINDOW, threshold: int = LONG_SESSION_MIN,
                       check: bool = True) -> WindowSet:
    """Windows ``items[k:k+window]`` for every start ``k``; each keeps the source's user and ordinal.

    ``check=False`` skips the long-session precondition (used only to probe
    degenerate widths).
    """
    if check and not is_long(session, threshold):
        raise PreconditionError(f"session of length {len(session.items)} is not long (needs >= {threshold})")
    if window < 1 or window > len(session.items):
        raise PreconditionError(f"window {window} does not fit a session of length {len(session.items)}")
    windows = tuple(replace(session, items=w) for w in window_items(session.items, window))
    return WindowSet(session, windows)
