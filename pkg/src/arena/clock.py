"""Injectable clocks and timestamp helpers.

Every deadline, quota and cadence decision in the platform reads time
through a Clock so tests can run on virtual time. All timestamps are
timezone-aware UTC; the official competition time zone is applied only
at day-boundary computations and display.
"""

from __future__ import annotations

import threading
from datetime import datetime, timedelta, timezone
from typing import Protocol


class Clock(Protocol):
    def now(self) -> datetime:
        """Current instant as an aware UTC datetime."""
        ...


class SystemClock:
    def now(self) -> datetime:
        return datetime.now(timezone.utc)


class VirtualClock:
    """Settable clock for tests. Thread-safe."""

    def __init__(self, start: datetime):
        if start.tzinfo is None:
            raise ValueError("VirtualClock requires an aware datetime")
        self._now = start.astimezone(timezone.utc)
        self._lock = threading.Lock()

    def now(self) -> datetime:
        with self._lock:
            return self._now

    def set(self, at: datetime) -> None:
        with self._lock:
            self._now = at.astimezone(timezone.utc)

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._now = self._now + timedelta(seconds=seconds)


def parse_rfc3339(text: str) -> datetime:
    """Parse an RFC 3339 timestamp into an aware UTC datetime.

    Python 3.10's fromisoformat does not accept a trailing 'Z'.
    """
    if not isinstance(text, str):
        raise ValueError(f"expected timestamp string, got {type(text).__name__}")
    normalized = text.strip()
    if normalized.endswith(("Z", "z")):
        normalized = normalized[:-1] + "+00:00"
    try:
        parsed = datetime.fromisoformat(normalized)
    except ValueError as exc:
        raise ValueError(f"invalid RFC 3339 timestamp: {text!r}") from exc
    if parsed.tzinfo is None:
        raise ValueError(f"timestamp must carry a UTC offset: {text!r}")
    return parsed.astimezone(timezone.utc)


def format_rfc3339(at: datetime) -> str:
    """Render an aware datetime as RFC 3339 in UTC with a 'Z' suffix."""
    if at.tzinfo is None:
        raise ValueError("naive datetime")
    utc = at.astimezone(timezone.utc)
    if utc.microsecond:
        return utc.strftime("%Y-%m-%dT%H:%M:%S.%f") + "Z"
    return utc.strftime("%Y-%m-%dT%H:%M:%SZ")
