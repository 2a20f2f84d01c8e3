"""Injectable time sources.

Every component that looks at the time takes a clock object with a single
``now()`` method returning integer epoch seconds, so tests and scenarios can
drive time explicitly instead of sleeping.
"""

from __future__ import annotations

import threading
import time
from typing import Protocol


class Clock(Protocol):
    def now(self) -> int: ...


class SystemClock:
    def now(self) -> int:
        return int(time.time())


class VirtualClock:
    """A manually advanced clock, safe to share between threads."""

    def __init__(self, start: int = 1_700_000_000):
        self._now = int(start)
        self._lock = threading.Lock()

    def now(self) -> int:
        with self._lock:
            return self._now

    def advance(self, seconds: int) -> int:
        if seconds < 0:
            raise ValueError("virtual time only moves forward")
        with self._lock:
            self._now += int(seconds)
            return self._now

    def set(self, when: int) -> None:
        with self._lock:
            if when < self._now:
                raise ValueError("virtual time only moves forward")
            self._now = int(when)
