"""Injectable time sources.

Everything time-dependent (planner cache TTL, batch completion windows,
audit retention, retry backoff, latency measurement) reads time through a
Clock so tests can drive expiry deterministically instead of sleeping.
"""

from __future__ import annotations

import threading
import time
from typing import Protocol, runtime_checkable


@runtime_checkable
class Clock(Protocol):
    def now_s(self) -> float: ...

    def monotonic_ms(self) -> float: ...

    def sleep_ms(self, duration_ms: float) -> None: ...


class SystemClock:
    """Real wall-clock and monotonic time."""

    def now_s(self) -> float:
        return time.time()

    def monotonic_ms(self) -> float:
        return time.monotonic() * 1000.0

    def sleep_ms(self, duration_ms: float) -> None:
        if duration_ms > 0:
            time.sleep(duration_ms / 1000.0)


class ManualClock:
    """Virtual time advanced explicitly.

    sleep_ms advances the clock instead of blocking, which keeps seeded runs
    instant and reproducible. Because concurrent sleepers each advance the
    shared counter, elapsed time across parallel work is sequentialized;
    tests that measure overlap use SystemClock with small real delays.
    """

    def __init__(self, start_s: float = 0.0):
        self._now_s = start_s
        self._lock = threading.Lock()

    def now_s(self) -> float:
        with self._lock:
            return self._now_s

    def monotonic_ms(self) -> float:
        with self._lock:
            return self._now_s * 1000.0

    def sleep_ms(self, duration_ms: float) -> None:
        if duration_ms > 0:
            self.advance_s(duration_ms / 1000.0)

    def advance_s(self, seconds: float) -> None:
        with self._lock:
            self._now_s += seconds

    def advance_days(self, days: float) -> None:
        self.advance_s(days * 86400.0)


SYSTEM_CLOCK = SystemClock()
