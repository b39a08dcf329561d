"""Millisecond clocks: wall time for services, a settable clock for simulation."""

from __future__ import annotations

import time


class WallClock:
    """Epoch milliseconds from the system clock."""

    def now_ms(self) -> int:
        return int(time.time() * 1000)


class SimClock:
    """Manually advanced epoch-millisecond clock for deterministic runs."""

    def __init__(self, start_ms: int = 0):
        self._now_ms = start_ms

    def now_ms(self) -> int:
        return self._now_ms

    def advance(self, delta_ms: int) -> int:
        if delta_ms < 0:
            raise ValueError("clock cannot move backwards")
        self._now_ms += delta_ms
        return self._now_ms

    def set(self, now_ms: int) -> int:
        if now_ms < self._now_ms:
            raise ValueError("clock cannot move backwards")
        self._now_ms = now_ms
        return self._now_ms
