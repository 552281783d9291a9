"""Clocks for the scheduler; the scaled one lets simulations run minutes of schedule in seconds."""

from __future__ import annotations

import asyncio
import time


class WallClock:
    def now(self) -> float:
        return time.time()

    async def sleep(self, seconds: float) -> None:
        await asyncio.sleep(seconds)


class ScaledClock:
    """Simulated seconds pass ``speed`` times faster than real ones."""

    def __init__(self, speed: float = 100.0, start: float = 0.0):
        if speed <= 0:
            raise ValueError("speed must be positive")
        self.speed = speed
        self._start = start
        self._t0 = time.monotonic()

    def now(self) -> float:
        return self._start + (time.monotonic() - self._t0) * self.speed

    async def sleep(self, seconds: float) -> None:
        await asyncio.sleep(max(0.0, seconds) / self.speed)
