"""Deterministic discrete-event scheduling for the simulated instrument.

All simulated components (boards, wire deliveries, host timeouts) advance on
one integer-microsecond clock via a single event heap.  Ties are broken by
insertion order, so a run is reproducible bit-for-bit regardless of how many
boards share an instant.
"""

from __future__ import annotations

import heapq
from typing import Callable


class Scheduler:
    """Single-threaded event loop over integer-microsecond simulated time."""

    def __init__(self, start_us: int = 0):
        self.now_us = start_us
        self._heap: list[tuple[int, int, Callable[[], None]]] = []
        self._order = 0

    def call_at(self, t_us: int, fn: Callable[[], None]) -> None:
        if t_us < self.now_us:
            t_us = self.now_us
        heapq.heappush(self._heap, (int(t_us), self._order, fn))
        self._order += 1

    def call_after(self, delay_us: int, fn: Callable[[], None]) -> None:
        self.call_at(self.now_us + int(delay_us), fn)

    def run_until(self, t_us: int) -> None:
        """Run every event scheduled at or before ``t_us``; clock ends there."""
        while self._heap and self._heap[0][0] <= t_us:
            when, _, fn = heapq.heappop(self._heap)
            self.now_us = when
            fn()
        if t_us > self.now_us:
            self.now_us = t_us

    def run_for(self, duration_us: int) -> None:
        self.run_until(self.now_us + int(duration_us))

    @property
    def idle(self) -> bool:
        return not self._heap


class Fixture:
    """Scripted calibration jig: holds chosen keys at exact displacements.

    In a live installation a human holds the key; in simulation the fixture
    overrides the performance world so CI can exercise the full capture path.
    """

    def __init__(self):
        self._held: dict = {}
        self._held_all: float | None = None

    def hold(self, key, displacement_mm: float) -> None:
        self._held[key] = float(displacement_mm)

    def hold_all(self, displacement_mm: float) -> None:
        self._held_all = float(displacement_mm)

    def release(self, key=None) -> None:
        if key is None:
            self._held.clear()
            self._held_all = None
        else:
            self._held.pop(key, None)

    def displacement_for(self, key) -> float | None:
        if key in self._held:
            return self._held[key]
        return self._held_all


class World:
    """Displacement oracle: sensor id -> key lever position at a time.

    Combines the scripted performance (if any) with fixture overrides.  The
    fixture wins: a held key ignores the performance.
    """

    def __init__(self, key_for_sensor: dict[int, tuple[int, int]],
                 performance=None, fixture: Fixture | None = None):
        self.key_for_sensor = dict(key_for_sensor)
        self.performance = performance
        self.performance_t0_s = 0.0  # session instant at which the score starts
        self.fixture = fixture or Fixture()
        self._injected: dict = {}

    def inject_motion(self, key, motion, start_s: float) -> None:
        """Play a one-shot keystroke on top of the scripted world."""
        motions = [
            (s, m) for s, m in self._injected.get(key, [])
            if s + m.end_s > start_s
        ]
        motions.append((start_s, motion))
        self._injected[key] = motions

    def displacement(self, sensor_id: int, t_us: int) -> float:
        key = self.key_for_sensor.get(sensor_id)
        if key is None:
            return 0.0
        held = self.fixture.displacement_for(key)
        if held is not None:
            return held
        t_s = t_us / 1e6
        for start_s, motion in self._injected.get(key, ()):
            if start_s <= t_s < start_s + motion.end_s:
                return motion.displacement_at(t_s - start_s)
        if self.performance is not None:
            return self.performance.displacement_at(
                key, t_s - self.performance_t0_s)
        return 0.0
