"""Traversal-time -> MIDI velocity mapping and instrument-level key events.

Velocity is derived from how quickly the key traverses the detection window:
a short traversal is a fast, loud stroke.  One configurable curve maps the
measured time for both note-on (strike window) and note-off (release window).
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class VelocityCurve:
    """Clamped, strictly decreasing traversal-time -> velocity mapping."""

    t_min_s: float = 0.005
    t_max_s: float = 0.105
    v_min: int = 1
    v_max: int = 127
    shape: str = "linear"  # "linear" | "gamma"
    gamma: float = 1.0

    def __post_init__(self):
        if not self.t_min_s < self.t_max_s:
            raise ValidationError("t_min_s must be < t_max_s")
        if not 1 <= self.v_min < self.v_max <= 127:
            raise ValidationError("need 1 <= v_min < v_max <= 127")
        if self.shape not in ("linear", "gamma"):
            raise ValidationError("shape must be 'linear' or 'gamma'")
        if not self.gamma > 0:
            raise ValidationError("gamma must be > 0")

    def level(self, traversal_s: float) -> float:
        """Real-valued velocity before rounding (strictly decreasing in t)."""
        if not traversal_s > 0:
            raise ValidationError("traversal time must be > 0")
        t = min(max(traversal_s, self.t_min_s), self.t_max_s)
        u = (self.t_max_s - t) / (self.t_max_s - self.t_min_s)
        if self.shape == "gamma":
            u = u**self.gamma
        return self.v_min + u * (self.v_max - self.v_min)


def velocity_from_time(curve: VelocityCurve, traversal_s: float) -> int:
    """MIDI velocity (1..127) for a window traversal time."""
    return int(round(curve.level(traversal_s)))


def curve_to_dict(curve: VelocityCurve) -> dict:
    return {
        "t_min_s": curve.t_min_s, "t_max_s": curve.t_max_s,
        "v_min": curve.v_min, "v_max": curve.v_max,
        "shape": curve.shape, "gamma": curve.gamma,
    }


def curve_from_dict(doc: dict) -> VelocityCurve:
    return VelocityCurve(
        t_min_s=float(doc.get("t_min_s", 0.005)),
        t_max_s=float(doc.get("t_max_s", 0.105)),
        v_min=int(doc.get("v_min", 1)),
        v_max=int(doc.get("v_max", 127)),
        shape=str(doc.get("shape", "linear")),
        gamma=float(doc.get("gamma", 1.0)),
    )


@dataclass(frozen=True)
class KeyEvent:
    """Instrument-level note event with window timing and mapped velocity."""

    kind: str  # "note_on" | "note_off"
    manual: int
    key: int
    t_s: float          # window exit instant
    traversal_s: float  # window exit - entry
    velocity: int

    def __post_init__(self):
        if self.kind not in ("note_on", "note_off"):
            raise ValidationError("kind must be note_on or note_off")
        if not 1 <= self.velocity <= 127:
            raise ValidationError("velocity must be in 1..127")


@dataclass
class AggregatorDiagnostics:
    stuck_notes_dropped: int = 0
    unknown_sensor_events: int = 0


class EventAggregator:
    """Translates per-sensor raw events into alternating per-key KeyEvents.

    Enforces on/off alternation per (manual, key): a duplicate on (or off)
    is dropped and counted, so downstream MIDI never sees a stuck note.
    The same velocity curve is applied to strike and release traversals.
    """

    def __init__(self, key_map: dict[int, tuple[int, int]], curve: VelocityCurve):
        self.key_map = dict(key_map)
        self.curve = curve
        self.diagnostics = AggregatorDiagnostics()
        self._sounding: dict[tuple[int, int], bool] = {}

    def process(self, sensor_id: int, kind: str,
                entry_us: int, exit_us: int) -> KeyEvent | None:
        """One raw on/off event; returns the KeyEvent or None if dropped."""
        mapped = self.key_map.get(sensor_id)
        if mapped is None:
            self.diagnostics.unknown_sensor_events += 1
            return None
        manual, key = mapped
        want_on = kind == "on"
        if self._sounding.get((manual, key), False) == want_on:
            self.diagnostics.stuck_notes_dropped += 1
            return None
        self._sounding[(manual, key)] = want_on
        traversal_s = max((exit_us - entry_us) / 1e6, 1e-9)
        return KeyEvent(
            kind="note_on" if want_on else "note_off",
            manual=manual,
            key=key,
            t_s=exit_us / 1e6,
            traversal_s=traversal_s,
            velocity=velocity_from_time(self.curve, traversal_s),
        )

    def open_notes(self) -> list[tuple[int, int]]:
        return sorted(k for k, on in self._sounding.items() if on)
