"""Key-action simulator: ground-truth key-lever displacement trajectories.

Generates keystroke trajectories for a plucked-string keyboard action under
three load regimes: disengaged (no sound-producing mechanism), single pluck,
and staggered double pluck.  The press phase is piecewise-kinematic: constant
velocity between pluck points, with an instantaneous velocity increase at each
pluck as the resisting load drops away.  A rapid release appends a damped
settling oscillation about the rest position, which may undershoot below
0 mm; ground truth keeps the signed undershoot (the sensing layer saturates
instead).

All trajectories are defined in continuous time, so ground-truth event times
are independent of the sampling rate used to render a trace.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ValidationError

RELEASE_STYLES = ("held", "rapid")

# Settling oscillation is cut off once its envelope drops below this amplitude.
SETTLE_FLOOR_MM = 0.005


@dataclass(frozen=True)
class ActionConfig:
    """Mechanical parameters of one keyboard action.

    ``pluck_points_mm`` empty means the sound-producing mechanism is
    disengaged; one entry models a single manual; two staggered entries model
    coupled double-manual plucks.
    """

    travel_mm: float = 9.0
    pluck_points_mm: tuple[float, ...] = ()
    unload_fraction: float = 0.35
    settle_freq_hz: float = 18.0
    settle_damping: float = 0.25
    overshoot_mm: float = 0.35
    velocity_jitter: float = 0.03

    def __post_init__(self):
        if not self.travel_mm > 0:
            raise ValidationError("travel_mm must be > 0")
        pts = tuple(float(p) for p in self.pluck_points_mm)
        object.__setattr__(self, "pluck_points_mm", pts)
        for p in pts:
            if not 0 < p < self.travel_mm:
                raise ValidationError(
                    f"pluck point {p} mm outside (0, {self.travel_mm})"
                )
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise ValidationError("pluck points must be strictly increasing")
        if not 0 < self.unload_fraction < 1:
            raise ValidationError("unload_fraction must be in (0, 1)")
        if not self.settle_freq_hz > 0:
            raise ValidationError("settle_freq_hz must be > 0")
        if not 0 < self.settle_damping < 1:
            raise ValidationError("settle_damping must be in (0, 1)")
        if not 0 <= self.overshoot_mm < 0.5:
            raise ValidationError("overshoot_mm must be in [0, 0.5)")
        if not 0 <= self.velocity_jitter < 0.2:
            raise ValidationError("velocity_jitter must be in [0, 0.2)")


@dataclass(frozen=True)
class GestureSpec:
    """One keystroke: when it starts and how fast it moves.

    ``press_duration_s`` is the rest-to-bottom traversal time absent any
    sounding load; plucked configurations finish the press faster because the
    lever unloads partway down.
    """

    onset_s: float = 0.0
    press_duration_s: float = 0.08
    hold_s: float = 0.15
    release_duration_s: float = 0.06
    release_style: str = "rapid"

    def __post_init__(self):
        if self.onset_s < 0:
            raise ValidationError("onset_s must be >= 0")
        if not self.press_duration_s > 0:
            raise ValidationError("press_duration_s must be > 0 for a keystroke")
        if self.hold_s < 0:
            raise ValidationError("hold_s must be >= 0")
        if not self.release_duration_s > 0:
            raise ValidationError("release_duration_s must be > 0")
        if self.release_style not in RELEASE_STYLES:
            raise ValidationError(
                f"release_style must be one of {RELEASE_STYLES}"
            )


@dataclass
class DisplacementTrace:
    """Sampled key-lever displacement in mm at a fixed rate."""

    rate_hz: float
    samples_mm: np.ndarray
    t0_s: float = 0.0

    def __post_init__(self):
        if not self.rate_hz > 0:
            raise ValidationError("rate_hz must be > 0")
        self.samples_mm = np.asarray(self.samples_mm, dtype=np.float64)

    def times(self) -> np.ndarray:
        return self.t0_s + np.arange(len(self.samples_mm)) / self.rate_hz


@dataclass
class GroundTruthEvents:
    """Exact pluck/strike/release-crossing instants for one key timeline."""

    pluck_times_s: list[float] = field(default_factory=list)
    pluck_displacements_mm: list[float] = field(default_factory=list)
    strike_time_s: float | None = None
    release_cross_time_s: float | None = None


class KeystrokeMotion:
    """Continuous-time trajectory of a single keystroke.

    Built once from (config, gesture, rng); evaluable at arbitrary times so
    the same ground truth backs every sampling rate and the asynchronous
    board scan schedule.
    """

    def __init__(self, config: ActionConfig, gesture: GestureSpec,
                 rng: np.random.Generator):
        self.config = config
        self.gesture = gesture

        travel = config.travel_mm
        bounds = [0.0, *config.pluck_points_mm, travel]
        gain = 1.0 / (1.0 - config.unload_fraction)
        v0 = travel / gesture.press_duration_s

        # One velocity per inter-pluck segment; each pluck removes part of the
        # resisting load, so the lever speeds up by `gain` at every crossing.
        # Jitter models stroke-to-stroke human variability.
        n_seg = len(bounds) - 1
        jitter = 1.0 + config.velocity_jitter * rng.uniform(-1.0, 1.0, n_seg)
        self._seg_start_mm = np.array(bounds[:-1])
        self._seg_end_mm = np.array(bounds[1:])
        self._seg_v = v0 * gain ** np.arange(n_seg) * jitter

        seg_dt = (self._seg_end_mm - self._seg_start_mm) / self._seg_v
        seg_t0 = gesture.onset_s + np.concatenate(([0.0], np.cumsum(seg_dt[:-1])))
        self._seg_t0 = seg_t0
        self.t_bottom_s = float(seg_t0[-1] + seg_dt[-1])

        self.events = GroundTruthEvents()
        for i, p in enumerate(config.pluck_points_mm):
            self.events.pluck_times_s.append(float(seg_t0[i + 1]))
            self.events.pluck_displacements_mm.append(float(p))
        if config.pluck_points_mm:
            self.events.strike_time_s = self.events.pluck_times_s[-1]

        self.t_release_s = self.t_bottom_s + gesture.hold_s
        self._v_release = travel / gesture.release_duration_s
        self.t_rest_s = self.t_release_s + gesture.release_duration_s

        if config.pluck_points_mm:
            p_max = config.pluck_points_mm[-1]
            self.events.release_cross_time_s = (
                self.t_release_s + (travel - p_max) / self._v_release
            )

        # Damped settling about rest after a rapid release.
        self._settle = gesture.release_style == "rapid" and config.overshoot_mm > 0
        if self._settle:
            w0 = 2 * math.pi * config.settle_freq_hz
            self._settle_lambda = config.settle_damping * w0
            self._settle_wd = w0 * math.sqrt(1 - config.settle_damping**2)
            self._settle_amp = config.overshoot_mm
            self._settle_dur = (
                math.log(self._settle_amp / SETTLE_FLOOR_MM) / self._settle_lambda
            )
        else:
            self._settle_dur = 0.0

        self.end_s = self.t_rest_s + self._settle_dur

    def displacement_at(self, t_s: float) -> float:
        g = self.gesture
        if t_s <= g.onset_s or t_s >= self.end_s:
            return 0.0
        if t_s < self.t_bottom_s:
            i = int(np.searchsorted(self._seg_t0, t_s, side="right")) - 1
            return float(
                self._seg_start_mm[i] + self._seg_v[i] * (t_s - self._seg_t0[i])
            )
        if t_s < self.t_release_s:
            return self.config.travel_mm
        if t_s < self.t_rest_s:
            return self.config.travel_mm - self._v_release * (t_s - self.t_release_s)
        if self._settle:
            dt = t_s - self.t_rest_s
            return float(
                -self._settle_amp
                * math.exp(-self._settle_lambda * dt)
                * math.sin(self._settle_wd * dt)
            )
        return 0.0

    def sample(self, t_s: np.ndarray) -> np.ndarray:
        return np.array([self.displacement_at(t) for t in np.asarray(t_s, float)])


class KeyTimeline:
    """Non-overlapping keystrokes of one key on a shared performance clock."""

    def __init__(self, motions: Sequence[KeystrokeMotion]):
        self.motions = sorted(motions, key=lambda m: m.gesture.onset_s)
        for a, b in zip(self.motions, self.motions[1:]):
            if b.gesture.onset_s < a.end_s:
                raise ValidationError(
                    "overlapping gestures on one key: onset "
                    f"{b.gesture.onset_s:.3f}s before {a.end_s:.3f}s"
                )

    @property
    def end_s(self) -> float:
        return self.motions[-1].end_s if self.motions else 0.0

    def displacement_at(self, t_s: float) -> float:
        for m in self.motions:
            if m.gesture.onset_s <= t_s < m.end_s:
                return m.displacement_at(t_s)
        return 0.0

    def sample(self, t: np.ndarray) -> np.ndarray:
        return np.array([self.displacement_at(x) for x in np.asarray(t, float)])

    def events(self) -> GroundTruthEvents:
        merged = GroundTruthEvents()
        for m in self.motions:
            merged.pluck_times_s.extend(m.events.pluck_times_s)
            merged.pluck_displacements_mm.extend(m.events.pluck_displacements_mm)
            if m.events.strike_time_s is not None:
                merged.strike_time_s = m.events.strike_time_s
            if m.events.release_cross_time_s is not None:
                merged.release_cross_time_s = m.events.release_cross_time_s
        return merged


class Performance:
    """A scripted multi-key performance: one timeline per key."""

    def __init__(self, timelines: dict):
        self.timelines = timelines

    @property
    def duration_s(self) -> float:
        return max((tl.end_s for tl in self.timelines.values()), default=0.0)

    def displacement_at(self, key, t_s: float) -> float:
        tl = self.timelines.get(key)
        return tl.displacement_at(t_s) if tl is not None else 0.0

    def traces(self, rate_hz: float) -> dict:
        n = int(math.ceil(self.duration_s * rate_hz)) + 2
        t = np.arange(n) / rate_hz
        return {
            key: DisplacementTrace(rate_hz, tl.sample(t))
            for key, tl in self.timelines.items()
        }

    def events(self) -> dict:
        return {key: tl.events() for key, tl in self.timelines.items()}


def keystroke_motion(config: ActionConfig, gesture: GestureSpec,
                     rng_seed: int = 0) -> KeystrokeMotion:
    """Continuous trajectory for one keystroke; deterministic in the seed."""
    return KeystrokeMotion(config, gesture, np.random.default_rng(rng_seed))


def simulate_keystroke(
    config: ActionConfig,
    gesture: GestureSpec,
    rate_hz: float,
    rng_seed: int = 0,
) -> tuple[DisplacementTrace, GroundTruthEvents]:
    """Simulate one keystroke and sample it at ``rate_hz``.

    Returns the sampled trace plus exact (rate-independent) ground-truth
    event times.  The trace starts and ends at rest.
    """
    if not rate_hz > 0:
        raise ValidationError("rate_hz must be > 0")
    motion = keystroke_motion(config, gesture, rng_seed)
    n = int(math.ceil(motion.end_s * rate_hz)) + 2
    t = np.arange(n) / rate_hz
    trace = DisplacementTrace(rate_hz, motion.sample(t))
    return trace, motion.events


def scripted_performance(
    config: ActionConfig,
    score: Iterable[tuple],
    rate_hz: float = 250.0,
    rng_seed: int = 0,
    compass: Callable[[object], bool] | None = None,
) -> dict:
    """Simulate a score of ``(key, onset_s, GestureSpec)`` entries.

    Returns ``{key: (DisplacementTrace, GroundTruthEvents)}`` with every trace
    on a shared clock starting at t=0.  Gestures on distinct keys may overlap;
    overlapping gestures on the same key are rejected.
    """
    perf = build_performance(config, score, rng_seed=rng_seed, compass=compass)
    traces = perf.traces(rate_hz)
    events = perf.events()
    return {key: (traces[key], events[key]) for key in perf.timelines}


def build_performance(
    config: ActionConfig,
    score: Iterable[tuple],
    rng_seed: int = 0,
    compass: Callable[[object], bool] | None = None,
) -> Performance:
    """Build the continuous-time Performance behind scripted_performance."""
    entries = list(score)
    seeds = np.random.SeedSequence(rng_seed).spawn(max(len(entries), 1))
    per_key: dict = {}
    for i, (key, onset_s, gesture) in enumerate(entries):
        if onset_s < 0:
            raise ValidationError(f"onset for key {key!r} is negative")
        if compass is not None and not compass(key):
            raise ValidationError(f"key {key!r} outside the configured compass")
        g = GestureSpec(
            onset_s=onset_s,
            press_duration_s=gesture.press_duration_s,
            hold_s=gesture.hold_s,
            release_duration_s=gesture.release_duration_s,
            release_style=gesture.release_style,
        )
        motion = KeystrokeMotion(config, g, np.random.default_rng(seeds[i]))
        per_key.setdefault(key, []).append(motion)
    return Performance({key: KeyTimeline(ms) for key, ms in per_key.items()})


def export_traces_csv(traces: dict, path) -> None:
    """Write traces as CSV rows ``t_s,key,displacement_mm`` (6 decimals)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "key", "displacement_mm"])
        for key in sorted(traces, key=str):
            trace = traces[key]
            for t, d in zip(trace.times(), trace.samples_mm):
                w.writerow([f"{t:.6f}", _key_label(key), f"{d:.6f}"])


def export_events_csv(events: dict, path) -> None:
    """Write ground-truth events as CSV ``key,event,t_s,displacement_mm``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["key", "event", "t_s", "displacement_mm"])
        for key in sorted(events, key=str):
            ev = events[key]
            label = _key_label(key)
            for t, d in zip(ev.pluck_times_s, ev.pluck_displacements_mm):
                w.writerow([label, "pluck", f"{t:.6f}", f"{d:.6f}"])
            if ev.strike_time_s is not None:
                w.writerow([
                    label, "strike", f"{ev.strike_time_s:.6f}",
                    f"{ev.pluck_displacements_mm[-1]:.6f}",
                ])
            if ev.release_cross_time_s is not None:
                w.writerow([
                    label, "release_cross", f"{ev.release_cross_time_s:.6f}",
                    f"{max(ev.pluck_displacements_mm):.6f}",
                ])


def _key_label(key) -> str:
    if isinstance(key, tuple):
        return ":".join(str(p) for p in key)
    return str(key)
