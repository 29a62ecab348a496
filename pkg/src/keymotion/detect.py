"""Key-event detection: windowed on/off hysteresis and pluck-feature scan.

Two detectors live here.

``ThresholdDetector`` is the per-sensor state machine the boards run: a
note-on fires when the calibrated displacement traverses the on-window from
below (timestamping entry and exit of the window), a note-off fires
symmetrically on the way down through the off-window, and the sensor re-arms
only once the key has returned near rest.  The dual-threshold windows make
the event stream strictly alternating under noise.

``detect_pluck_features`` is the offline trace analysis.  Each press phase
(rest to bottom) is segmented as a continuous piecewise-linear rise with
zero, one, or two interior knots; a knot where the slope steps UP is the
signature of the mechanism unloading as the plectrum releases the string.
Model order is chosen by F-tests over the whole phase, so a slow press still
accumulates enough evidence to resolve two staggered plucks only a few
samples apart, and a noisy featureless press stays featureless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError

# A press phase runs from the key leaving the rest clamp to just short of
# bottoming out; levels this close to the rails are excluded from fits.
ONSET_CLEARANCE_MM = 0.3

# Minimum samples in a press phase before segmentation is attempted.
MIN_PHASE_SAMPLES = 8

# Minimum samples between knots / from a knot to the phase edge.
KNOT_GAP = 2


@dataclass(frozen=True)
class DetectionConfig:
    """Thresholds for event detection and pluck-feature tagging.

    The on/off windows bracket the expected pluck region; narrower windows
    time the traversal where the excitation actually happens instead of over
    the whole key dip.
    """

    on_window_mm: tuple[float, float] = (4.5, 5.5)   # (lo, hi), rising
    off_window_mm: tuple[float, float] = (5.5, 4.5)  # (hi, lo), falling
    rearm_mm: float = 1.0
    slope_feature_min: float = 1.2   # slope ratio across a pluck knot
    feature_f_min: float = 12.0      # F-test gate for adding a knot
    feature_sigma_min: float = 3.5   # per-knot slope-step significance
    feature_margin_mm: float = 1.5   # feature band inset from the rails
    min_slope_mm_s: float = 20.0
    min_slope_fraction: float = 0.25
    smooth_samples: int = 3          # display/plot smoothing width

    def __post_init__(self):
        on_lo, on_hi = self.on_window_mm
        off_hi, off_lo = self.off_window_mm
        if not on_lo < on_hi:
            raise ValidationError("on_window_mm must be (lo, hi) with lo < hi")
        if not off_lo < off_hi:
            raise ValidationError("off_window_mm must be (hi, lo) with hi > lo")
        if not self.rearm_mm < on_lo:
            raise ValidationError("rearm_mm must lie below the on-window")
        if not self.rearm_mm > 0:
            raise ValidationError("rearm_mm must be > 0")
        if not self.slope_feature_min > 1.0:
            raise ValidationError("slope_feature_min must be > 1.0")
        if not self.feature_f_min > 0:
            raise ValidationError("feature_f_min must be > 0")
        if not self.feature_sigma_min > 0:
            raise ValidationError("feature_sigma_min must be > 0")
        if self.smooth_samples < 1:
            raise ValidationError("smooth_samples must be >= 1")

    def validate_for_travel(self, travel_mm: float) -> None:
        for edge in (*self.on_window_mm, *self.off_window_mm):
            if not 0 < edge < travel_mm:
                raise ValidationError(
                    f"window edge {edge} mm outside (0, {travel_mm})"
                )


@dataclass(frozen=True)
class DetectedEvent:
    """One on/off crossing with the window entry/exit instants (microseconds)."""

    kind: str  # "on" | "off"
    entry_us: int
    exit_us: int


# Detector states
_ARMED = "armed"          # below the on-window, ready to fire
_PRESSING = "pressing"    # inside the on-window on the way up
_SOUNDING = "sounding"    # on-event emitted, key down
_RELEASING = "releasing"  # inside the off-window on the way down
_RELEASED = "released"    # off-event emitted, waiting to re-arm near rest


class ThresholdDetector:
    """Per-sensor hysteresis state machine over calibrated displacement."""

    def __init__(self, cfg: DetectionConfig):
        self.cfg = cfg
        self.reset()

    def reset(self) -> None:
        self.state = None  # fixed by the first sample
        self._prev_t_us: int | None = None
        self._prev_mm: float | None = None
        self._on_entry_us = 0
        self._off_entry_us = 0

    def update(self, t_us: int, mm: float) -> list[DetectedEvent]:
        """Feed one calibrated sample; returns events completed by it."""
        cfg = self.cfg
        on_lo, on_hi = cfg.on_window_mm
        off_hi, off_lo = cfg.off_window_mm

        if self.state is None:
            # Attaching mid-keystroke must not fabricate an on-event.
            self.state = _ARMED if mm <= cfg.rearm_mm else _RELEASED
            self._prev_t_us, self._prev_mm = t_us, mm
            return []

        prev_t, prev_mm = self._prev_t_us, self._prev_mm
        events: list[DetectedEvent] = []

        # A single sample step can traverse several edges (fast press at a
        # slow scan rate), so run transitions to quiescence.
        while True:
            if self.state == _ARMED and mm >= on_lo:
                self._on_entry_us = _cross_time(prev_t, prev_mm, t_us, mm, on_lo)
                self.state = _PRESSING
            elif self.state == _PRESSING:
                if mm >= on_hi:
                    exit_us = _cross_time(prev_t, prev_mm, t_us, mm, on_hi)
                    events.append(DetectedEvent("on", self._on_entry_us, exit_us))
                    self.state = _SOUNDING
                elif mm < on_lo:
                    self.state = _ARMED  # aborted press, no event
                else:
                    break
            elif self.state == _SOUNDING and mm <= off_hi:
                self._off_entry_us = _cross_time(prev_t, prev_mm, t_us, mm, off_hi)
                self.state = _RELEASING
            elif self.state == _RELEASING:
                if mm <= off_lo:
                    exit_us = _cross_time(prev_t, prev_mm, t_us, mm, off_lo)
                    events.append(DetectedEvent("off", self._off_entry_us, exit_us))
                    self.state = _RELEASED
                elif mm > off_hi:
                    self.state = _SOUNDING  # re-pressed before leaving the window
                else:
                    break
            elif self.state == _RELEASED and mm <= cfg.rearm_mm:
                self.state = _ARMED
            else:
                break

        self._prev_t_us, self._prev_mm = t_us, mm
        return events


def _cross_time(t0_us, mm0, t1_us, mm1, edge) -> int:
    """Linear-interpolated instant at which the displacement crossed ``edge``."""
    if mm1 == mm0:
        return int(t1_us)
    frac = (edge - mm0) / (mm1 - mm0)
    frac = min(max(frac, 0.0), 1.0)
    return int(round(t0_us + frac * (t1_us - t0_us)))


# ---------------------------------------------------------------------------
# Pluck-feature detection


def detect_pluck_features(
    trace,
    cfg: DetectionConfig | None = None,
    travel_mm: float = 9.0,
) -> list[tuple[float, float]]:
    """Scan a displacement trace for pluck features (slope-increase knots).

    Returns ``[(t_s, displacement_mm), ...]`` in time order.  Every press
    phase is fitted with continuous piecewise-linear models of increasing
    knot count (0, 1, 2); an extra knot must pass an F-test against the
    simpler model, carry a positive slope step that is both significant
    against the trace's own noise and at least ``slope_feature_min`` as a
    ratio, and sit inside the feature band.  Accepted knot times are refined
    to sub-sample resolution.
    """
    if cfg is None:
        cfg = DetectionConfig()
    if trace.rate_hz < 100:
        raise ValidationError("trace rate must be >= 100 Hz for feature detection")

    x = np.asarray(trace.samples_mm, dtype=np.float64)
    times = trace.times()
    sigma = _estimate_noise(x, travel_mm)

    features: list[tuple[float, float]] = []
    for start, end in find_press_phases(x, travel_mm):
        seg_x = x[start:end]
        seg_t = times[start:end]
        features.extend(
            _phase_features(seg_t, seg_x, sigma, cfg, travel_mm))
    features.sort(key=lambda f: f[0])
    return features


def find_press_phases(x: np.ndarray, travel_mm: float
                      ) -> list[tuple[int, int]]:
    """Index ranges [start, end) of rest-to-bottom presses in a trace.

    A phase opens when the displacement rises out of the rest clamp and
    closes just before bottoming out, so each returned span is a clean rise
    with both rails excluded.  Aborted presses (never reaching the bottom
    region) are skipped; a new phase cannot open until the key has returned
    near rest.
    """
    lo_lv = ONSET_CLEARANCE_MM
    hi_lv = travel_mm - ONSET_CLEARANCE_MM
    phases: list[tuple[int, int]] = []
    state = "idle"
    start = 0
    for i, v in enumerate(x):
        if state == "idle":
            if v >= lo_lv:
                start = i
                state = "press"
        elif state == "press":
            if v >= hi_lv:
                if i - start >= MIN_PHASE_SAMPLES:
                    phases.append((start, i))
                state = "high"
            elif v < lo_lv / 2:
                state = "idle"  # aborted press
        elif state == "high":
            if v < lo_lv:
                state = "idle"
    return phases


def _phase_features(t: np.ndarray, x: np.ndarray, sigma: float,
                    cfg: DetectionConfig, travel_mm: float
                    ) -> list[tuple[float, float]]:
    n = len(x)
    if n < MIN_PHASE_SAMPLES:
        return []
    t0 = t[0]
    tr = t - t0  # relative times for conditioning

    mean_v = (x[-1] - x[0]) / max(tr[-1], 1e-9)
    floor = max(cfg.min_slope_mm_s, cfg.min_slope_fraction * mean_v)

    fits = _PhaseFits(tr, x)
    sse0 = fits.sse0()

    best1 = fits.best_single_knot()
    if best1 is None:
        return []
    sse1, p = best1
    dof1 = n - 3
    f1 = _f_stat(sse0, sse1, dof1)
    if f1 < cfg.feature_f_min:
        return []

    # Try to split: two knots must beat one by the same F margin.  The
    # globally best pair can waste a knot on press-onset curvature, so walk
    # the top pairs (best SSE first) until one passes the per-knot checks.
    result1 = _knot_report(fits, [p], sigma, cfg, travel_mm, floor, t0)
    dof2 = n - 4
    for sse2, pp, qq in fits.best_knot_pairs(limit=8):
        f2 = _f_stat(sse1, sse2, dof2)
        if f2 < cfg.feature_f_min:
            break  # pairs are SSE-sorted: the rest only score worse
        result2 = _knot_report(fits, [pp, qq], sigma, cfg, travel_mm,
                               floor, t0)
        # At most one feature per millimetre of travel: two knots closer
        # than that are one pluck split by noise, not a staggered pair.
        if len(result2) == 2 and abs(result2[1][1] - result2[0][1]) >= 1.0:
            return result2
    return result1


def _f_stat(sse_small: float, sse_big: float, dof: int) -> float:
    if dof <= 0:
        return 0.0
    if sse_big <= 1e-18 * max(sse_small, 1.0):
        return math.inf
    return (sse_small - sse_big) / (sse_big / dof)


def _knot_report(fits: "_PhaseFits", knots: list[int], sigma: float,
                 cfg: DetectionConfig, travel_mm: float, floor: float,
                 t0: float) -> list[tuple[float, float]]:
    """Validate the fitted knots and convert them to (time, mm) features."""
    deltas = fits.refine(knots)
    coef, cov_diag = fits.coefficients(knots, deltas)
    slopes = np.cumsum(coef[1:])  # segment velocities
    if slopes[0] < floor:
        return []
    out = []
    for k, (knot, delta) in enumerate(zip(knots, deltas)):
        step = coef[2 + k]
        v_before, v_after = slopes[k], slopes[k + 1]
        if step <= 0 or v_before <= 0:
            return []
        if v_after < cfg.slope_feature_min * v_before:
            return []
        if sigma > 0:
            se = sigma * math.sqrt(max(cov_diag[2 + k], 0.0))
            if se > 0 and step < cfg.feature_sigma_min * se:
                return []
        t_knot = fits.knot_time(knot, delta)
        mm = fits.value_at(coef, knots, deltas, t_knot)
        if not cfg.feature_margin_mm <= mm <= travel_mm - cfg.feature_margin_mm:
            return []
        out.append((t0 + t_knot, float(mm)))
    return out


class _PhaseFits:
    """Continuous piecewise-linear fits over one press phase.

    Exhaustive knot search runs on the sample grid using suffix sums, so the
    Gram matrices for every knot position come out of O(n) precomputation;
    refinement re-fits a handful of sub-sample knot offsets directly.
    """

    def __init__(self, tr: np.ndarray, x: np.ndarray):
        self.tr = tr
        self.x = x
        self.n = len(x)
        # Suffix sums over samples j >= k.
        self.s1 = _suffix(np.ones(self.n))
        self.st = _suffix(tr)
        self.stt = _suffix(tr * tr)
        self.sx = _suffix(x)
        self.sxt = _suffix(x * tr)
        self.sum_x = float(np.sum(x))
        self.sum_t = float(np.sum(tr))
        self.sum_tt = float(np.sum(tr * tr))
        self.sum_xt = float(np.sum(x * tr))
        self.sum_xx = float(np.sum(x * x))

    # -- closed-form pieces ------------------------------------------------

    def _ramp_dots(self, k: np.ndarray):
        """Sums of r_k = relu(t - t_k): (sum r, sum t*r, sum r*r, sum x*r)."""
        tk = self.tr[k]
        s1, st, stt = self.s1[k], self.st[k], self.stt[k]
        sx, sxt = self.sx[k], self.sxt[k]
        sum_r = st - tk * s1
        sum_tr = stt - tk * st
        sum_rr = stt - 2 * tk * st + tk * tk * s1
        sum_xr = sxt - tk * sx
        return sum_r, sum_tr, sum_rr, sum_xr

    def _ramp_cross(self, p: np.ndarray, q: np.ndarray) -> np.ndarray:
        """sum over j >= q of (t - t_p)(t - t_q) with p <= q."""
        tp, tq = self.tr[p], self.tr[q]
        return (self.stt[q] - (tp + tq) * self.st[q]
                + tp * tq * self.s1[q])

    def sse0(self) -> float:
        n = self.n
        gram = np.array([[n, self.sum_t], [self.sum_t, self.sum_tt]])
        rhs = np.array([self.sum_x, self.sum_xt])
        coef = np.linalg.solve(gram, rhs)
        return max(self.sum_xx - float(coef @ rhs), 0.0)

    def best_single_knot(self) -> tuple[float, int] | None:
        n = self.n
        ks = np.arange(KNOT_GAP, n - KNOT_GAP)
        if len(ks) == 0:
            return None
        sum_r, sum_tr, sum_rr, sum_xr = self._ramp_dots(ks)
        m = len(ks)
        gram = np.empty((m, 3, 3))
        gram[:, 0, 0] = n
        gram[:, 0, 1] = gram[:, 1, 0] = self.sum_t
        gram[:, 0, 2] = gram[:, 2, 0] = sum_r
        gram[:, 1, 1] = self.sum_tt
        gram[:, 1, 2] = gram[:, 2, 1] = sum_tr
        gram[:, 2, 2] = sum_rr
        rhs = np.empty((m, 3))
        rhs[:, 0] = self.sum_x
        rhs[:, 1] = self.sum_xt
        rhs[:, 2] = sum_xr
        sse = self._batched_sse(gram, rhs)
        best = int(np.argmin(sse))
        return float(sse[best]), int(ks[best])

    def best_knot_pairs(self, limit: int = 8) -> list[tuple[float, int, int]]:
        n = self.n
        pairs = [
            (p, q)
            for p in range(KNOT_GAP, n - KNOT_GAP - KNOT_GAP)
            for q in range(p + KNOT_GAP, n - KNOT_GAP)
        ]
        if not pairs:
            return []
        ps = np.array([p for p, _ in pairs])
        qs = np.array([q for _, q in pairs])
        rp = self._ramp_dots(ps)
        rq = self._ramp_dots(qs)
        cross = self._ramp_cross(ps, qs)
        m = len(pairs)
        gram = np.empty((m, 4, 4))
        gram[:, 0, 0] = n
        gram[:, 0, 1] = gram[:, 1, 0] = self.sum_t
        gram[:, 1, 1] = self.sum_tt
        gram[:, 0, 2] = gram[:, 2, 0] = rp[0]
        gram[:, 1, 2] = gram[:, 2, 1] = rp[1]
        gram[:, 2, 2] = rp[2]
        gram[:, 0, 3] = gram[:, 3, 0] = rq[0]
        gram[:, 1, 3] = gram[:, 3, 1] = rq[1]
        gram[:, 3, 3] = rq[2]
        gram[:, 2, 3] = gram[:, 3, 2] = cross
        rhs = np.empty((m, 4))
        rhs[:, 0] = self.sum_x
        rhs[:, 1] = self.sum_xt
        rhs[:, 2] = rp[3]
        rhs[:, 3] = rq[3]
        sse = self._batched_sse(gram, rhs)
        order = np.argsort(sse)[:limit]
        return [(float(sse[j]), int(ps[j]), int(qs[j])) for j in order]

    def _batched_sse(self, gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
        try:
            coef = np.linalg.solve(gram, rhs[..., None])[..., 0]
        except np.linalg.LinAlgError:
            coef = np.stack([
                np.linalg.lstsq(g, r, rcond=None)[0]
                for g, r in zip(gram, rhs)
            ])
        sse = self.sum_xx - np.einsum("ij,ij->i", coef, rhs)
        bad = ~np.isfinite(sse)
        sse[bad] = np.inf
        return np.maximum(sse, 0.0)

    # -- explicit design evaluation (refinement & reporting) ----------------

    def _design(self, knots: list[int], deltas: list[float]) -> np.ndarray:
        cols = [np.ones(self.n), self.tr]
        for knot, delta in zip(knots, deltas):
            cols.append(np.maximum(self.tr - (self.tr[knot] + delta), 0.0))
        return np.stack(cols, axis=1)

    def refine(self, knots: list[int], grid: int = 9) -> list[float]:
        """Sub-sample knot offsets by coordinate descent on the exact SSE."""
        if self.n < 2:
            return [0.0] * len(knots)
        dt = float(np.median(np.diff(self.tr))) if self.n > 1 else 0.0
        deltas = [0.0] * len(knots)
        for _ in range(2):
            for which in range(len(knots)):
                best_sse, best_delta = math.inf, deltas[which]
                for delta in np.linspace(-dt, dt, grid):
                    trial = list(deltas)
                    trial[which] = float(delta)
                    design = self._design(knots, trial)
                    coef, *_ = np.linalg.lstsq(design, self.x, rcond=None)
                    resid = self.x - design @ coef
                    sse = float(resid @ resid)
                    if sse < best_sse:
                        best_sse, best_delta = sse, float(delta)
                deltas[which] = best_delta
        return deltas

    def coefficients(self, knots: list[int], deltas: list[float]
                     ) -> tuple[np.ndarray, np.ndarray]:
        design = self._design(knots, deltas)
        gram = design.T @ design
        try:
            gram_inv = np.linalg.inv(gram)
        except np.linalg.LinAlgError:
            gram_inv = np.linalg.pinv(gram)
        coef = gram_inv @ (design.T @ self.x)
        return coef, np.diag(gram_inv)

    def knot_time(self, knot: int, delta: float) -> float:
        return float(self.tr[knot] + delta)

    def value_at(self, coef: np.ndarray, knots: list[int],
                 deltas: list[float], t_rel: float) -> float:
        value = coef[0] + coef[1] * t_rel
        for k, (knot, delta) in enumerate(zip(knots, deltas)):
            value += coef[2 + k] * max(t_rel - (self.tr[knot] + delta), 0.0)
        return float(value)


def _suffix(values: np.ndarray) -> np.ndarray:
    return np.cumsum(values[::-1])[::-1]


def smooth_trace(x: np.ndarray, width: int) -> np.ndarray:
    """Moving-average smoothing with edge passthrough (display helper)."""
    if width <= 1:
        return np.asarray(x, dtype=np.float64)
    kernel = np.ones(width) / width
    xs = np.convolve(x, kernel, mode="same")
    # convolve 'same' contaminates the ends with zero padding
    xs[:width] = x[:width]
    xs[-width:] = x[-width:]
    return xs


def _estimate_noise(x: np.ndarray, travel_mm: float) -> float:
    """Robust per-sample noise from second differences of interior samples.

    Clamped rest/bottom spans would understate the noise, so only samples
    clear of both rails contribute; corners are absorbed by the median.
    For a locally linear signal Var(d2) = 6 sigma^2.
    """
    d2 = np.abs(x[2:] - 2 * x[1:-1] + x[:-2])
    interior = (x[1:-1] > 0.5) & (x[1:-1] < travel_mm - 0.5)
    pool = d2[interior] if np.count_nonzero(interior) >= 8 else d2
    if len(pool) == 0:
        return 0.0
    return 1.4826 * float(np.median(pool)) / math.sqrt(6.0)
