"""Per-sensor two-point calibration and monotone counts -> displacement mapping.

Each sensor is calibrated from raw captures at two mechanically known
positions: rest (0 mm) and full key travel.  Optional mid-travel anchors
tighten the mapping between the endpoints.  The mapping is a shape-preserving
monotone piecewise-cubic interpolation through the anchor points; no
functional form of the sensor response is assumed, so intermediate values are
a monotone, nonlinearly scaled coordinate rather than an exact geometric
measurement.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import PchipInterpolator

from .errors import CalibrationError

MIN_CAPTURE_SAMPLES = 20
MIN_SPAN_SIGMA = 10.0
MIN_SPAN_COUNTS = 1.0


@dataclass
class CalibrationEntry:
    """Raw endpoints plus the monotone counts->mm mapping for one sensor."""

    sensor_id: int
    raw_rest: float
    raw_full: float
    travel_mm: float
    anchors: tuple[tuple[float, float], ...] = ()  # (counts, mm), mid-travel
    captured_at: float = 0.0
    _curve: PchipInterpolator | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        knots_counts, knots_mm = _validated_knots(
            self.raw_rest, self.raw_full, self.travel_mm, self.anchors
        )
        self._counts_lo = knots_counts[0]
        self._counts_hi = knots_counts[-1]
        self._curve = PchipInterpolator(knots_counts, knots_mm)
        self._lut: np.ndarray | None = None

    def displacement(self, counts) -> float | np.ndarray:
        """Map raw counts to mm, clamped to [0, travel_mm]."""
        c = np.clip(np.asarray(counts, dtype=np.float64),
                    self._counts_lo, self._counts_hi)
        mm = np.clip(self._curve(c), 0.0, self.travel_mm)
        # Endpoint exactness: the reference captures define 0 and full travel
        # by definition; spline evaluation at a knot may leave fp residue.
        mm = np.where(c == self.raw_rest, 0.0, mm)
        mm = np.where(c == self.raw_full, self.travel_mm, mm)
        return float(mm) if np.isscalar(counts) else mm

    def displacement_code(self, code: int) -> float:
        """Fast path for integer ADC codes (same mapping, precomputed)."""
        lut = self._lut
        if lut is None:
            hi = max(int(np.ceil(self._counts_hi)) + 1, 1)
            lut = self._lut = np.asarray(self.displacement(np.arange(hi + 1)))
        if code < 0:
            code = 0
        elif code >= len(lut):
            code = len(lut) - 1
        return float(lut[code])


def _validated_knots(raw_rest, raw_full, travel_mm, anchors):
    if not travel_mm > 0:
        raise CalibrationError("travel_mm must be > 0")
    if raw_rest == raw_full:
        raise CalibrationError("rest and full-travel captures are identical")
    points = [(float(raw_rest), 0.0)]
    points += [(float(c), float(mm)) for c, mm in anchors]
    points.append((float(raw_full), float(travel_mm)))
    for c, mm in points[1:-1]:
        if not 0.0 < mm < travel_mm:
            raise CalibrationError(
                f"anchor at {mm} mm outside (0, {travel_mm}) travel"
            )
    # Anchors must advance strictly in both coordinates, in the direction set
    # by the endpoints.
    mm_vals = [p[1] for p in points]
    if any(b <= a for a, b in zip(mm_vals, mm_vals[1:])):
        raise CalibrationError("anchor displacements must be strictly increasing")
    counts_vals = [p[0] for p in points]
    direction = 1.0 if raw_full > raw_rest else -1.0
    if any((b - a) * direction <= 0 for a, b in zip(counts_vals, counts_vals[1:])):
        raise CalibrationError(
            "anchor counts must be strictly monotone between rest and full captures"
        )
    pts = sorted(points, key=lambda p: p[0])
    return (np.array([p[0] for p in pts]), np.array([p[1] for p in pts]))


def calibrate_sensor(
    sensor_id: int,
    rest_samples,
    full_samples,
    anchors=None,
    travel_mm: float = 9.0,
    captured_at: float = 0.0,
) -> CalibrationEntry:
    """Build a calibration entry from rest and full-travel captures.

    Uses capture medians (robust to a stray transient) and refuses captures
    whose endpoint span is too small to be a working sensor: less than
    ``MIN_SPAN_SIGMA`` times the capture noise, or under one ADC code.

    ``anchors`` are optional mid-travel pairs, either ``(counts, mm)`` tuples
    or ``(samples, mm)`` with a capture list whose median is used.
    """
    rest = np.asarray(rest_samples, dtype=np.float64)
    full = np.asarray(full_samples, dtype=np.float64)
    if len(rest) < MIN_CAPTURE_SAMPLES or len(full) < MIN_CAPTURE_SAMPLES:
        raise CalibrationError(
            f"need >= {MIN_CAPTURE_SAMPLES} samples per capture "
            f"(got {len(rest)} rest, {len(full)} full)"
        )
    raw_rest = float(np.median(rest))
    raw_full = float(np.median(full))
    # MAD-based noise: like the median endpoints, immune to a stray transient.
    noise = max(_robust_std(rest), _robust_std(full))
    span = abs(raw_rest - raw_full)
    if span < max(MIN_SPAN_SIGMA * noise, MIN_SPAN_COUNTS):
        raise CalibrationError(
            f"sensor {sensor_id}: capture span {span:.1f} counts too small "
            f"(noise {noise:.1f}); key blocked or sensor misaligned?"
        )
    anchor_pairs = []
    for counts, mm in anchors or ():
        if np.ndim(counts) > 0:
            counts = float(np.median(np.asarray(counts, dtype=np.float64)))
        anchor_pairs.append((float(counts), float(mm)))
    return CalibrationEntry(
        sensor_id=sensor_id,
        raw_rest=raw_rest,
        raw_full=raw_full,
        travel_mm=travel_mm,
        anchors=tuple(anchor_pairs),
        captured_at=captured_at,
    )


def _robust_std(samples: np.ndarray) -> float:
    med = np.median(samples)
    return 1.4826 * float(np.median(np.abs(samples - med)))


def displacement(entry: CalibrationEntry, counts) -> float | np.ndarray:
    """Functional form of ``entry.displacement`` (monotone, clamped)."""
    return entry.displacement(counts)


def entry_to_dict(entry: CalibrationEntry) -> dict:
    return {
        "sensor_id": entry.sensor_id,
        "raw_rest": entry.raw_rest,
        "raw_full": entry.raw_full,
        "travel_mm": entry.travel_mm,
        "anchors": [[c, mm] for c, mm in entry.anchors],
        "captured_at": entry.captured_at,
    }


def entry_from_dict(doc: dict) -> CalibrationEntry:
    return CalibrationEntry(
        sensor_id=int(doc["sensor_id"]),
        raw_rest=float(doc["raw_rest"]),
        raw_full=float(doc["raw_full"]),
        travel_mm=float(doc["travel_mm"]),
        anchors=tuple((float(c), float(mm)) for c, mm in doc.get("anchors", [])),
        captured_at=float(doc.get("captured_at", 0.0)),
    )
