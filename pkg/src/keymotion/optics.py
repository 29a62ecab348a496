"""Reflective optical sensor model: distance -> ADC counts.

The expected response is a smooth, strictly decreasing function of the
sensor-to-lever distance:

    counts(d) = floor_counts + a_gain / (d + d0_mm)^2

This inverse-square-with-standoff family is a stand-in; downstream
calibration never assumes the form, only monotonicity.  Sampling adds
Gaussian noise and quantizes to the ADC range, saturating at the rails.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, replace

import numpy as np

from .errors import ValidationError

# Defaults are tuned so that, over 9 mm of travel, the response spans well
# over 400 counts without saturating a 12-bit converter (including per-sensor
# gain spread and noise headroom at rest), and two-sigma separation yields
# 100+ distinguishable levels at the default noise.
DEFAULT_A_GAIN = 3.6e6
DEFAULT_D0_MM = 33.0
DEFAULT_FLOOR = 500.0
DEFAULT_SIGMA = 4.5
DEFAULT_ADC_BITS = 12
DEFAULT_REST_GAP_MM = 2.0


@dataclass(frozen=True)
class SensorModel:
    """Per-sensor response parameters (immutable after construction)."""

    a_gain: float = DEFAULT_A_GAIN
    d0_mm: float = DEFAULT_D0_MM
    floor_counts: float = DEFAULT_FLOOR
    noise_sigma_counts: float = DEFAULT_SIGMA
    adc_bits: int = DEFAULT_ADC_BITS
    rest_gap_mm: float = DEFAULT_REST_GAP_MM

    def __post_init__(self):
        if not self.a_gain > 0:
            raise ValidationError("a_gain must be > 0")
        if not self.d0_mm > 0:
            raise ValidationError("d0_mm must be > 0")
        if not 0 <= self.floor_counts < 2**self.adc_bits:
            raise ValidationError("floor_counts must be within the ADC range")
        if self.noise_sigma_counts < 0:
            raise ValidationError("noise_sigma_counts must be >= 0")
        if not 1 <= self.adc_bits <= 24:
            raise ValidationError("adc_bits must be in [1, 24]")
        if not self.rest_gap_mm > 0:
            raise ValidationError("rest_gap_mm must be > 0")

    @property
    def max_counts(self) -> int:
        return 2**self.adc_bits - 1


@dataclass(frozen=True)
class RawSample:
    """One quantized ADC reading with its sample instant."""

    counts: int
    t_s: float
    sensor_id: int


def expected_counts(model: SensorModel, distance_mm):
    """Noise-free response at a sensor-to-surface distance (real counts)."""
    d = np.asarray(distance_mm, dtype=np.float64)
    if np.any(d < 0):
        raise ValidationError("distance_mm must be >= 0")
    out = model.floor_counts + model.a_gain / (d + model.d0_mm) ** 2
    return float(out) if np.isscalar(distance_mm) else out


def expected_counts_at_displacement(model: SensorModel, displacement_mm):
    """Noise-free response with the lever at a key displacement from rest.

    Displacement below rest (settling undershoot) reads like rest: the sensed
    distance saturates at the rest gap.
    """
    disp = np.maximum(np.asarray(displacement_mm, dtype=np.float64), 0.0)
    out = expected_counts(model, model.rest_gap_mm + disp)
    return float(out) if np.isscalar(displacement_mm) else out


def sample(model: SensorModel, displacement_mm: float,
           rng: np.random.Generator, t_s: float = 0.0,
           sensor_id: int = 0) -> RawSample:
    """One noisy, quantized reading of the lever at ``displacement_mm``."""
    mean = expected_counts_at_displacement(model, displacement_mm)
    if model.noise_sigma_counts > 0:
        mean = mean + rng.normal(0.0, model.noise_sigma_counts)
    counts = int(np.clip(round(mean), 0, model.max_counts))
    return RawSample(counts=counts, t_s=t_s, sensor_id=sensor_id)


def sample_array(model: SensorModel, displacements_mm: np.ndarray,
                 rng: np.random.Generator) -> np.ndarray:
    """Vectorized noisy sampling; returns int counts."""
    mean = expected_counts_at_displacement(model, displacements_mm)
    if model.noise_sigma_counts > 0:
        mean = mean + rng.normal(0.0, model.noise_sigma_counts, size=mean.shape)
    return np.clip(np.rint(mean), 0, model.max_counts).astype(np.int64)


def distinguishable_levels(model: SensorModel, travel_mm: float,
                           separation_k: float = 2.0,
                           grid_points: int = 20000) -> int:
    """Count positions separable by >= k sigma of noise over the travel.

    Greedy walk from rest to full travel: a position is accepted when its
    expected counts differ from the previously accepted position by at least
    ``separation_k * noise_sigma_counts``.  With vanishing noise the step
    floor is one ADC code, so the count is capped by the distinct codes
    spanned.
    """
    if not separation_k > 0:
        raise ValidationError("separation_k must be > 0")
    if not travel_mm > 0:
        raise ValidationError("travel_mm must be > 0")
    step = max(separation_k * model.noise_sigma_counts, 1.0)
    grid = np.linspace(0.0, travel_mm, grid_points)
    counts = expected_counts_at_displacement(model, grid)
    levels = 1
    last = counts[0]
    for c in counts[1:]:
        if abs(c - last) >= step:
            levels += 1
            last = c
    return levels


def write_sensor_file(models: dict[int, SensorModel], path) -> None:
    """Persist per-sensor model parameters, one record per sensor id."""
    cp = configparser.ConfigParser()
    for sid in sorted(models):
        m = models[sid]
        cp[f"sensor {sid}"] = {
            "a_gain": repr(m.a_gain),
            "d0_mm": repr(m.d0_mm),
            "floor_counts": repr(m.floor_counts),
            "noise_sigma_counts": repr(m.noise_sigma_counts),
            "adc_bits": str(m.adc_bits),
            "rest_gap_mm": repr(m.rest_gap_mm),
        }
    with open(path, "w") as fh:
        cp.write(fh)


def read_sensor_file(path) -> dict[int, SensorModel]:
    cp = configparser.ConfigParser()
    with open(path) as fh:
        cp.read_file(fh)
    models: dict[int, SensorModel] = {}
    for section in cp.sections():
        if not section.startswith("sensor "):
            raise ValidationError(f"unexpected section {section!r}")
        sid = int(section.split(" ", 1)[1])
        s = cp[section]
        models[sid] = SensorModel(
            a_gain=float(s["a_gain"]),
            d0_mm=float(s["d0_mm"]),
            floor_counts=float(s["floor_counts"]),
            noise_sigma_counts=float(s["noise_sigma_counts"]),
            adc_bits=int(s["adc_bits"]),
            rest_gap_mm=float(s["rest_gap_mm"]),
        )
    return models


def vary_model(base: SensorModel, rng: np.random.Generator,
               gain_spread: float = 0.15, floor_spread: float = 0.05) -> SensorModel:
    """Per-sensor manufacturing/mounting variability around a base model."""
    return replace(
        base,
        a_gain=base.a_gain * (1.0 + gain_spread * rng.uniform(-1, 1)),
        floor_counts=base.floor_counts * (1.0 + floor_spread * rng.uniform(-1, 1)),
    )
