import numpy as np
import pytest

from keymotion.calibration import (calibrate_sensor, displacement,
                                   entry_from_dict, entry_to_dict)
from keymotion.errors import CalibrationError
from keymotion.optics import SensorModel, expected_counts_at_displacement


def counts_at(model, mm):
    return expected_counts_at_displacement(model, mm)


def test_endpoint_exactness_forced():
    entry = calibrate_sensor(3, [3500] * 25, [800] * 25)
    assert entry.displacement(3500) == 0.0
    assert entry.displacement(800) == 9.0


def test_identical_captures_rejected():
    with pytest.raises(CalibrationError):
        calibrate_sensor(0, [1000] * 25, [1000] * 25)


def test_insufficient_samples_rejected():
    with pytest.raises(CalibrationError):
        calibrate_sensor(0, [3500] * 10, [800] * 25)


def test_small_span_vs_noise_rejected():
    rng = np.random.default_rng(0)
    rest = rng.normal(1000, 50, 40)
    full = rng.normal(1050, 50, 40)  # span ~1x noise, needs 10x
    with pytest.raises(CalibrationError):
        calibrate_sensor(0, rest, full)


def test_non_monotone_anchors_rejected():
    with pytest.raises(CalibrationError):
        calibrate_sensor(0, [3500] * 25, [800] * 25,
                         anchors=[(900, 4.0), (2000, 6.0)])
    with pytest.raises(CalibrationError):
        calibrate_sensor(0, [3500] * 25, [800] * 25,
                         anchors=[(2000, 9.5)])  # outside travel


def test_median_robust_to_transient():
    rest = [3500] * 24 + [100]  # one stray transient
    entry = calibrate_sensor(0, rest, [800] * 25)
    assert entry.raw_rest == 3500


def test_clamping_beyond_endpoints():
    entry = calibrate_sensor(0, [3500] * 25, [800] * 25)
    assert entry.displacement(4000) == 0.0
    assert entry.displacement(100) == 9.0
    mid = entry.displacement(2150)
    assert 0.0 < mid < 9.0


def test_monotone_over_full_count_grid(anchored_entry):
    grid = np.arange(0, 4096, dtype=float)
    mm = anchored_entry.displacement(grid)
    assert np.all(np.diff(mm) <= 1e-12)  # counts up => displacement down
    assert mm.min() >= 0.0 and mm.max() <= 9.0


def test_endpoint_only_accuracy_vs_ground_truth_inverse(default_model):
    # sigma = 0: captures are the exact expected counts
    model = SensorModel(noise_sigma_counts=0.0)
    entry = calibrate_sensor(
        0, [counts_at(model, 0.0)] * 25, [counts_at(model, 9.0)] * 25)
    est = entry.displacement(counts_at(model, 4.5))
    assert abs(est - 4.5) <= 1.0


def test_three_anchor_accuracy_vs_ground_truth_inverse(default_model):
    model = SensorModel(noise_sigma_counts=0.0)
    anchors = [(counts_at(model, mm), mm) for mm in (2.25, 4.5, 6.75)]
    entry = calibrate_sensor(
        0, [counts_at(model, 0.0)] * 25, [counts_at(model, 9.0)] * 25,
        anchors=anchors)
    grid = np.linspace(0.0, 9.0, 181)
    est = entry.displacement(counts_at(model, grid))
    assert np.max(np.abs(est - grid)) <= 0.2


def test_gain_variation_calibrates_to_same_displacement():
    # two responses differing in gain; after calibration both report the
    # same displacement: exact at the endpoints, <= 0.2 mm divergence between
    base = SensorModel(noise_sigma_counts=0.0, a_gain=1.7e6)
    scaled = SensorModel(noise_sigma_counts=0.0, a_gain=3.4e6)
    entries = {}
    for name, model in (("base", base), ("scaled", scaled)):
        assert counts_at(model, 0.0) < model.max_counts
        entries[name] = calibrate_sensor(
            0, [counts_at(model, 0.0)] * 25, [counts_at(model, 9.0)] * 25)
    for mm in (0.0, 9.0):
        a = entries["base"].displacement(counts_at(base, mm))
        b = entries["scaled"].displacement(counts_at(scaled, mm))
        assert a == b == mm
    grid = np.linspace(0.5, 8.5, 33)
    a = entries["base"].displacement(counts_at(base, grid))
    b = entries["scaled"].displacement(counts_at(scaled, grid))
    assert np.max(np.abs(np.asarray(a) - np.asarray(b))) <= 0.2


def test_displacement_function_and_code_path_agree(anchored_entry):
    codes = np.arange(0, 4096, 17)
    via_float = displacement(anchored_entry, codes.astype(float))
    via_code = np.array([anchored_entry.displacement_code(int(c)) for c in codes])
    assert np.allclose(via_float, via_code, atol=0)


def test_entry_dict_round_trip(anchored_entry):
    doc = entry_to_dict(anchored_entry)
    back = entry_from_dict(doc)
    assert back.raw_rest == anchored_entry.raw_rest
    assert back.raw_full == anchored_entry.raw_full
    assert back.anchors == anchored_entry.anchors
    grid = np.linspace(0, 4095, 97)
    assert np.allclose(back.displacement(grid), anchored_entry.displacement(grid))
