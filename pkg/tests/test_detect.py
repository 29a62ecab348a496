import numpy as np
import pytest

from keymotion.action import (ActionConfig, DisplacementTrace, GestureSpec,
                              simulate_keystroke)
from keymotion.detect import (DetectionConfig, ThresholdDetector,
                              detect_pluck_features, find_press_phases)
from keymotion.errors import ValidationError
from keymotion.optics import sample_array

from conftest import double_manual_config, random_gesture, single_manual_config


def reconstructed(trace, entry, model, rng):
    counts = sample_array(model, trace.samples_mm, rng)
    return DisplacementTrace(trace.rate_hz, entry.displacement(counts))


def test_config_validation():
    with pytest.raises(ValidationError):
        DetectionConfig(on_window_mm=(5.5, 4.5))
    with pytest.raises(ValidationError):
        DetectionConfig(rearm_mm=5.0)
    with pytest.raises(ValidationError):
        DetectionConfig(slope_feature_min=0.9)
    DetectionConfig().validate_for_travel(9.0)
    with pytest.raises(ValidationError):
        DetectionConfig(on_window_mm=(4.5, 9.5)).validate_for_travel(9.0)


# -- threshold state machine -------------------------------------------------


def feed(detector, rows):
    events = []
    for t_us, mm in rows:
        events.extend(detector.update(t_us, mm))
    return events


def ramp(t0_us, mm0, mm1, n, dt_us=4000):
    return [(t0_us + i * dt_us, mm0 + (mm1 - mm0) * i / (n - 1))
            for i in range(n)]


def test_single_keystroke_one_on_one_off():
    det = ThresholdDetector(DetectionConfig())
    rows = (ramp(0, 0.0, 9.0, 40) + ramp(160_000, 9.0, 9.0, 10)
            + ramp(200_000, 9.0, 0.0, 40))
    events = feed(det, rows)
    kinds = [e.kind for e in events]
    assert kinds == ["on", "off"]
    on, off = events
    assert on.exit_us > on.entry_us
    assert off.exit_us > off.entry_us
    assert off.entry_us > on.exit_us


def test_noise_jitter_at_edge_produces_no_events():
    # stationary key at (on_lo - 3 sigma) with default-noise-sized jitter
    cfg = DetectionConfig()
    det = ThresholdDetector(cfg)
    rng = np.random.default_rng(8)
    sigma_mm = 0.05
    level = cfg.on_window_mm[0] - 3 * sigma_mm
    rows = [(i * 4000, level + rng.normal(0, sigma_mm)) for i in range(2500)]
    assert feed(det, rows) == []


def test_aborted_press_no_event():
    det = ThresholdDetector(DetectionConfig())
    rows = ramp(0, 0.0, 5.0, 20) + ramp(80_000, 5.0, 0.0, 20)
    assert feed(det, rows) == []


def test_fast_press_single_step_crossing():
    det = ThresholdDetector(DetectionConfig())
    # one sample step jumps across the whole on window
    events = feed(det, [(0, 0.0), (4000, 9.0)])
    assert [e.kind for e in events] == ["on"]
    on = events[0]
    assert 0 <= on.entry_us <= on.exit_us <= 4000


def test_alternation_over_random_walk():
    det = ThresholdDetector(DetectionConfig())
    rng = np.random.default_rng(11)
    mm = 0.0
    kinds = []
    for i in range(30_000):
        mm = float(np.clip(mm + rng.normal(0, 0.4), -0.3, 9.0))
        for ev in det.update(i * 2000, mm):
            kinds.append(ev.kind)
    assert all(k != kinds[i] for i, k in enumerate(kinds[1:]))
    if kinds:
        assert kinds[0] == "on"


def test_mid_stroke_attach_does_not_fire():
    det = ThresholdDetector(DetectionConfig())
    rows = ramp(0, 6.0, 9.0, 10)  # first sample already above the window
    assert feed(det, rows) == []


def test_simulated_single_manual_trace_one_on_one_off():
    cfg = single_manual_config()
    trace, _ = simulate_keystroke(cfg, GestureSpec(release_style="rapid"),
                                  250.0, 3)
    det = ThresholdDetector(DetectionConfig())
    events = []
    for t, mm in zip(trace.times(), trace.samples_mm):
        events.extend(det.update(int(t * 1e6), mm))
    assert [e.kind for e in events] == ["on", "off"]


# -- press phases -------------------------------------------------------------


def test_find_press_phases_isolates_rises():
    cfg = single_manual_config()
    trace, _ = simulate_keystroke(cfg, GestureSpec(), 250.0, 5)
    phases = find_press_phases(trace.samples_mm, 9.0)
    assert len(phases) == 1
    start, end = phases[0]
    x = trace.samples_mm[start:end]
    assert np.all(np.diff(x) > -1e-9)
    assert x.min() >= 0.2 and x.max() <= 8.8


def test_find_press_phases_empty_for_flat_trace():
    assert find_press_phases(np.zeros(1000), 9.0) == []


# -- feature detection ---------------------------------------------------------


def test_features_disengaged_empty(default_model, anchored_entry):
    rng = np.random.default_rng(77)
    for i in range(20):
        trace, _ = simulate_keystroke(ActionConfig(), random_gesture(rng),
                                      250.0, 500 + i)
        rec = reconstructed(trace, anchored_entry, default_model, rng)
        assert detect_pluck_features(rec) == []


def test_features_single_manual_within_half_mm(default_model, anchored_entry):
    rng = np.random.default_rng(78)
    cfg = single_manual_config()
    for i in range(20):
        trace, _ = simulate_keystroke(cfg, random_gesture(rng), 250.0, 600 + i)
        rec = reconstructed(trace, anchored_entry, default_model, rng)
        feats = detect_pluck_features(rec)
        assert len(feats) >= 1
        assert any(abs(mm - 5.5) <= 0.5 for _, mm in feats)


def test_features_double_manual_both_plucks(default_model, anchored_entry):
    rng = np.random.default_rng(79)
    cfg = double_manual_config()
    got = 0
    for i in range(20):
        trace, _ = simulate_keystroke(
            cfg, random_gesture(rng, press_range=(0.14, 0.26)), 250.0, 700 + i)
        rec = reconstructed(trace, anchored_entry, default_model, rng)
        feats = detect_pluck_features(rec)
        m1 = any(abs(mm - 5.5) <= 0.5 for _, mm in feats)
        m2 = any(abs(mm - 7.0) <= 0.5 for _, mm in feats)
        t_sorted = [t for t, _ in feats] == sorted(t for t, _ in feats)
        assert t_sorted
        got += m1 and m2
    assert got >= 19


def test_features_clean_trace_exact():
    # sigma = 0 ground truth: knots recovered almost exactly
    cfg = double_manual_config(velocity_jitter=0.0)
    trace, events = simulate_keystroke(
        cfg, GestureSpec(press_duration_s=0.18), 250.0, 1)
    feats = detect_pluck_features(trace)
    assert len(feats) == 2
    for (t_f, mm_f), t_true, mm_true in zip(
            feats, events.pluck_times_s, events.pluck_displacements_mm):
        assert abs(mm_f - mm_true) <= 0.15
        assert abs(t_f - t_true) <= 2 / 250.0


def test_features_rate_validation(anchored_entry):
    trace = DisplacementTrace(50.0, np.zeros(100))
    with pytest.raises(ValidationError):
        detect_pluck_features(trace)


def test_features_at_most_one_per_mm(default_model, anchored_entry):
    rng = np.random.default_rng(80)
    cfg = double_manual_config()
    for i in range(10):
        trace, _ = simulate_keystroke(
            cfg, random_gesture(rng, press_range=(0.14, 0.26)), 250.0, 800 + i)
        rec = reconstructed(trace, anchored_entry, default_model, rng)
        feats = detect_pluck_features(rec)
        mms = sorted(mm for _, mm in feats)
        assert all(b - a >= 1.0 for a, b in zip(mms, mms[1:]))
