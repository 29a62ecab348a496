import numpy as np
import pytest

from keymotion import protocol as P
from keymotion.action import GestureSpec
from keymotion.errors import CalibrationError, ConfigError, ValidationError
from keymotion.events import (EventAggregator, KeyEvent, VelocityCurve,
                              velocity_from_time)
from keymotion.host import MODE_MIDI, MODE_POSITION_STREAM, HostMode
from keymotion.session import default_session
from keymotion.instrument import Instrument

from conftest import small_instrument


# -- velocity curve -----------------------------------------------------------


def test_velocity_clamp_endpoints():
    curve = VelocityCurve()
    assert velocity_from_time(curve, 0.001) == 127
    assert velocity_from_time(curve, 0.005) == 127
    assert velocity_from_time(curve, 0.105) == 1
    assert velocity_from_time(curve, 2.0) == 1


def test_velocity_linear_midpoint_closed_form():
    curve = VelocityCurve(t_min_s=0.005, t_max_s=0.105, v_min=1, v_max=127,
                          shape="linear")
    # u = (0.105 - 0.055) / 0.1 = 0.5 -> v = round(1 + 0.5 * 126) = 64
    assert velocity_from_time(curve, 0.055) == 64


def test_velocity_gamma_one_equals_linear():
    lin = VelocityCurve(shape="linear")
    gam = VelocityCurve(shape="gamma", gamma=1.0)
    for t in np.linspace(0.005, 0.105, 11):
        assert velocity_from_time(lin, float(t)) == velocity_from_time(gam, float(t))


def test_velocity_strictly_decreasing_between_bounds():
    for curve in (VelocityCurve(), VelocityCurve(shape="gamma", gamma=0.6),
                  VelocityCurve(shape="gamma", gamma=2.0)):
        ts = np.linspace(curve.t_min_s, curve.t_max_s, 200)
        levels = [curve.level(float(t)) for t in ts]
        assert all(b < a for a, b in zip(levels, levels[1:]))
        vels = [velocity_from_time(curve, float(t)) for t in ts]
        assert all(b <= a for a, b in zip(vels, vels[1:]))


def test_velocity_validation():
    with pytest.raises(ValidationError):
        VelocityCurve(t_min_s=0.2, t_max_s=0.1)
    with pytest.raises(ValidationError):
        VelocityCurve(v_min=0)
    with pytest.raises(ValidationError):
        velocity_from_time(VelocityCurve(), 0.0)


# -- aggregation --------------------------------------------------------------


def make_aggregator():
    return EventAggregator({7: (1, 3)}, VelocityCurve())


def test_aggregator_translates_and_maps_velocity():
    agg = make_aggregator()
    ev = agg.process(7, "on", 1_000_000, 1_055_000)
    assert ev == KeyEvent("note_on", 1, 3, 1.055, 0.055, 64)


def test_aggregator_drops_duplicate_on():
    agg = make_aggregator()
    assert agg.process(7, "on", 0, 55_000) is not None
    assert agg.process(7, "on", 100_000, 155_000) is None
    assert agg.diagnostics.stuck_notes_dropped == 1
    assert agg.process(7, "off", 200_000, 255_000) is not None
    assert agg.open_notes() == []


def test_aggregator_unknown_sensor_counted():
    agg = make_aggregator()
    assert agg.process(99, "on", 0, 1000) is None
    assert agg.diagnostics.unknown_sensor_events == 1


def test_no_stuck_notes_over_random_sequences():
    agg = make_aggregator()
    rng = np.random.default_rng(3)
    for i in range(500):
        agg.process(7, "on" if rng.random() < 0.5 else "off",
                    i * 1000, i * 1000 + 500)
    assert len(agg.open_notes()) in (0, 1)


def test_off_velocity_from_release_window_same_curve():
    agg = make_aggregator()
    on = agg.process(7, "on", 0, 55_000)
    off = agg.process(7, "off", 100_000, 155_000)
    assert off.kind == "note_off"
    assert off.velocity == on.velocity  # same traversal, same curve


# -- host session over the bus ---------------------------------------------------


def test_scripted_calibration_produces_valid_entries():
    inst = small_instrument(keys=8)
    inst.scripted_calibration(n_samples=25)
    assert len(inst.host.calibration) == 8
    for entry in inst.host.calibration.values():
        assert entry.displacement(entry.raw_rest) == 0.0
        assert entry.displacement(entry.raw_full) == 9.0
        grid = np.arange(0, 4096, 16, dtype=float)
        mm = entry.displacement(grid)
        assert np.all(np.diff(mm) <= 1e-12)


def test_calibration_invariance_gain_doubling():
    # doubling a sensor's gain and recalibrating leaves note-on timing
    # within one sample period (sigma = 0 optics)
    times = {}
    for gain in (1.7e6, 3.4e6):
        state = default_session(manuals=1, keys_per_manual=4,
                                pluck_points_mm=(5.5,))
        state.optics_base = type(state.optics_base)(
            a_gain=gain, noise_sigma_counts=0.0)
        state.optics_gain_spread = 0.0
        inst = Instrument(state, seed=5)
        inst.start()
        inst.enumerate()
        inst.scripted_calibration(n_samples=20)
        perf = inst.load_score([((1, 2), 0.1, GestureSpec())])
        events = inst.run_performance(perf)
        ons = [e for e in events if e.kind == "note_on"]
        assert len(ons) == 1
        times[gain] = ons[0].t_s - inst.performance_t0_s
    assert abs(times[1.7e6] - times[3.4e6]) <= 1 / 250.0


def test_mode_switch_suspends_midi_and_round_trips():
    inst = small_instrument(keys=4)
    inst.scripted_calibration(n_samples=20)
    cal_before = dict(inst.host.calibration)

    inst.host.set_mode(HostMode(mode=MODE_POSITION_STREAM, subset=(1,)))
    assert inst.boards[0].mode.mode == P.MODE_SUBSET_STREAM
    # a keystroke in stream mode produces positions, not MIDI events
    from keymotion.action import KeystrokeMotion

    motion = KeystrokeMotion(inst.state.action, GestureSpec(),
                             np.random.default_rng(0))
    inst.world.inject_motion((1, 2), motion,
                             inst.scheduler.now_us / 1e6 + 0.02)
    inst.scheduler.run_for(800_000)
    assert inst.host.events == []
    assert len(inst.host.positions) >= 100

    inst.host.set_mode(HostMode(mode=MODE_MIDI))
    assert inst.boards[0].mode.mode == P.MODE_EVENT
    assert inst.host.calibration == cal_before


def test_mode_rejected_during_capture_and_empty_subset():
    inst = small_instrument(keys=4)
    with pytest.raises(ConfigError):
        HostMode(mode=MODE_POSITION_STREAM, subset=())
    inst.host.capturing = True
    with pytest.raises(ConfigError):
        inst.host.set_mode(HostMode(mode=MODE_MIDI))


def test_recalibrating_one_sensor_changes_only_that_entry():
    inst = small_instrument(keys=6)
    inst.scripted_calibration(n_samples=20)
    before = dict(inst.host.calibration)
    inst.scripted_calibration(sensor_ids=[2], n_samples=20)
    after = inst.host.calibration
    assert after[2].captured_at != before[2].captured_at
    for sid in (0, 1, 3, 4, 5):
        assert after[sid] is before[sid]


def test_displacement_of_requires_calibration():
    inst = small_instrument(keys=4)
    with pytest.raises(CalibrationError):
        inst.host.displacement_of(0, 2000)


def test_full_instrument_calibration_122_sensors():
    state = default_session()  # two manuals, 61 keys each, 5 boards
    inst = Instrument(state, seed=13)
    inst.start()
    inst.enumerate()
    inst.scripted_calibration(n_samples=20)
    assert len(inst.host.calibration) == 122
    for entry in inst.host.calibration.values():
        assert entry.displacement(entry.raw_rest) == 0.0
        assert entry.displacement(entry.raw_full) == 9.0


def test_status_addressing_on_five_board_bus():
    state = default_session()
    inst = Instrument(state, seed=1)
    inst.start()
    inst.enumerate()
    status = inst.host.status(3)
    assert status.address == 3
    assert status.board_id == "pcb-03"
    # only board 3 answered: no stray replies left queued
    assert inst.host._inbox == []


def test_events_in_stream_mode_counted_not_emitted():
    inst = small_instrument(keys=4)
    inst.scripted_calibration(n_samples=20)
    inst.host.mode = HostMode(mode=MODE_POSITION_STREAM, subset=(0,))
    msg = P.KeyEventRaw(0, True, 1000, 2000)
    inst.host._dispatch(P.DecodedFrame(address=1, seq=0, message=msg))
    assert inst.host.events == []
    assert inst.host.diagnostics.events_in_stream_mode == 1
