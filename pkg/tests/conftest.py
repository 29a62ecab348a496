import numpy as np
import pytest

from keymotion.action import ActionConfig, GestureSpec
from keymotion.calibration import calibrate_sensor
from keymotion.instrument import Instrument
from keymotion.optics import SensorModel, expected_counts_at_displacement, sample_array
from keymotion.session import default_session

TRAVEL_MM = 9.0


@pytest.fixture(scope="session")
def default_model():
    return SensorModel()


@pytest.fixture(scope="session")
def anchored_entry(default_model):
    """Calibration entry from noisy captures with three mid anchors."""
    rng = np.random.default_rng(42)

    def capture(mm, n=25):
        return sample_array(default_model, np.full(n, mm), rng)

    anchors = [(capture(mm), mm) for mm in (2.25, 4.5, 6.75)]
    return calibrate_sensor(0, capture(0.0), capture(TRAVEL_MM),
                            anchors=anchors)


@pytest.fixture(scope="session")
def clean_entry(default_model):
    """Noise-free endpoint-only calibration entry."""
    e0 = expected_counts_at_displacement(default_model, 0.0)
    e9 = expected_counts_at_displacement(default_model, TRAVEL_MM)
    return calibrate_sensor(0, [e0] * 25, [e9] * 25)


def single_manual_config(**kw) -> ActionConfig:
    return ActionConfig(pluck_points_mm=(5.5,), **kw)


def double_manual_config(**kw) -> ActionConfig:
    return ActionConfig(pluck_points_mm=(5.5, 7.0), **kw)


def random_gesture(rng, press_range=(0.08, 0.25)) -> GestureSpec:
    return GestureSpec(
        onset_s=0.05,
        press_duration_s=float(rng.uniform(*press_range)),
        hold_s=float(rng.uniform(0.05, 0.3)),
        release_duration_s=float(rng.uniform(0.06, 0.15)),
        release_style="rapid" if rng.random() < 0.5 else "held",
    )


def small_instrument(keys=8, pluck_points=(5.5,), seed=11, **kw) -> Instrument:
    state = default_session(manuals=1, keys_per_manual=keys,
                            pluck_points_mm=pluck_points)
    inst = Instrument(state, seed=seed, **kw)
    inst.start()
    inst.enumerate()
    return inst
