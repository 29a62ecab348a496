"""Optical key-lever motion capture for historical keyboard instruments.

A desk-scale software twin of a multi-board optical key-sensing installation:
key-action simulation, reflective-sensor modelling, bank-scanned board
emulation with local event detection, a framed multi-drop bus, host-side
calibration and velocity mapping, and MIDI/CSV corpus output.
"""

__version__ = "0.1.0"

from .action import (ActionConfig, DisplacementTrace, GestureSpec,
                     GroundTruthEvents, scripted_performance,
                     simulate_keystroke)
from .calibration import CalibrationEntry, calibrate_sensor, displacement
from .detect import DetectionConfig, ThresholdDetector, detect_pluck_features
from .events import KeyEvent, VelocityCurve, velocity_from_time
from .optics import RawSample, SensorModel, distinguishable_levels, sample
from .session import SessionState, default_session, load_session, save_session

__all__ = [
    "ActionConfig", "GestureSpec", "DisplacementTrace", "GroundTruthEvents",
    "simulate_keystroke", "scripted_performance",
    "SensorModel", "RawSample", "sample", "distinguishable_levels",
    "CalibrationEntry", "calibrate_sensor", "displacement",
    "DetectionConfig", "ThresholdDetector", "detect_pluck_features",
    "VelocityCurve", "KeyEvent", "velocity_from_time",
    "SessionState", "default_session", "load_session", "save_session",
    "__version__",
]
