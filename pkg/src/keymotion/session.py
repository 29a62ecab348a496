"""Versioned session files: instrument, roster, calibration, and configs.

One JSON document holds everything the host needs to operate an instrument:
compass and action parameters, the board roster, per-sensor calibration
tables, detection and velocity configuration, and the active mode.  Loading
rejects unsupported schema versions and inconsistent rosters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .action import ActionConfig
from .board import DEFAULT_DWELL_US, DEFAULT_SCAN_RATE_HZ
from .calibration import CalibrationEntry, entry_from_dict, entry_to_dict
from .detect import DetectionConfig
from .errors import ValidationError
from .events import VelocityCurve, curve_from_dict, curve_to_dict
from .optics import SensorModel, vary_model

SCHEMA_VERSION = 1
MAX_SENSORS_PER_BOARD = 25


@dataclass
class BoardRosterEntry:
    address: int
    board_id: str
    first_sensor: int
    sensor_count: int


@dataclass
class SessionState:
    """In-memory form of a session file."""

    manuals: int = 2
    keys_per_manual: int = 61
    travel_mm: float = 9.0
    action: ActionConfig = field(default_factory=ActionConfig)
    boards: list[BoardRosterEntry] = field(default_factory=list)
    optics_base: SensorModel = field(default_factory=SensorModel)
    optics_seed: int = 1234
    optics_gain_spread: float = 0.15
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    velocity: VelocityCurve = field(default_factory=VelocityCurve)
    calibration: dict[int, CalibrationEntry] = field(default_factory=dict)
    mode: str = "midi"
    mode_subset: tuple[int, ...] = ()
    stream_rate_hz: int = 250
    scan_rate_hz: float = DEFAULT_SCAN_RATE_HZ
    dwell_us: int = DEFAULT_DWELL_US
    wire_latency_us: int = 50

    @property
    def sensor_count(self) -> int:
        return self.manuals * self.keys_per_manual

    def sensor_ids(self) -> range:
        return range(self.sensor_count)

    def key_for_sensor(self, sensor_id: int) -> tuple[int, int]:
        manual, key = divmod(sensor_id, self.keys_per_manual)
        return manual + 1, key + 1

    def sensor_for_key(self, manual: int, key: int) -> int:
        if not (1 <= manual <= self.manuals and 1 <= key <= self.keys_per_manual):
            raise ValidationError(
                f"key ({manual},{key}) outside the configured compass")
        return (manual - 1) * self.keys_per_manual + (key - 1)

    def key_map(self) -> dict[int, tuple[int, int]]:
        return {sid: self.key_for_sensor(sid) for sid in self.sensor_ids()}

    def sensor_owner(self) -> dict[int, int]:
        owner = {}
        for b in self.boards:
            for sid in range(b.first_sensor, b.first_sensor + b.sensor_count):
                owner[sid] = b.address
        return owner

    def sensor_models(self) -> dict[int, SensorModel]:
        """Per-sensor optics with deterministic unit-to-unit variability."""
        rng = np.random.default_rng(self.optics_seed)
        return {
            sid: vary_model(self.optics_base, rng,
                            gain_spread=self.optics_gain_spread)
            for sid in self.sensor_ids()
        }

    def validate(self) -> None:
        self.detection.validate_for_travel(self.travel_mm)
        covered = []
        for b in self.boards:
            if b.sensor_count > MAX_SENSORS_PER_BOARD:
                raise ValidationError(
                    f"board {b.address} has {b.sensor_count} sensors "
                    f"(max {MAX_SENSORS_PER_BOARD})")
            covered.extend(range(b.first_sensor, b.first_sensor + b.sensor_count))
        if sorted(covered) != list(self.sensor_ids()):
            raise ValidationError("board roster does not cover the compass")
        addresses = [b.address for b in self.boards]
        if len(set(addresses)) != len(addresses):
            raise ValidationError("duplicate board addresses in roster")
        for sid in self.calibration:
            if sid not in self.sensor_ids():
                raise ValidationError(
                    f"calibration entry for unknown sensor {sid}")


def default_boards(sensor_count: int) -> list[BoardRosterEntry]:
    """Chain of identical boards covering the compass, 25 sensors apiece."""
    boards = []
    first = 0
    address = 1
    while first < sensor_count:
        n = min(MAX_SENSORS_PER_BOARD, sensor_count - first)
        boards.append(BoardRosterEntry(
            address=address, board_id=f"pcb-{address:02d}",
            first_sensor=first, sensor_count=n))
        first += n
        address += 1
    return boards


def default_session(manuals: int = 2, keys_per_manual: int = 61,
                    pluck_points_mm: tuple[float, ...] = (5.5, 7.0)) -> SessionState:
    state = SessionState(
        manuals=manuals,
        keys_per_manual=keys_per_manual,
        action=ActionConfig(pluck_points_mm=pluck_points_mm),
    )
    state.boards = default_boards(state.sensor_count)
    state.validate()
    return state


def _action_to_dict(a: ActionConfig) -> dict:
    return {
        "travel_mm": a.travel_mm,
        "pluck_points_mm": list(a.pluck_points_mm),
        "unload_fraction": a.unload_fraction,
        "settle_freq_hz": a.settle_freq_hz,
        "settle_damping": a.settle_damping,
        "overshoot_mm": a.overshoot_mm,
        "velocity_jitter": a.velocity_jitter,
    }


def _action_from_dict(doc: dict) -> ActionConfig:
    return ActionConfig(
        travel_mm=float(doc.get("travel_mm", 9.0)),
        pluck_points_mm=tuple(doc.get("pluck_points_mm", ())),
        unload_fraction=float(doc.get("unload_fraction", 0.35)),
        settle_freq_hz=float(doc.get("settle_freq_hz", 18.0)),
        settle_damping=float(doc.get("settle_damping", 0.25)),
        overshoot_mm=float(doc.get("overshoot_mm", 0.35)),
        velocity_jitter=float(doc.get("velocity_jitter", 0.03)),
    )


def _detection_to_dict(d: DetectionConfig) -> dict:
    return {
        "on_window_mm": list(d.on_window_mm),
        "off_window_mm": list(d.off_window_mm),
        "rearm_mm": d.rearm_mm,
        "slope_feature_min": d.slope_feature_min,
        "feature_f_min": d.feature_f_min,
        "feature_sigma_min": d.feature_sigma_min,
        "feature_margin_mm": d.feature_margin_mm,
        "min_slope_mm_s": d.min_slope_mm_s,
        "min_slope_fraction": d.min_slope_fraction,
        "smooth_samples": d.smooth_samples,
    }


def _detection_from_dict(doc: dict) -> DetectionConfig:
    base = DetectionConfig()
    return DetectionConfig(
        on_window_mm=tuple(doc.get("on_window_mm", base.on_window_mm)),
        off_window_mm=tuple(doc.get("off_window_mm", base.off_window_mm)),
        rearm_mm=float(doc.get("rearm_mm", base.rearm_mm)),
        slope_feature_min=float(doc.get("slope_feature_min",
                                        base.slope_feature_min)),
        feature_f_min=float(doc.get("feature_f_min", base.feature_f_min)),
        feature_sigma_min=float(doc.get("feature_sigma_min",
                                        base.feature_sigma_min)),
        feature_margin_mm=float(doc.get("feature_margin_mm",
                                        base.feature_margin_mm)),
        min_slope_mm_s=float(doc.get("min_slope_mm_s", base.min_slope_mm_s)),
        min_slope_fraction=float(doc.get("min_slope_fraction",
                                         base.min_slope_fraction)),
        smooth_samples=int(doc.get("smooth_samples", base.smooth_samples)),
    )


def _optics_to_dict(m: SensorModel) -> dict:
    return {
        "a_gain": m.a_gain, "d0_mm": m.d0_mm, "floor_counts": m.floor_counts,
        "noise_sigma_counts": m.noise_sigma_counts, "adc_bits": m.adc_bits,
        "rest_gap_mm": m.rest_gap_mm,
    }


def _optics_from_dict(doc: dict) -> SensorModel:
    base = SensorModel()
    return SensorModel(
        a_gain=float(doc.get("a_gain", base.a_gain)),
        d0_mm=float(doc.get("d0_mm", base.d0_mm)),
        floor_counts=float(doc.get("floor_counts", base.floor_counts)),
        noise_sigma_counts=float(doc.get("noise_sigma_counts",
                                         base.noise_sigma_counts)),
        adc_bits=int(doc.get("adc_bits", base.adc_bits)),
        rest_gap_mm=float(doc.get("rest_gap_mm", base.rest_gap_mm)),
    )


def save_session(state: SessionState, path) -> None:
    doc = {
        "schema_version": SCHEMA_VERSION,
        "instrument": {
            "manuals": state.manuals,
            "keys_per_manual": state.keys_per_manual,
            "travel_mm": state.travel_mm,
            "action": _action_to_dict(state.action),
        },
        "boards": [
            {"address": b.address, "board_id": b.board_id,
             "first_sensor": b.first_sensor, "sensor_count": b.sensor_count}
            for b in state.boards
        ],
        "optics": {
            "base": _optics_to_dict(state.optics_base),
            "seed": state.optics_seed,
            "gain_spread": state.optics_gain_spread,
        },
        "detection": _detection_to_dict(state.detection),
        "velocity": curve_to_dict(state.velocity),
        "calibration": {
            str(sid): entry_to_dict(e)
            for sid, e in sorted(state.calibration.items())
        },
        "mode": {"mode": state.mode, "subset": list(state.mode_subset)},
        "timing": {
            "stream_rate_hz": state.stream_rate_hz,
            "scan_rate_hz": state.scan_rate_hz,
            "dwell_us": state.dwell_us,
            "wire_latency_us": state.wire_latency_us,
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_session(path) -> SessionState:
    with open(path) as fh:
        doc = json.load(fh)
    version = doc.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported session schema_version {version!r} "
            f"(supported: {SCHEMA_VERSION})")
    inst = doc["instrument"]
    timing = doc.get("timing", {})
    optics = doc.get("optics", {})
    state = SessionState(
        manuals=int(inst["manuals"]),
        keys_per_manual=int(inst["keys_per_manual"]),
        travel_mm=float(inst["travel_mm"]),
        action=_action_from_dict(inst.get("action", {})),
        boards=[
            BoardRosterEntry(
                address=int(b["address"]), board_id=str(b["board_id"]),
                first_sensor=int(b["first_sensor"]),
                sensor_count=int(b["sensor_count"]))
            for b in doc.get("boards", [])
        ],
        optics_base=_optics_from_dict(optics.get("base", {})),
        optics_seed=int(optics.get("seed", 1234)),
        optics_gain_spread=float(optics.get("gain_spread", 0.15)),
        detection=_detection_from_dict(doc.get("detection", {})),
        velocity=curve_from_dict(doc.get("velocity", {})),
        calibration={
            int(sid): entry_from_dict(e)
            for sid, e in doc.get("calibration", {}).items()
        },
        mode=doc.get("mode", {}).get("mode", "midi"),
        mode_subset=tuple(doc.get("mode", {}).get("subset", ())),
        stream_rate_hz=int(timing.get("stream_rate_hz", 250)),
        scan_rate_hz=float(timing.get("scan_rate_hz", DEFAULT_SCAN_RATE_HZ)),
        dwell_us=int(timing.get("dwell_us", DEFAULT_DWELL_US)),
        wire_latency_us=int(timing.get("wire_latency_us", 50)),
    )
    state.validate()
    return state
