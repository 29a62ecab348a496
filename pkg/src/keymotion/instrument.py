"""Full-instrument simulation harness: boards + wire + host from a session.

This is the end-to-end path the CLI and the streaming service drive: a
scripted performance (or calibration fixture) moves the simulated key levers,
board emulators scan their sensors and detect events locally, frames cross
the simulated bus, and the host aggregates instrument-level key events.
Everything advances on one deterministic microsecond clock.
"""

from __future__ import annotations

import numpy as np

from .action import Performance, build_performance
from .board import BoardConfig, BoardEmulator
from .errors import ConfigError
from .host import MODE_MIDI, HostMode, HostSession
from .session import SessionState
from .sim import Fixture, Scheduler, World
from .wire import CorruptionModel, WireSim

# Scripted calibration holds every key at these fractions of full travel for
# the mid-curve anchors.
DEFAULT_ANCHOR_FRACTIONS = (0.25, 0.5, 0.75)

# Extra simulated time after the last gesture so release events drain.
RUN_TAIL_S = 0.5


class Instrument:
    """One simulated instrument bus built from a session."""

    def __init__(self, state: SessionState, seed: int = 0,
                 corruption: CorruptionModel | None = None,
                 keep_enable_log: bool = False,
                 reverse_chain: bool = False):
        state.validate()
        self.state = state
        self.seed = seed
        self.scheduler = Scheduler()
        self.wire = WireSim(self.scheduler, latency_us=state.wire_latency_us,
                            corruption=corruption, seed=seed ^ 0x5EED)
        self.fixture = Fixture()
        self.world = World(state.key_map(), performance=None,
                           fixture=self.fixture)
        self.sensor_models = state.sensor_models()

        self.boards: list[BoardEmulator] = []
        roster = list(state.boards)
        if reverse_chain:
            roster = roster[::-1]
        for entry in roster:
            ids = tuple(range(entry.first_sensor,
                              entry.first_sensor + entry.sensor_count))
            cfg = BoardConfig(
                address=entry.address,
                sensor_ids=ids,
                key_map={sid: state.key_for_sensor(sid) for sid in ids},
                board_id=entry.board_id,
                scan_rate_hz=state.scan_rate_hz,
                dwell_us=state.dwell_us,
            )
            board = BoardEmulator(
                cfg,
                sensors={sid: self.sensor_models[sid] for sid in ids},
                world=self.world,
                scheduler=self.scheduler,
                send=self.wire.board_send,
                detection=state.detection,
                travel_mm=state.travel_mm,
                seed=seed * 251 + entry.address,
                keep_enable_log=keep_enable_log,
            )
            self.wire.attach_board(board.on_wire_bytes, label=entry.board_id)
            self.boards.append(board)

        self.host = HostSession(
            self.wire, self.scheduler,
            key_map=state.key_map(),
            sensor_owner=state.sensor_owner(),
            travel_mm=state.travel_mm,
            detection=state.detection,
            velocity=state.velocity,
            stream_rate_hz=state.stream_rate_hz,
            sounding=bool(state.action.pluck_points_mm),
        )
        self.host.calibration.update(state.calibration)

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        for board in self.boards:
            board.start()

    def board_at(self, address: int) -> BoardEmulator:
        for board in self.boards:
            if board.config.address == address:
                return board
        raise ConfigError(f"no board at address {address}")

    def sensors_of(self, address: int) -> tuple[int, ...]:
        return self.board_at(address).config.sensor_ids

    def enumerate(self):
        return self.host.enumerate_boards()

    # -- calibration ---------------------------------------------------------

    def scripted_calibration(self, sensor_ids=None, n_samples: int = 25,
                             anchor_fractions=DEFAULT_ANCHOR_FRACTIONS,
                             push: bool = True) -> None:
        """Drive the fixture through rest/full/anchor holds and calibrate.

        The simulator can hold every key at an exact displacement at once, so
        a full-instrument calibration is a handful of capture phases rather
        than a per-key ritual.  ``sensor_ids`` limits the run (e.g. a single
        re-capture); omitted means the whole compass.
        """
        state = self.state
        wanted = set(state.sensor_ids() if sensor_ids is None else sensor_ids)
        positions = [0.0, state.travel_mm]
        positions += [f * state.travel_mm for f in anchor_fractions]

        self.host.capturing = True
        try:
            captures: dict[float, dict[int, list[int]]] = {}
            for mm in positions:
                self.fixture.hold_all(mm)
                self.scheduler.run_for(2_000)  # let levers "settle"
                per_sensor: dict[int, list[int]] = {}
                for board in self.boards:
                    ids = [s for s in board.config.sensor_ids if s in wanted]
                    if not ids:
                        continue
                    got = self.host.capture_counts(board.config.address, ids,
                                                   n_samples=n_samples)
                    per_sensor.update(got)
                captures[mm] = per_sensor
            self.fixture.release()

            anchor_mms = positions[2:]
            for sid in sorted(wanted):
                anchors = [
                    (captures[mm][sid], mm) for mm in sorted(anchor_mms)
                ]
                self.host.calibrate_from_captures(
                    sid,
                    rest=captures[0.0][sid],
                    full=captures[state.travel_mm][sid],
                    anchors=anchors,
                )
        finally:
            self.host.capturing = False
            self.fixture.release()

        if push:
            for board in self.boards:
                ids = [s for s in board.config.sensor_ids if s in wanted]
                if ids:
                    self.host.push_calibration(board.config.address, ids)

    # -- performance ---------------------------------------------------------

    def load_score(self, score_entries) -> Performance:
        """Build and install the performance world for a score.

        Entries are ``((manual, key), onset_s, GestureSpec)`` with onsets
        relative to the start of the performance; the performance itself
        begins slightly after the current session instant (the session clock
        has usually already advanced through enumeration and calibration).
        """
        state = self.state

        def in_compass(key) -> bool:
            manual, k = key
            return 1 <= manual <= state.manuals and 1 <= k <= state.keys_per_manual

        perf = build_performance(state.action, score_entries,
                                 rng_seed=self.seed, compass=in_compass)
        self.world.performance = perf
        self.world.performance_t0_s = self.scheduler.now_us / 1e6 + 0.01
        return perf

    @property
    def performance_t0_s(self) -> float:
        return self.world.performance_t0_s

    def run_performance(self, perf: Performance,
                        tail_s: float = RUN_TAIL_S) -> list:
        """Run the full bus until the performance (plus tail) completes."""
        if self.host.mode.mode != MODE_MIDI:
            self.host.set_mode(HostMode(mode=MODE_MIDI))
        self.start()
        end_us = int((self.world.performance_t0_s + perf.duration_s + tail_s) * 1e6)
        self.scheduler.run_until(end_us)
        return list(self.host.events)

    def reconstructed_trace(self, key, rate_hz: float, duration_s: float,
                            seed_salt: int = 0):
        """Offline sensing chain for analysis: world -> optics -> calibration.

        Samples the world at ``rate_hz`` through the key's sensor model and
        maps counts back through the host calibration, i.e. what the host
        would see in position-streaming mode at that rate.
        """
        from .action import DisplacementTrace
        from .optics import sample_array

        state = self.state
        sid = state.sensor_for_key(*key)
        entry = self.host.calibration.get(sid)
        if entry is None:
            raise ConfigError(f"sensor {sid} is not calibrated")
        n = int(np.ceil(duration_s * rate_hz)) + 1
        t = np.arange(n) / rate_hz
        truth = np.array([
            self.world.performance.displacement_at(key, x) for x in t
        ]) if self.world.performance is not None else np.zeros(n)
        rng = np.random.default_rng((self.seed * 9176 + sid) ^ seed_salt)
        counts = sample_array(self.sensor_models[sid], truth, rng)
        mm = entry.displacement(counts)
        return DisplacementTrace(rate_hz, np.asarray(mm)), truth
