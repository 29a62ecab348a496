"""Sensor-board emulation: scanning, local event detection, command handling.

Each board owns a row of reflective sensors grouped into banks of at most
four per converter.  Within a bank exactly one sensor is enabled at a time;
banks advance through their slots in parallel, so a full sweep takes
``largest_bank * dwell`` regardless of sensor count.  Boards run locally
against a host-pushed calibration table, detect key events with the windowed
hysteresis state machine, and transmit event messages asynchronously.  They
answer status queries, explicit polls, mode changes, and calibration pushes
addressed to them (or broadcast), and stay silent for other addresses.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import optics, protocol
from .calibration import CalibrationEntry
from .detect import DetectionConfig, ThresholdDetector
from .errors import ConfigError, ValidationError
from .optics import RawSample, SensorModel
from .protocol import (
    Ack, CalibPush, Enumerate, EnumerateReply, KeyEventRaw, Message, ModeSet,
    Nack, PollRequest, PollResponse, PositionBatch, StatusRequest,
    StatusResponse,
)

DEFAULT_DWELL_US = 200
DEFAULT_SCAN_RATE_HZ = 1000.0
BANK_SIZE = 4
ENUM_SLOT_US = 500

# Raw-count swing an uncalibrated sensor must show before the board counts a
# suppressed would-be event.
SUPPRESS_SWING_COUNTS = 200


def make_banks(sensor_ids, bank_size: int = BANK_SIZE) -> tuple[tuple[int, ...], ...]:
    """Partition sensors into consecutive banks of at most ``bank_size``."""
    ids = list(sensor_ids)
    return tuple(tuple(ids[i:i + bank_size]) for i in range(0, len(ids), bank_size))


@dataclass(frozen=True)
class BoardConfig:
    """Identity and scan geometry of one sensor board."""

    address: int
    sensor_ids: tuple[int, ...]
    key_map: dict
    board_id: str = ""
    banks: tuple[tuple[int, ...], ...] = ()
    scan_rate_hz: float = DEFAULT_SCAN_RATE_HZ
    dwell_us: int = DEFAULT_DWELL_US

    def __post_init__(self):
        if not protocol.MIN_BOARD_ADDR <= self.address <= protocol.MAX_BOARD_ADDR:
            raise ValidationError(
                f"board address must be in "
                f"{protocol.MIN_BOARD_ADDR}..{protocol.MAX_BOARD_ADDR}")
        ids = tuple(self.sensor_ids)
        object.__setattr__(self, "sensor_ids", ids)
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate sensor ids on one board")
        banks = self.banks or make_banks(ids)
        object.__setattr__(self, "banks", banks)
        flat = [s for bank in banks for s in bank]
        if sorted(flat) != sorted(ids):
            raise ValidationError("banks must partition the board's sensors")
        if any(len(bank) > BANK_SIZE for bank in banks):
            raise ValidationError(f"banks are limited to {BANK_SIZE} sensors")
        mapped = [self.key_map[s] for s in ids if s in self.key_map]
        if len(set(mapped)) != len(mapped):
            raise ValidationError("key_map must be injective")
        if not self.board_id:
            object.__setattr__(self, "board_id", f"pcb-{self.address:02d}")
        if not self.scan_rate_hz > 0:
            raise ValidationError("scan_rate_hz must be > 0")
        largest = max((len(b) for b in banks), default=0)
        if largest * self.dwell_us > 1e6 / self.scan_rate_hz:
            raise ValidationError(
                "sweep (largest bank x dwell) does not fit the scan period")

    @property
    def sensor_count(self) -> int:
        return len(self.sensor_ids)

    def firmware_doc(self) -> str:
        return (f"address={self.address}\nboard_id={self.board_id}\n"
                f"sensor_count={self.sensor_count}\n")


def parse_firmware_doc(text: str) -> dict:
    """Parse the on-board identity record (``key=value`` lines)."""
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    if "address" in out:
        out["address"] = int(out["address"])
    if "sensor_count" in out:
        out["sensor_count"] = int(out["sensor_count"])
    return out


@dataclass
class BoardMode:
    """Exclusive operating mode of a board."""

    mode: int = protocol.MODE_EVENT
    subset: tuple[int, ...] = ()
    stream_rate_hz: int = 0

    @property
    def name(self) -> str:
        return protocol.MODE_NAMES[self.mode]


@dataclass
class EnableInterval:
    """One sensor-enable window, for scan-schedule verification."""

    bank: int
    sensor_id: int
    t_on_us: int
    t_off_us: int


@dataclass
class BoardCounters:
    suppressed_events: int = 0
    frames_rx: int = 0
    nacks_tx: int = 0


class BoardEmulator:
    """One sensor board as a message-driven task on the simulated clock."""

    def __init__(self, config: BoardConfig, sensors: dict[int, SensorModel],
                 world, scheduler, send=None,
                 detection: DetectionConfig | None = None,
                 travel_mm: float = 9.0, seed: int = 0,
                 keep_enable_log: bool = False):
        self.config = config
        self.sensors = dict(sensors)
        missing = set(config.sensor_ids) - set(self.sensors)
        if missing:
            raise ConfigError(f"no sensor model for ids {sorted(missing)}")
        self.world = world
        self.scheduler = scheduler
        self.send = send or (lambda data: None)
        self.detection = detection or DetectionConfig()
        self.travel_mm = travel_mm
        self.mode = BoardMode()
        self.calibration: dict[int, CalibrationEntry] = {}
        self.counters = BoardCounters()
        self.keep_enable_log = keep_enable_log
        self.enable_log: list[EnableInterval] = []
        self._rng = np.random.default_rng(seed)
        self._seq = protocol.SequenceCounter()
        self._decoder = protocol.FrameDecoder()
        self._detectors = {
            sid: ThresholdDetector(self.detection) for sid in config.sensor_ids
        }
        # Per-sensor response parameters as arrays for batched acquisition.
        ids = config.sensor_ids
        self._sensor_index = {sid: i for i, sid in enumerate(ids)}
        self._p_gain = np.array([self.sensors[s].a_gain for s in ids])
        self._p_d0 = np.array([self.sensors[s].d0_mm for s in ids])
        self._p_floor = np.array([self.sensors[s].floor_counts for s in ids])
        self._p_sigma = np.array([self.sensors[s].noise_sigma_counts for s in ids])
        self._p_gap = np.array([self.sensors[s].rest_gap_mm for s in ids])
        self._p_max = np.array([self.sensors[s].max_counts for s in ids])
        self._uncal_baseline: dict[int, int] = {}
        self._uncal_active: dict[int, bool] = {}
        self._t0_us = scheduler.now_us
        self._running = False
        self._epoch = 0  # invalidates stale scheduled ticks on mode change

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        if not self._running:
            self._running = True
            self._schedule_next(self.scheduler.now_us)

    def stop(self) -> None:
        self._running = False
        self._epoch += 1

    def uptime_us(self) -> int:
        return self.scheduler.now_us - self._t0_us

    def _schedule_next(self, t_us: int) -> None:
        epoch = self._epoch
        self.scheduler.call_at(t_us, lambda: self._tick(epoch))

    def _tick(self, epoch: int) -> None:
        if not self._running or epoch != self._epoch:
            return
        t = self.scheduler.now_us
        if self.mode.mode == protocol.MODE_SUBSET_STREAM:
            samples = self.subset_stream_tick()
            self._emit_batches(samples)
            period = int(round(1e6 / self.mode.stream_rate_hz))
        else:
            samples = self.scan_cycle()
            if self.mode.mode == protocol.MODE_EVENT:
                for msg in self.detect_local_events(samples):
                    self._transmit(msg)
            else:  # full_scan_stream
                self._emit_batches(samples)
            period = int(round(1e6 / self.config.scan_rate_hz))
        self._schedule_next(t + period)

    # -- scanning ----------------------------------------------------------

    def _acquire(self, sensor_id: int, t_us: int) -> RawSample:
        displacement = self.world.displacement(sensor_id, t_us)
        return optics.sample(self.sensors[sensor_id], displacement,
                             self._rng, t_s=t_us / 1e6, sensor_id=sensor_id)

    def _acquire_batch(self, pairs: list[tuple[int, int]]) -> list[RawSample]:
        """Sample many (sensor, instant) pairs with one vectorized pass."""
        if not pairs:
            return []
        disp = np.array([self.world.displacement(sid, t) for sid, t in pairs])
        idx = np.array([self._sensor_index[sid] for sid, _ in pairs])
        dist = self._p_gap[idx] + np.maximum(disp, 0.0)
        mean = self._p_floor[idx] + self._p_gain[idx] / (dist + self._p_d0[idx]) ** 2
        sigma = self._p_sigma[idx]
        if sigma.any():
            mean = mean + self._rng.normal(0.0, 1.0, len(pairs)) * sigma
        counts = np.clip(np.rint(mean), 0, self._p_max[idx]).astype(np.int64)
        return [
            RawSample(counts=int(c), t_s=t / 1e6, sensor_id=sid)
            for (sid, t), c in zip(pairs, counts)
        ]

    def _scan_banks(self, banks, t0_us: int) -> list[RawSample]:
        """Enable one sensor per bank per slot; all banks run in parallel."""
        dwell = self.config.dwell_us
        pairs: list[tuple[int, int]] = []
        slots = max((len(b) for b in banks), default=0)
        for slot in range(slots):
            t = t0_us + slot * dwell
            for bank_idx, bank in enumerate(banks):
                if slot < len(bank):
                    sid = bank[slot]
                    pairs.append((sid, t))
                    if self.keep_enable_log:
                        self.enable_log.append(
                            EnableInterval(bank_idx, sid, t, t + dwell))
        return self._acquire_batch(pairs)

    def scan_cycle(self) -> list[RawSample]:
        """One full-array sweep; every sensor sampled exactly once."""
        return self._scan_banks(self.config.banks, self.scheduler.now_us)

    def subset_stream_tick(self) -> list[RawSample]:
        """One high-rate acquisition of the streaming subset."""
        if self.mode.mode != protocol.MODE_SUBSET_STREAM:
            raise ConfigError("board is not in subset_stream mode")
        subset = set(self.mode.subset)
        banks = tuple(
            tuple(s for s in bank if s in subset)
            for bank in self.config.banks
        )
        banks = tuple(b for b in banks if b)
        return self._scan_banks(banks, self.scheduler.now_us)

    # -- event detection ---------------------------------------------------

    def detect_local_events(self, samples: list[RawSample]) -> list[Message]:
        """Run calibrated samples through the hysteresis detectors."""
        msgs: list[Message] = []
        for s in sorted(samples, key=lambda r: (r.t_s, r.sensor_id)):
            entry = self.calibration.get(s.sensor_id)
            if entry is None:
                self._track_uncalibrated(s)
                continue
            mm = entry.displacement_code(s.counts)
            t_us = int(round(s.t_s * 1e6))
            for ev in self._detectors[s.sensor_id].update(t_us, mm):
                msgs.append(KeyEventRaw(
                    sensor_id=s.sensor_id,
                    on=ev.kind == "on",
                    window_entry_us=ev.entry_us,
                    window_exit_us=ev.exit_us,
                ))
        return msgs

    def _track_uncalibrated(self, s: RawSample) -> None:
        base = self._uncal_baseline.setdefault(s.sensor_id, s.counts)
        swung = abs(s.counts - base) > SUPPRESS_SWING_COUNTS
        if swung and not self._uncal_active.get(s.sensor_id, False):
            self.counters.suppressed_events += 1
            self._uncal_active[s.sensor_id] = True
        elif not swung and abs(s.counts - base) < SUPPRESS_SWING_COUNTS // 2:
            self._uncal_active[s.sensor_id] = False

    # -- bus ----------------------------------------------------------------

    def on_wire_bytes(self, data: bytes) -> None:
        for frame in self._decoder.feed(data):
            self.counters.frames_rx += 1
            if frame.address not in (self.config.address,
                                     protocol.BROADCAST_ADDR):
                continue  # not ours: stay silent
            broadcast = frame.address == protocol.BROADCAST_ADDR
            for reply in self.handle_command(frame.message,
                                             broadcast=broadcast):
                if broadcast and isinstance(reply, EnumerateReply):
                    # Address-slotted reply so simultaneous answers to a
                    # broadcast cannot collide on the shared bus.
                    delay = self.config.address * ENUM_SLOT_US
                    self.scheduler.call_after(
                        delay, lambda m=reply: self._transmit(m))
                else:
                    self._transmit(reply)

    def _transmit(self, msg: Message) -> None:
        self.send(protocol.encode_frame(msg, self.config.address,
                                        self._seq.take()))

    def _emit_batches(self, samples: list[RawSample]) -> None:
        samples = sorted(samples, key=lambda r: (r.t_s, r.sensor_id))
        for i in range(0, len(samples), protocol.MAX_BATCH_SAMPLES):
            group = samples[i:i + protocol.MAX_BATCH_SAMPLES]
            self._transmit(PositionBatch(
                sensor_ids=tuple(s.sensor_id for s in group),
                t_us=tuple(int(round(s.t_s * 1e6)) for s in group),
                counts=tuple(s.counts for s in group),
            ))

    # -- command handling ----------------------------------------------------

    def handle_command(self, msg: Message, broadcast: bool = False
                       ) -> list[Message]:
        """Execute one host command; returns replies (none for broadcast).

        Broadcast commands are executed but never acknowledged, so
        simultaneous replies cannot collide on the shared bus.
        """
        replies = self._execute(msg, broadcast)
        if broadcast:
            # Enumeration is the one broadcast that must answer: replies are
            # slotted by address at the wire level (staggered start).
            replies = [r for r in replies if isinstance(r, EnumerateReply)]
        for r in replies:
            if isinstance(r, Nack):
                self.counters.nacks_tx += 1
        return replies

    def _execute(self, msg: Message, broadcast: bool) -> list[Message]:
        if isinstance(msg, StatusRequest):
            return [StatusResponse(
                address=self.config.address,
                board_id=self.config.board_id,
                mode=self.mode.mode,
                uptime_us=self.uptime_us(),
                suppressed_events=self.counters.suppressed_events,
                sensor_count=self.config.sensor_count,
            )]
        if isinstance(msg, Enumerate):
            return [EnumerateReply(
                address=self.config.address,
                board_id=self.config.board_id,
                sensor_count=self.config.sensor_count,
            )]
        if isinstance(msg, ModeSet):
            return [self._set_mode(msg)]
        if isinstance(msg, CalibPush):
            return [self._install_calibration(msg)]
        if isinstance(msg, PollRequest):
            return self._poll(msg)
        # Host-bound message types arriving as commands are malformed use.
        return [Nack(protocol.NACK_MALFORMED,
                     type(msg).__name__[:14])]

    def _set_mode(self, msg: ModeSet) -> Message:
        if msg.mode not in protocol.MODE_NAMES:
            return Nack(protocol.NACK_BAD_MODE, f"mode {msg.mode}")
        if msg.mode == protocol.MODE_SUBSET_STREAM:
            if not msg.subset:
                return Nack(protocol.NACK_INVALID_SUBSET, "empty subset")
            unknown = set(msg.subset) - set(self.config.sensor_ids)
            if unknown:
                return Nack(protocol.NACK_INVALID_SUBSET,
                            f"ids {sorted(unknown)}"[:16])
            if msg.stream_rate_hz < 250:
                return Nack(protocol.NACK_BAD_RATE,
                            f"{msg.stream_rate_hz} Hz")
            largest = max(
                sum(1 for s in bank if s in msg.subset)
                for bank in self.config.banks
            )
            if largest * self.config.dwell_us > 1e6 / msg.stream_rate_hz:
                return Nack(protocol.NACK_BAD_RATE, "subset too large")
        self.mode = BoardMode(mode=msg.mode, subset=msg.subset,
                              stream_rate_hz=msg.stream_rate_hz)
        self._epoch += 1
        for det in self._detectors.values():
            det.reset()
        if self._running:
            self._schedule_next(self.scheduler.now_us)
        return Ack()

    def _install_calibration(self, msg: CalibPush) -> Message:
        for e in msg.entries:
            if e.sensor_id not in self._detectors:
                return Nack(protocol.NACK_UNKNOWN_SENSOR, str(e.sensor_id))
            try:
                anchors = tuple(
                    (float(c), um / 1000.0) for c, um in e.anchors
                )
                self.calibration[e.sensor_id] = CalibrationEntry(
                    sensor_id=e.sensor_id,
                    raw_rest=float(e.raw_rest),
                    raw_full=float(e.raw_full),
                    travel_mm=self.travel_mm,
                    anchors=anchors,
                    captured_at=self.scheduler.now_us / 1e6,
                )
            except Exception as exc:
                return Nack(protocol.NACK_BAD_CALIB, str(exc)[:16])
            self._detectors[e.sensor_id] = ThresholdDetector(self.detection)
            self._uncal_baseline.pop(e.sensor_id, None)
        return Ack()

    def _poll(self, msg: PollRequest) -> list[Message]:
        unknown = set(msg.sensor_ids) - set(self.config.sensor_ids)
        if unknown:
            return [Nack(protocol.NACK_UNKNOWN_SENSOR,
                         f"ids {sorted(unknown)}"[:16])]
        # One-shot acquisition honouring one-enabled-per-bank: sensors in the
        # same bank take consecutive dwell slots.
        samples = []
        slot_of_bank: dict[int, int] = {}
        for sid in sorted(msg.sensor_ids):
            bank_idx = next(i for i, b in enumerate(self.config.banks)
                            if sid in b)
            slot = slot_of_bank.get(bank_idx, 0)
            slot_of_bank[bank_idx] = slot + 1
            t = self.scheduler.now_us + slot * self.config.dwell_us
            samples.append(self._acquire(sid, t))
        samples.sort(key=lambda s: s.sensor_id)
        out = []
        for i in range(0, len(samples), protocol.MAX_BATCH_SAMPLES):
            group = samples[i:i + protocol.MAX_BATCH_SAMPLES]
            out.append(PollResponse(
                sensor_ids=tuple(s.sensor_id for s in group),
                t_us=tuple(int(round(s.t_s * 1e6)) for s in group),
                counts=tuple(s.counts for s in group),
            ))
        return out
