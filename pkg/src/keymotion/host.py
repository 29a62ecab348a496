"""Main-controller logic: enumeration, calibration, modes, event aggregation.

The host owns the bus master role.  It enumerates the daisy-chained boards,
captures per-sensor calibration (rest and full-travel references plus
optional mid-travel anchors), pushes the tables to the boards so local event
detection stays independent of bus load, switches the instrument between the
mutually exclusive MIDI and position-streaming modes, and folds asynchronous
board messages into instrument-level key events.
"""

from __future__ import annotations

from dataclasses import dataclass

from . import protocol
from .calibration import CalibrationEntry, calibrate_sensor
from .detect import DetectionConfig
from .errors import CalibrationError, ConfigError, EnumerationError
from .events import EventAggregator, KeyEvent, VelocityCurve
from .protocol import (
    Ack, CalibEntryWire, Enumerate, EnumerateReply, FrameDecoder, KeyEventRaw,
    Message, ModeSet, Nack, PollRequest, PollResponse, PositionBatch,
    SequenceCounter, StatusRequest, StatusResponse, chunk_calibration,
    encode_frame,
)

COMMAND_TIMEOUT_US = 20_000
COMMAND_RETRIES = 3
ENUM_WINDOW_US = 40_000
CAPTURE_POLL_GAP_US = 1_000

MODE_MIDI = "midi"
MODE_POSITION_STREAM = "position_stream"


@dataclass(frozen=True)
class HostMode:
    mode: str = MODE_MIDI
    subset: tuple[int, ...] = ()

    def __post_init__(self):
        if self.mode not in (MODE_MIDI, MODE_POSITION_STREAM):
            raise ConfigError(f"unknown host mode {self.mode!r}")
        if self.mode == MODE_POSITION_STREAM and not self.subset:
            raise ConfigError("position_stream requires a non-empty subset")


@dataclass
class BoardInfo:
    address: int
    board_id: str
    sensor_count: int


@dataclass
class HostDiagnostics:
    events_in_stream_mode: int = 0
    events_while_disengaged: int = 0
    unexpected_messages: int = 0
    command_retries: int = 0


@dataclass
class PositionRecord:
    t_us: int
    sensor_id: int
    counts: int


class HostSession:
    """Single-writer session state for one instrument bus."""

    def __init__(self, wire, scheduler, key_map: dict[int, tuple[int, int]],
                 sensor_owner: dict[int, int] | None = None,
                 travel_mm: float = 9.0,
                 detection: DetectionConfig | None = None,
                 velocity: VelocityCurve | None = None,
                 stream_rate_hz: int = 250,
                 sounding: bool = True):
        self.wire = wire
        self.scheduler = scheduler
        self.key_map = dict(key_map)
        self.sensor_owner = dict(sensor_owner or {})
        # False when the sounding mechanism is disengaged (register off):
        # keys still move and cross the windows, but nothing plucks, so no
        # MIDI notes may be produced.
        self.sounding = sounding
        self.travel_mm = travel_mm
        self.detection = detection or DetectionConfig()
        self.detection.validate_for_travel(travel_mm)
        self.velocity = velocity or VelocityCurve()
        self.stream_rate_hz = stream_rate_hz
        self.roster: list[BoardInfo] = []
        self.calibration: dict[int, CalibrationEntry] = {}
        self.mode = HostMode()
        self.events: list[KeyEvent] = []
        self.positions: list[PositionRecord] = []
        self.diagnostics = HostDiagnostics()
        self.capturing = False
        self.decoder = FrameDecoder()
        self.aggregator = EventAggregator(self.key_map, self.velocity)
        self.event_sink = None     # optional callable(KeyEvent)
        self.position_sink = None  # optional callable(PositionRecord)
        self._seq = SequenceCounter()
        self._inbox: list[protocol.DecodedFrame] = []
        wire.attach_host(self.on_wire_bytes)

    # -- wire ----------------------------------------------------------------

    def on_wire_bytes(self, data: bytes) -> None:
        for frame in self.decoder.feed(data):
            self._dispatch(frame)

    def _dispatch(self, frame: protocol.DecodedFrame) -> None:
        msg = frame.message
        if isinstance(msg, KeyEventRaw):
            self._on_key_event(msg)
        elif isinstance(msg, PositionBatch):
            for sid, t_us, counts in zip(msg.sensor_ids, msg.t_us, msg.counts):
                rec = PositionRecord(t_us=t_us, sensor_id=sid, counts=counts)
                self.positions.append(rec)
                if self.position_sink is not None:
                    self.position_sink(rec)
        else:
            self._inbox.append(frame)

    def _on_key_event(self, msg: KeyEventRaw) -> None:
        if self.mode.mode != MODE_MIDI:
            self.diagnostics.events_in_stream_mode += 1
            return
        if not self.sounding:
            self.diagnostics.events_while_disengaged += 1
            return
        event = self.aggregator.process(
            msg.sensor_id, "on" if msg.on else "off",
            msg.window_entry_us, msg.window_exit_us)
        if event is not None:
            self.events.append(event)
            if self.event_sink is not None:
                self.event_sink(event)

    def _send(self, msg: Message, address: int) -> None:
        self.wire.host_send(encode_frame(msg, address, self._seq.take()))

    def _collect(self, address: int, types: tuple, count: int = 1,
                 timeout_us: int = COMMAND_TIMEOUT_US) -> list[Message]:
        """Run the bus until ``count`` replies of ``types`` arrive from address."""
        got: list[Message] = []
        deadline = self.scheduler.now_us + timeout_us
        while self.scheduler.now_us < deadline and len(got) < count:
            self.scheduler.run_for(1_000)
            kept = []
            for frame in self._inbox:
                if frame.address == address and isinstance(frame.message, types):
                    got.append(frame.message)
                else:
                    kept.append(frame)
            self._inbox = kept
        return got

    def command(self, address: int, msg: Message,
                expect: tuple = (Ack, Nack), count: int = 1,
                retries: int = COMMAND_RETRIES) -> list[Message]:
        """Send an idempotent command, retrying until replies arrive."""
        for attempt in range(retries):
            self._send(msg, address)
            replies = self._collect(address, expect, count=count)
            if replies:
                return replies
            self.diagnostics.command_retries += 1
        raise ConfigError(
            f"board {address} did not answer {type(msg).__name__} "
            f"after {retries} attempts")

    # -- enumeration -----------------------------------------------------------

    def enumerate_boards(self) -> list[BoardInfo]:
        """Broadcast-enumerate the chain; result is sorted by address, so it
        is identical regardless of the physical chain direction."""
        self._inbox.clear()
        self._send(Enumerate(), protocol.BROADCAST_ADDR)
        deadline = self.scheduler.now_us + ENUM_WINDOW_US
        while self.scheduler.now_us < deadline:
            self.scheduler.run_for(1_000)
        replies: list[EnumerateReply] = []
        kept = []
        for frame in self._inbox:
            if isinstance(frame.message, EnumerateReply):
                replies.append(frame.message)
            else:
                kept.append(frame)
        self._inbox = kept
        seen: dict[int, EnumerateReply] = {}
        for r in replies:
            if r.address in seen and seen[r.address] != r:
                raise EnumerationError(
                    f"duplicate bus address {r.address}: "
                    f"{seen[r.address].board_id!r} and {r.board_id!r}")
            seen[r.address] = r
        self.roster = [
            BoardInfo(r.address, r.board_id, r.sensor_count)
            for r in sorted(seen.values(), key=lambda r: r.address)
        ]
        return self.roster

    # -- calibration -------------------------------------------------------------

    def capture_counts(self, address: int, sensor_ids, n_samples: int = 25
                       ) -> dict[int, list[int]]:
        """Poll a board repeatedly; returns per-sensor capture arrays."""
        sensor_ids = sorted(sensor_ids)
        captures: dict[int, list[int]] = {sid: [] for sid in sensor_ids}
        frames_per_poll = -(-len(sensor_ids) // protocol.MAX_BATCH_SAMPLES)
        for _ in range(n_samples):
            replies = self.command(
                address, PollRequest(tuple(sensor_ids)),
                expect=(PollResponse, Nack), count=frames_per_poll)
            for rep in replies:
                if isinstance(rep, Nack):
                    raise CalibrationError(
                        f"board {address} refused poll: {rep.detail}")
                for sid, counts in zip(rep.sensor_ids, rep.counts):
                    captures[sid].append(counts)
            self.scheduler.run_for(CAPTURE_POLL_GAP_US)
        return captures

    def calibrate_from_captures(self, sensor_id: int, rest, full,
                                anchors=None) -> CalibrationEntry:
        entry = calibrate_sensor(
            sensor_id, rest, full, anchors=anchors, travel_mm=self.travel_mm,
            captured_at=self.scheduler.now_us / 1e6)
        self.calibration[sensor_id] = entry
        return entry

    def push_calibration(self, address: int, sensor_ids=None) -> None:
        """Install host-side calibration entries on their board."""
        entries = []
        for sid, e in sorted(self.calibration.items()):
            if sensor_ids is not None and sid not in sensor_ids:
                continue
            entries.append(CalibEntryWire(
                sensor_id=sid,
                raw_rest=int(round(e.raw_rest)),
                raw_full=int(round(e.raw_full)),
                anchors=tuple(
                    (int(round(c)), int(round(mm * 1000))) for c, mm in e.anchors),
            ))
        for chunk in chunk_calibration(entries):
            replies = self.command(address, chunk)
            if any(isinstance(r, Nack) for r in replies):
                bad = next(r for r in replies if isinstance(r, Nack))
                raise CalibrationError(
                    f"board {address} rejected calibration: {bad.detail}")

    # -- modes ---------------------------------------------------------------

    def set_mode(self, mode: HostMode, board_addresses=None) -> None:
        """Switch MIDI vs position streaming; boards follow over the bus."""
        if self.capturing:
            raise ConfigError("mode change rejected during calibration capture")
        addresses = board_addresses or [b.address for b in self.roster]
        if mode.mode == MODE_POSITION_STREAM:
            unknown = set(mode.subset) - set(self.key_map)
            if unknown:
                raise ConfigError(f"subset sensors {sorted(unknown)} unknown")
            for address in addresses:
                board_subset = self._board_subset(address, mode.subset)
                if board_subset:
                    msg = ModeSet(protocol.MODE_SUBSET_STREAM,
                                  self.stream_rate_hz, board_subset)
                else:
                    msg = ModeSet(protocol.MODE_EVENT)
                replies = self.command(address, msg)
                if any(isinstance(r, Nack) for r in replies):
                    bad = next(r for r in replies if isinstance(r, Nack))
                    raise ConfigError(
                        f"board {address} refused mode: {bad.detail}")
        else:
            for address in addresses:
                replies = self.command(address, ModeSet(protocol.MODE_EVENT))
                if any(isinstance(r, Nack) for r in replies):
                    bad = next(r for r in replies if isinstance(r, Nack))
                    raise ConfigError(
                        f"board {address} refused mode: {bad.detail}")
        self.mode = mode

    def _board_subset(self, address: int, subset) -> tuple[int, ...]:
        if not self.sensor_owner:
            return tuple(subset)
        return tuple(s for s in subset if self.sensor_owner.get(s) == address)

    # -- status ----------------------------------------------------------------

    def status(self, address: int) -> StatusResponse:
        replies = self.command(address, StatusRequest(),
                               expect=(StatusResponse,))
        return replies[0]

    def displacement_of(self, sensor_id: int, counts: int) -> float:
        entry = self.calibration.get(sensor_id)
        if entry is None:
            raise CalibrationError(f"sensor {sensor_id} is not calibrated")
        return entry.displacement(counts)
