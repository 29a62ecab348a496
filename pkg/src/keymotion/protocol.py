"""Framed multi-drop bus codec for the differential serial link.

Wire format (see docs/wire.md for worked examples):

    SOF(0x7E) | address | msg_type | seq | len | payload... | crc_hi crc_lo

The CRC is CRC-16/CCITT-FALSE over address..payload (pre-escaping).  After
the SOF, every byte equal to 0x7E or 0x7D is escaped as (0x7D, byte ^ 0x20),
so an unescaped 0x7E on the wire always marks a frame start and the decoder
can resynchronize after arbitrary garbage.

The address byte names the sensor-board endpoint of the frame in both
directions: host->board frames carry the destination board address (0 =
broadcast), board->host frames carry the sender's own address.  Replies echo
nothing; each sender stamps frames from its own modulo-256 sequence counter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .errors import ProtocolError

SOF = 0x7E
ESC = 0x7D
ESC_XOR = 0x20
MAX_PAYLOAD = 64
BROADCAST_ADDR = 0
HOST_ADDR = 32
MIN_BOARD_ADDR = 1
MAX_BOARD_ADDR = 31

# Modes, shared by board emulation and host control
MODE_EVENT = 0
MODE_FULL_SCAN_STREAM = 1
MODE_SUBSET_STREAM = 2
MODE_NAMES = {MODE_EVENT: "event",
              MODE_FULL_SCAN_STREAM: "full_scan_stream",
              MODE_SUBSET_STREAM: "subset_stream"}

# Nack reason codes
NACK_MALFORMED = 0x01
NACK_INVALID_SUBSET = 0x02
NACK_BAD_RATE = 0x03
NACK_BAD_MODE = 0x04
NACK_BAD_CALIB = 0x05
NACK_UNKNOWN_SENSOR = 0x06


def crc16_ccitt_false(data: bytes) -> int:
    """CRC-16/CCITT-FALSE: poly 0x1021, init 0xFFFF, no reflection/xorout."""
    crc = 0xFFFF
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            if crc & 0x8000:
                crc = ((crc << 1) ^ 0x1021) & 0xFFFF
            else:
                crc = (crc << 1) & 0xFFFF
    return crc


_CRC_TABLE = []
for _b in range(256):
    _c = _b << 8
    for _ in range(8):
        _c = ((_c << 1) ^ 0x1021) & 0xFFFF if _c & 0x8000 else (_c << 1) & 0xFFFF
    _CRC_TABLE.append(_c)


def crc16(data: bytes) -> int:
    """Table-driven CRC-16/CCITT-FALSE (same value as crc16_ccitt_false)."""
    crc = 0xFFFF
    for byte in data:
        crc = ((crc << 8) & 0xFFFF) ^ _CRC_TABLE[((crc >> 8) ^ byte) & 0xFF]
    return crc


# ---------------------------------------------------------------------------
# Messages

T_KEY_EVENT = 0x01
T_POSITION_BATCH = 0x02
T_STATUS_REQUEST = 0x03
T_STATUS_RESPONSE = 0x04
T_MODE_SET = 0x05
T_CALIB_PUSH = 0x06
T_POLL_REQUEST = 0x07
T_POLL_RESPONSE = 0x08
T_ENUMERATE = 0x09
T_ENUMERATE_REPLY = 0x0A
T_ACK = 0x0B
T_NACK = 0x0C

# PositionBatch/PollResponse entry: sensor u16, t_us u64, counts u16
_SAMPLE_ENTRY = struct.Struct(">HQH")
MAX_BATCH_SAMPLES = (MAX_PAYLOAD - 1) // _SAMPLE_ENTRY.size  # 5


@dataclass(frozen=True)
class KeyEventRaw:
    sensor_id: int
    on: bool
    window_entry_us: int
    window_exit_us: int


@dataclass(frozen=True)
class PositionBatch:
    sensor_ids: tuple[int, ...]
    t_us: tuple[int, ...]
    counts: tuple[int, ...]


@dataclass(frozen=True)
class StatusRequest:
    pass


@dataclass(frozen=True)
class StatusResponse:
    address: int
    board_id: str
    mode: int
    uptime_us: int
    suppressed_events: int
    sensor_count: int


@dataclass(frozen=True)
class ModeSet:
    mode: int
    stream_rate_hz: int = 0
    subset: tuple[int, ...] = ()


@dataclass(frozen=True)
class CalibEntryWire:
    """Calibration table row as pushed to a board (positions in µm)."""

    sensor_id: int
    raw_rest: int
    raw_full: int
    anchors: tuple[tuple[int, int], ...] = ()  # (counts, position_um)


@dataclass(frozen=True)
class CalibPush:
    chunk_index: int
    chunk_total: int
    entries: tuple[CalibEntryWire, ...]


@dataclass(frozen=True)
class PollRequest:
    sensor_ids: tuple[int, ...]


@dataclass(frozen=True)
class PollResponse:
    sensor_ids: tuple[int, ...]
    t_us: tuple[int, ...]
    counts: tuple[int, ...]


@dataclass(frozen=True)
class Enumerate:
    pass


@dataclass(frozen=True)
class EnumerateReply:
    address: int
    board_id: str
    sensor_count: int


@dataclass(frozen=True)
class Ack:
    pass


@dataclass(frozen=True)
class Nack:
    reason: int
    detail: str = ""


Message = (KeyEventRaw | PositionBatch | StatusRequest | StatusResponse |
           ModeSet | CalibPush | PollRequest | PollResponse | Enumerate |
           EnumerateReply | Ack | Nack)


def _pack_str(s: str) -> bytes:
    raw = s.encode("ascii")
    if len(raw) > 16:
        raise ProtocolError(f"string field too long: {s!r}")
    return bytes([len(raw)]) + raw


def _unpack_str(buf: bytes, off: int) -> tuple[str, int]:
    n = buf[off]
    return buf[off + 1:off + 1 + n].decode("ascii"), off + 1 + n


def _pack_samples(sensor_ids, t_us, counts) -> bytes:
    if not len(sensor_ids) == len(t_us) == len(counts):
        raise ProtocolError("sample batch fields must have equal length")
    out = bytes([len(sensor_ids)])
    for s, t, c in zip(sensor_ids, t_us, counts):
        out += _SAMPLE_ENTRY.pack(s, t, c)
    return out


def _unpack_samples(payload: bytes) -> tuple[tuple, tuple, tuple]:
    n = payload[0]
    need = 1 + n * _SAMPLE_ENTRY.size
    if len(payload) != need:
        raise ProtocolError("sample batch length mismatch")
    ids, ts, cs = [], [], []
    for i in range(n):
        s, t, c = _SAMPLE_ENTRY.unpack_from(payload, 1 + i * _SAMPLE_ENTRY.size)
        ids.append(s)
        ts.append(t)
        cs.append(c)
    return tuple(ids), tuple(ts), tuple(cs)


def pack_payload(msg: Message) -> tuple[int, bytes]:
    """Serialize a message; returns (msg_type, payload bytes)."""
    if isinstance(msg, KeyEventRaw):
        return T_KEY_EVENT, struct.pack(
            ">HBQQ", msg.sensor_id, 1 if msg.on else 0,
            msg.window_entry_us, msg.window_exit_us)
    if isinstance(msg, PositionBatch):
        return T_POSITION_BATCH, _pack_samples(msg.sensor_ids, msg.t_us, msg.counts)
    if isinstance(msg, StatusRequest):
        return T_STATUS_REQUEST, b""
    if isinstance(msg, StatusResponse):
        return T_STATUS_RESPONSE, (
            struct.pack(">BBQIB", msg.address, msg.mode, msg.uptime_us,
                        msg.suppressed_events, msg.sensor_count)
            + _pack_str(msg.board_id))
    if isinstance(msg, ModeSet):
        body = struct.pack(">BHB", msg.mode, msg.stream_rate_hz, len(msg.subset))
        for sid in msg.subset:
            body += struct.pack(">H", sid)
        return T_MODE_SET, body
    if isinstance(msg, CalibPush):
        body = struct.pack(">BBB", msg.chunk_index, msg.chunk_total,
                           len(msg.entries))
        for e in msg.entries:
            body += struct.pack(">HHHB", e.sensor_id, e.raw_rest, e.raw_full,
                                len(e.anchors))
            for counts, pos_um in e.anchors:
                body += struct.pack(">HH", counts, pos_um)
        return T_CALIB_PUSH, body
    if isinstance(msg, PollRequest):
        body = bytes([len(msg.sensor_ids)])
        for sid in msg.sensor_ids:
            body += struct.pack(">H", sid)
        return T_POLL_REQUEST, body
    if isinstance(msg, PollResponse):
        return T_POLL_RESPONSE, _pack_samples(msg.sensor_ids, msg.t_us, msg.counts)
    if isinstance(msg, Enumerate):
        return T_ENUMERATE, b""
    if isinstance(msg, EnumerateReply):
        return T_ENUMERATE_REPLY, (
            struct.pack(">BB", msg.address, msg.sensor_count)
            + _pack_str(msg.board_id))
    if isinstance(msg, Ack):
        return T_ACK, b""
    if isinstance(msg, Nack):
        return T_NACK, bytes([msg.reason]) + _pack_str(msg.detail)
    raise ProtocolError(f"cannot encode {type(msg).__name__}")


def parse_payload(msg_type: int, payload: bytes) -> Message:
    """Deserialize a payload; raises ProtocolError on malformed content."""
    try:
        if msg_type == T_KEY_EVENT:
            sid, on, entry, exit_ = struct.unpack(">HBQQ", payload)
            if on not in (0, 1):
                raise ProtocolError("bad on/off flag")
            return KeyEventRaw(sid, bool(on), entry, exit_)
        if msg_type == T_POSITION_BATCH:
            return PositionBatch(*_unpack_samples(payload))
        if msg_type == T_STATUS_REQUEST:
            _expect_empty(payload)
            return StatusRequest()
        if msg_type == T_STATUS_RESPONSE:
            addr, mode, uptime, suppressed, n_sensors = struct.unpack_from(
                ">BBQIB", payload)
            board_id, off = _unpack_str(payload, struct.calcsize(">BBQIB"))
            _expect_len(payload, off)
            return StatusResponse(addr, board_id, mode, uptime, suppressed,
                                  n_sensors)
        if msg_type == T_MODE_SET:
            mode, rate, n = struct.unpack_from(">BHB", payload)
            subset = struct.unpack_from(f">{n}H", payload, 4) if n else ()
            _expect_len(payload, 4 + 2 * n)
            return ModeSet(mode, rate, tuple(subset))
        if msg_type == T_CALIB_PUSH:
            idx, total, n = struct.unpack_from(">BBB", payload)
            off = 3
            entries = []
            for _ in range(n):
                sid, rest, full, n_anchor = struct.unpack_from(">HHHB", payload, off)
                off += 7
                anchors = []
                for _ in range(n_anchor):
                    c, p = struct.unpack_from(">HH", payload, off)
                    anchors.append((c, p))
                    off += 4
                entries.append(CalibEntryWire(sid, rest, full, tuple(anchors)))
            _expect_len(payload, off)
            return CalibPush(idx, total, tuple(entries))
        if msg_type == T_POLL_REQUEST:
            n = payload[0]
            ids = struct.unpack_from(f">{n}H", payload, 1) if n else ()
            _expect_len(payload, 1 + 2 * n)
            return PollRequest(tuple(ids))
        if msg_type == T_POLL_RESPONSE:
            return PollResponse(*_unpack_samples(payload))
        if msg_type == T_ENUMERATE:
            _expect_empty(payload)
            return Enumerate()
        if msg_type == T_ENUMERATE_REPLY:
            addr, n_sensors = struct.unpack_from(">BB", payload)
            board_id, off = _unpack_str(payload, 2)
            _expect_len(payload, off)
            return EnumerateReply(addr, board_id, n_sensors)
        if msg_type == T_ACK:
            _expect_empty(payload)
            return Ack()
        if msg_type == T_NACK:
            reason = payload[0]
            detail, off = _unpack_str(payload, 1)
            _expect_len(payload, off)
            return Nack(reason, detail)
    except ProtocolError:
        raise
    except (struct.error, IndexError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"malformed payload for type 0x{msg_type:02X}: {exc}")
    raise ProtocolError(f"unknown message type 0x{msg_type:02X}")


def _expect_empty(payload: bytes) -> None:
    if payload:
        raise ProtocolError("expected empty payload")


def _expect_len(payload: bytes, n: int) -> None:
    if len(payload) != n:
        raise ProtocolError("payload length mismatch")


# ---------------------------------------------------------------------------
# Framing


def _escape(body: bytes) -> bytes:
    out = bytearray()
    for b in body:
        if b in (SOF, ESC):
            out.append(ESC)
            out.append(b ^ ESC_XOR)
        else:
            out.append(b)
    return bytes(out)


def encode_frame(msg: Message, address: int, seq: int) -> bytes:
    """Encode one message as a single escaped wire frame.

    Raises ProtocolError if the payload exceeds MAX_PAYLOAD; CalibPush
    producers should chunk with ``chunk_calibration`` first.
    """
    if not (BROADCAST_ADDR <= address <= HOST_ADDR):
        raise ProtocolError(f"address {address} out of range")
    msg_type, payload = pack_payload(msg)
    if len(payload) > MAX_PAYLOAD:
        raise ProtocolError(
            f"payload of {type(msg).__name__} is {len(payload)} bytes "
            f"(max {MAX_PAYLOAD})")
    body = bytes([address, msg_type, seq & 0xFF, len(payload)]) + payload
    body += struct.pack(">H", crc16(body))
    return bytes([SOF]) + _escape(body)


def chunk_calibration(entries, max_entries: int = 3) -> list[CalibPush]:
    """Split calibration rows into bus-sized CalibPush chunks."""
    entries = list(entries)
    groups = [entries[i:i + max_entries] for i in range(0, len(entries), max_entries)]
    if not groups:
        groups = [[]]
    total = len(groups)
    out = []
    for i, group in enumerate(groups):
        msg = CalibPush(i, total, tuple(group))
        _, payload = pack_payload(msg)
        if len(payload) > MAX_PAYLOAD:  # dense anchors: fall back to singles
            return chunk_calibration(entries, max_entries=1)
        out.append(msg)
    return out


@dataclass
class DecodedFrame:
    address: int
    seq: int
    message: Message


@dataclass
class DecodeDiagnostics:
    frames_ok: int = 0
    crc_errors: int = 0
    malformed: int = 0
    resyncs: int = 0
    bytes_dropped: int = 0


_HDR_LEN = 4  # address, msg_type, seq, len
_CRC_LEN = 2


class FrameDecoder:
    """Streaming decoder: resynchronizes on SOF, drops bad-CRC frames.

    Total over arbitrary byte garbage; buffers at most one frame of
    unescaped bytes.  All failures are counted in ``diagnostics`` rather than
    raised.
    """

    def __init__(self):
        self.diagnostics = DecodeDiagnostics()
        self._in_frame = False
        self._esc = False
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[DecodedFrame]:
        frames: list[DecodedFrame] = []
        for byte in data:
            if byte == SOF:
                if self._in_frame and (self._buf or self._esc):
                    self.diagnostics.resyncs += 1
                    self.diagnostics.bytes_dropped += len(self._buf)
                self._in_frame = True
                self._esc = False
                self._buf.clear()
                continue
            if not self._in_frame:
                self.diagnostics.bytes_dropped += 1
                continue
            if self._esc:
                byte ^= ESC_XOR
                self._esc = False
            elif byte == ESC:
                self._esc = True
                continue
            self._buf.append(byte)
            if len(self._buf) >= _HDR_LEN:
                need = _HDR_LEN + self._buf[3] + _CRC_LEN
                if self._buf[3] > MAX_PAYLOAD:
                    self.diagnostics.malformed += 1
                    self.diagnostics.bytes_dropped += len(self._buf)
                    self._in_frame = False
                    self._buf.clear()
                elif len(self._buf) == need:
                    frame = self._finish()
                    if frame is not None:
                        frames.append(frame)
        return frames

    def _finish(self) -> DecodedFrame | None:
        buf = bytes(self._buf)
        self._buf.clear()
        self._in_frame = False
        body, crc_bytes = buf[:-_CRC_LEN], buf[-_CRC_LEN:]
        if crc16(body) != struct.unpack(">H", crc_bytes)[0]:
            self.diagnostics.crc_errors += 1
            return None
        address, msg_type, seq, _ = body[:_HDR_LEN]
        try:
            message = parse_payload(msg_type, body[_HDR_LEN:])
        except ProtocolError:
            self.diagnostics.malformed += 1
            return None
        self.diagnostics.frames_ok += 1
        return DecodedFrame(address=address, seq=seq, message=message)


def decode_stream(decoder: FrameDecoder, data: bytes
                  ) -> tuple[list[DecodedFrame], DecodeDiagnostics]:
    """Feed bytes through a decoder; returns (frames, running diagnostics)."""
    frames = decoder.feed(data)
    return frames, decoder.diagnostics


class SequenceCounter:
    """Per-sender modulo-256 frame sequence numbers."""

    def __init__(self, start: int = 0):
        self._next = start & 0xFF

    def take(self) -> int:
        seq = self._next
        self._next = (self._next + 1) & 0xFF
        return seq
