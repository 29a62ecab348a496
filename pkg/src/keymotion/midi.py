"""MIDI output: real-time note bytes, Standard MIDI File corpus, CSV streams.

Corpus files are SMF format 0 with a fixed tempo: they encode real time, not
metrical structure.  At 480 ticks per quarter under the default 500000 µs
tempo a tick is ~1 ms, finer than the sensing rate.  Note-off is written as a
real 0x80 message carrying the release velocity, which is musically
meaningful on plucked-string keyboards, rather than the running-status
note-on-velocity-zero shortcut.
"""

from __future__ import annotations

import csv
import logging
import struct
from dataclasses import dataclass, field

from .errors import CalibrationError, RoutingError, ValidationError
from .events import KeyEvent

log = logging.getLogger(__name__)

DEFAULT_TICKS_PER_QUARTER = 480
DEFAULT_TEMPO_US = 500_000  # microseconds per quarter note

NOTE_ON_STATUS = 0x90
NOTE_OFF_STATUS = 0x80


@dataclass(frozen=True)
class MidiRoute:
    """Maps (manual, key number) to a MIDI channel and note number."""

    channel_for_manual: dict = field(
        default_factory=lambda: {1: 1, 2: 2})
    base_note_for_manual: dict = field(
        default_factory=lambda: {1: 36, 2: 36})
    keys_per_manual: int = 61

    def __post_init__(self):
        for ch in self.channel_for_manual.values():
            if not 1 <= ch <= 16:
                raise ValidationError("MIDI channels must be in 1..16")
        for manual, base in self.base_note_for_manual.items():
            top = base + self.keys_per_manual - 1
            if not (0 <= base and top <= 127):
                raise ValidationError(
                    f"manual {manual}: notes {base}..{top} outside 0..127")

    def channel(self, manual: int) -> int:
        try:
            return self.channel_for_manual[manual]
        except KeyError:
            raise RoutingError(f"no MIDI channel for manual {manual}")

    def note(self, manual: int, key: int) -> int:
        if not 1 <= key <= self.keys_per_manual:
            raise RoutingError(f"key {key} outside compass 1..{self.keys_per_manual}")
        try:
            return self.base_note_for_manual[manual] + key - 1
        except KeyError:
            raise RoutingError(f"no base note for manual {manual}")


def encode_realtime(event: KeyEvent, route: MidiRoute) -> bytes:
    """Three-byte wire message for one key event."""
    status = NOTE_ON_STATUS if event.kind == "note_on" else NOTE_OFF_STATUS
    channel = route.channel(event.manual)
    note = route.note(event.manual, event.key)
    return bytes([status | (channel - 1), note, event.velocity])


def _write_varlen(value: int) -> bytes:
    if value < 0:
        raise ValidationError("delta times must be non-negative")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    return bytes(reversed(out))


def write_smf(events: list[KeyEvent], route: MidiRoute, path,
              ticks_per_quarter: int = DEFAULT_TICKS_PER_QUARTER,
              tempo_us: int = DEFAULT_TEMPO_US) -> None:
    """Write a format-0 Standard MIDI File from time-stamped key events.

    Events must already be sorted by time.  Dangling note-ons are closed with
    compensating velocity-1 offs at the final timestamp so no file ever ends
    with a stuck note.
    """
    for a, b in zip(events, events[1:]):
        if b.t_s < a.t_s:
            raise ValidationError("events must be sorted by time")

    ticks_per_second = ticks_per_quarter * 1_000_000 / tempo_us
    track = bytearray()
    track += _write_varlen(0)
    track += bytes([0xFF, 0x51, 0x03]) + struct.pack(">I", tempo_us)[1:]

    open_notes: dict[tuple[int, int], KeyEvent] = {}
    prev_tick = 0
    last_tick = 0
    for ev in events:
        tick = int(round(ev.t_s * ticks_per_second))
        track += _write_varlen(tick - prev_tick)
        track += encode_realtime(ev, route)
        prev_tick = tick
        last_tick = tick
        key = (ev.manual, ev.key)
        if ev.kind == "note_on":
            open_notes[key] = ev
        else:
            open_notes.pop(key, None)

    for (manual, key), ev in sorted(open_notes.items()):
        log.warning("closing dangling note-on manual=%d key=%d", manual, key)
        closer = KeyEvent(kind="note_off", manual=manual, key=key,
                          t_s=last_tick / ticks_per_second,
                          traversal_s=ev.traversal_s, velocity=1)
        track += _write_varlen(0)
        track += encode_realtime(closer, route)

    track += _write_varlen(0)
    track += bytes([0xFF, 0x2F, 0x00])

    with open(path, "wb") as fh:
        fh.write(b"MThd" + struct.pack(">IHHH", 6, 0, 1, ticks_per_quarter))
        fh.write(b"MTrk" + struct.pack(">I", len(track)))
        fh.write(track)


@dataclass(frozen=True)
class SmfNote:
    """One parsed note event: absolute seconds, channel 1-based."""

    t_s: float
    kind: str  # "note_on" | "note_off"
    channel: int
    note: int
    velocity: int


def read_smf(path) -> tuple[list[SmfNote], dict]:
    """Parse an SMF file back into note events (independent of the writer).

    Returns (notes, meta) where meta carries the header fields and tempo.
    Only the event kinds this corpus format produces are interpreted; other
    events are skipped structurally.
    """
    with open(path, "rb") as fh:
        blob = fh.read()

    if blob[:4] != b"MThd":
        raise ValidationError("not an SMF file (missing MThd)")
    hdr_len, fmt, ntrks, division = struct.unpack(">IHHH", blob[4:14])
    if hdr_len != 6:
        raise ValidationError(f"unexpected MThd length {hdr_len}")
    off = 8 + hdr_len
    meta = {"format": fmt, "ntrks": ntrks, "division": division,
            "tempo_us": DEFAULT_TEMPO_US}

    notes: list[SmfNote] = []
    for _ in range(ntrks):
        if blob[off:off + 4] != b"MTrk":
            raise ValidationError("missing MTrk chunk")
        trk_len = struct.unpack(">I", blob[off + 4:off + 8])[0]
        data = blob[off + 8:off + 8 + trk_len]
        off += 8 + trk_len
        notes.extend(_parse_track(data, division, meta))
    notes.sort(key=lambda n: n.t_s)
    return notes, meta


def _read_varlen(data: bytes, i: int) -> tuple[int, int]:
    value = 0
    while True:
        b = data[i]
        i += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, i


def _parse_track(data: bytes, division: int, meta: dict) -> list[SmfNote]:
    notes: list[SmfNote] = []
    i = 0
    tick = 0
    running_status = 0
    tempo = meta["tempo_us"]
    while i < len(data):
        delta, i = _read_varlen(data, i)
        tick += delta
        status = data[i]
        if status & 0x80:
            i += 1
            if status < 0xF0:
                running_status = status
        else:
            status = running_status
        if status == 0xFF:  # meta event
            kind = data[i]
            length, i = _read_varlen(data, i + 1)
            if kind == 0x51 and length == 3:
                tempo = int.from_bytes(data[i:i + 3], "big")
                meta["tempo_us"] = tempo
            i += length
            if kind == 0x2F:
                break
            continue
        if status in (0xF0, 0xF7):  # sysex
            length, i = _read_varlen(data, i)
            i += length
            continue
        hi = status & 0xF0
        channel = (status & 0x0F) + 1
        if hi in (NOTE_ON_STATUS, NOTE_OFF_STATUS):
            note, vel = data[i], data[i + 1]
            i += 2
            t_s = tick * tempo / (division * 1_000_000)
            kind = "note_on" if hi == NOTE_ON_STATUS and vel > 0 else "note_off"
            notes.append(SmfNote(t_s, kind, channel, note, vel))
        elif hi in (0xA0, 0xB0, 0xE0):
            i += 2
        elif hi in (0xC0, 0xD0):
            i += 1
        else:
            raise ValidationError(f"unhandled status byte 0x{status:02X}")
    return notes


def export_positions(records, calibration: dict, key_map: dict, path) -> None:
    """Write a position stream as CSV rows, time-ordered, 6 decimals.

    ``records`` yield (t_us, sensor_id, counts); displacement comes from the
    host calibration table, so re-computation reproduces the file exactly.
    """
    rows = sorted(records, key=lambda r: (r[0], r[1]))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_s", "sensor_id", "manual", "key", "displacement_mm"])
        for t_us, sensor_id, counts in rows:
            entry = calibration.get(sensor_id)
            if entry is None:
                raise CalibrationError(
                    f"sensor {sensor_id} has no calibration entry")
            manual, key = key_map.get(sensor_id, (0, 0))
            w.writerow([
                f"{t_us / 1e6:.6f}", sensor_id, manual, key,
                f"{entry.displacement(counts):.6f}",
            ])
