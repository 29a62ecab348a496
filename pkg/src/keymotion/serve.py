"""Streaming service: WebSocket endpoint over a live simulated instrument.

Exposes the message-oriented protocol documented in docs/api.md: board
status, mode control, a per-key calibration wizard (with a scripted fixture
for CI and rehearsal), live position frames, and key events.  The simulation
advances paced against the wall clock; commands that need bus round-trips
(polls, mode sets) advance it synchronously in between.

All messages are single JSON objects.  Requests carry a client-generated
``request_id`` which is echoed on the matching ack/nack, so a reconnecting
client can retry without double-committing a capture.
"""

from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import dataclass, field

import numpy as np
import websockets

from .action import GestureSpec, KeystrokeMotion
from .calibration import entry_to_dict
from .errors import CalibrationError, ConfigError, ValidationError
from .host import MODE_MIDI, MODE_POSITION_STREAM, HostMode
from .instrument import Instrument
from .session import SessionState, save_session

log = logging.getLogger(__name__)

TICK_WALL_S = 0.02
CAPTURE_SAMPLES = 25


@dataclass
class WizardState:
    """One in-flight calibration wizard (single instance per instrument)."""

    sensor_id: int | None = None
    key: tuple[int, int] | None = None
    rest: list[int] | None = None
    full: list[int] | None = None
    anchors: list[tuple[list[int], float]] = field(default_factory=list)
    committed_ids: dict[int, str] = field(default_factory=dict)

    def begin(self, sensor_id: int, key: tuple[int, int]) -> None:
        self.sensor_id = sensor_id
        self.key = key
        self.rest = None
        self.full = None
        self.anchors = []

    def clear(self) -> None:
        self.sensor_id = None
        self.key = None
        self.rest = None
        self.full = None
        self.anchors = []


class InstrumentService:
    """Shared simulation state behind the WebSocket handlers."""

    def __init__(self, state: SessionState, session_path=None, seed: int = 0,
                 pace: float = 1.0):
        self.state = state
        self.session_path = session_path
        self.pace = pace
        self.instrument = Instrument(state, seed=seed)
        self.instrument.start()
        self.instrument.enumerate()
        self.wizard = WizardState()
        self.clients: set = set()
        self._gesture_serial = 0
        host = self.instrument.host
        host.event_sink = self._on_key_event
        host.position_sink = self._on_position
        self._outbox: list[str] = []

    # -- broadcast -----------------------------------------------------------

    def _queue(self, msg: dict) -> None:
        self._outbox.append(json.dumps(msg))

    def _on_key_event(self, event) -> None:
        self._queue({
            "type": "key_event",
            "kind": event.kind,
            "manual": event.manual,
            "key": event.key,
            "t_s": round(event.t_s, 6),
            "traversal_s": round(event.traversal_s, 6),
            "velocity": event.velocity,
        })

    def _on_position(self, rec) -> None:
        host = self.instrument.host
        entry = host.calibration.get(rec.sensor_id)
        manual, key = host.key_map.get(rec.sensor_id, (0, 0))
        msg = {
            "type": "position",
            "sensor": rec.sensor_id,
            "manual": manual,
            "key": key,
            "t_s": round(rec.t_us / 1e6, 6),
            "counts": rec.counts,
        }
        if entry is not None:
            msg["mm"] = round(float(entry.displacement(rec.counts)), 4)
        self._queue(msg)

    async def flush(self) -> None:
        if not self._outbox or not self.clients:
            self._outbox = self._outbox[-10000:]
            return
        payload = self._outbox
        self._outbox = []
        dead = set()
        for ws in self.clients:
            try:
                for text in payload:
                    await ws.send(text)
            except websockets.ConnectionClosed:
                dead.add(ws)
        self.clients -= dead

    # -- command handling ------------------------------------------------------

    def handle(self, msg: dict) -> list[dict]:
        """Execute one client command; returns direct replies."""
        kind = msg.get("type")
        rid = msg.get("request_id")
        try:
            if kind == "ping":
                return [{"type": "pong", "request_id": rid}]
            if kind == "status_req":
                return [self._status(rid)]
            if kind == "set_mode":
                return [self._set_mode(msg, rid)]
            if kind == "calib_begin":
                return [self._calib_begin(msg, rid)]
            if kind == "calib_capture":
                return [self._calib_capture(msg, rid)]
            if kind == "calib_commit":
                return [self._calib_commit(msg, rid)]
            if kind == "calib_abort":
                return [self._calib_abort(rid)]
            if kind == "inject_gesture":
                return [self._inject_gesture(msg, rid)]
            if kind == "save_session":
                return [self._save_session(rid)]
            return [_nack(rid, f"unknown message type {kind!r}")]
        except (ValidationError, ConfigError, CalibrationError) as exc:
            return [_nack(rid, str(exc))]

    def _status(self, rid) -> dict:
        inst = self.instrument
        host = inst.host
        return {
            "type": "status",
            "request_id": rid,
            "clock_s": round(inst.scheduler.now_us / 1e6, 6),
            "mode": host.mode.mode,
            "subset": sorted(host.mode.subset),
            "calibrated_sensors": len(host.calibration),
            "boards": [
                {"address": b.address, "board_id": b.board_id,
                 "sensor_count": b.sensor_count}
                for b in host.roster
            ],
            "instrument": {
                "manuals": self.state.manuals,
                "keys_per_manual": self.state.keys_per_manual,
                "travel_mm": self.state.travel_mm,
            },
            "detection": {
                "on_window_mm": list(self.state.detection.on_window_mm),
                "off_window_mm": list(self.state.detection.off_window_mm),
                "rearm_mm": self.state.detection.rearm_mm,
            },
        }

    def _set_mode(self, msg: dict, rid) -> dict:
        mode = msg.get("mode")
        host = self.instrument.host
        if mode == MODE_MIDI:
            host.set_mode(HostMode(mode=MODE_MIDI))
        elif mode == MODE_POSITION_STREAM:
            keys = msg.get("subset_keys") or []
            subset = tuple(
                self.state.sensor_for_key(int(m), int(k)) for m, k in keys)
            host.set_mode(HostMode(mode=MODE_POSITION_STREAM, subset=subset))
            host.positions.clear()
        else:
            return _nack(rid, f"unknown mode {mode!r}")
        return _ack(rid, mode=mode)

    # -- calibration wizard ------------------------------------------------------

    def _calib_begin(self, msg: dict, rid) -> dict:
        manual, key = int(msg["manual"]), int(msg["key"])
        sensor_id = self.state.sensor_for_key(manual, key)
        if self.wizard.sensor_id is not None and self.wizard.sensor_id != sensor_id:
            return _nack(rid, "another calibration is in progress")
        self.wizard.begin(sensor_id, (manual, key))
        self.instrument.host.capturing = True
        return _ack(rid, sensor=sensor_id)

    def _capture_once(self, position_mm: float | None) -> list[int]:
        inst = self.instrument
        wiz = self.wizard
        owner = inst.state.sensor_owner()[wiz.sensor_id]
        if position_mm is not None:
            inst.fixture.hold(wiz.key, position_mm)
            inst.scheduler.run_for(2_000)
        try:
            captures = inst.host.capture_counts(
                owner, [wiz.sensor_id], n_samples=CAPTURE_SAMPLES)
        finally:
            if position_mm is not None:
                inst.fixture.release(wiz.key)
        return captures[wiz.sensor_id]

    def _calib_capture(self, msg: dict, rid) -> dict:
        wiz = self.wizard
        if wiz.sensor_id is None:
            return _nack(rid, "no calibration in progress (send calib_begin)")
        phase = msg.get("phase")
        fixture = bool(msg.get("fixture", False))
        travel = self.state.travel_mm
        if phase == "rest":
            held = 0.0 if fixture else None
            wiz.rest = self._capture_once(held)
            samples = wiz.rest
        elif phase == "full":
            held = travel if fixture else None
            wiz.full = self._capture_once(held)
            samples = wiz.full
        elif phase == "anchor":
            position = float(msg["position_mm"])
            if not 0 < position < travel:
                return _nack(rid, f"anchor position {position} outside (0, {travel})")
            held = position if fixture else None
            samples = self._capture_once(held)
            wiz.anchors.append((samples, position))
        else:
            return _nack(rid, f"unknown capture phase {phase!r}")
        median = sorted(samples)[len(samples) // 2]
        return _ack(rid, phase=phase, median=median, n=len(samples))

    def _calib_commit(self, msg: dict, rid) -> dict:
        wiz = self.wizard
        if wiz.sensor_id is None:
            # Reconnect after a successful commit: same request id acks again.
            for sensor, req in wiz.committed_ids.items():
                if rid is not None and req == rid:
                    return _ack(rid, sensor=sensor, repeated=True)
            return _nack(rid, "no calibration in progress")
        if wiz.rest is None or wiz.full is None:
            return _nack(rid, "capture rest and full travel before committing")
        host = self.instrument.host
        sensor_id = wiz.sensor_id
        try:
            entry = host.calibrate_from_captures(
                sensor_id, wiz.rest, wiz.full,
                anchors=sorted(wiz.anchors, key=lambda a: a[1]))
        except CalibrationError as exc:
            # Leave the wizard at the capture stage so the client can retry
            # the failed phase.
            wiz.full = None
            return _nack(rid, str(exc))
        owner = self.state.sensor_owner()[sensor_id]
        host.push_calibration(owner, [sensor_id])
        self.state.calibration[sensor_id] = entry
        if rid is not None:
            wiz.committed_ids[sensor_id] = rid
        wiz.clear()
        host.capturing = False
        self._queue({"type": "calib_entry", "sensor": sensor_id,
                     **entry_to_dict(entry)})
        return _ack(rid, sensor=sensor_id)

    def _calib_abort(self, rid) -> dict:
        self.wizard.clear()
        self.instrument.host.capturing = False
        self.instrument.fixture.release()
        return _ack(rid)

    # -- demo/world control ------------------------------------------------------

    def _inject_gesture(self, msg: dict, rid) -> dict:
        manual, key = int(msg["manual"]), int(msg["key"])
        self.state.sensor_for_key(manual, key)  # compass check
        gesture = GestureSpec(
            onset_s=0.0,
            press_duration_s=float(msg.get("press_duration_s", 0.15)),
            hold_s=float(msg.get("hold_s", 0.2)),
            release_duration_s=float(msg.get("release_duration_s", 0.08)),
            release_style=msg.get("release_style", "rapid"),
        )
        self._gesture_serial += 1
        motion = KeystrokeMotion(
            self.state.action, gesture,
            np.random.default_rng(self._gesture_serial))
        start_s = self.instrument.scheduler.now_us / 1e6 + 0.05
        self.instrument.world.inject_motion((manual, key), motion, start_s)
        return _ack(rid, manual=manual, key=key,
                    duration_s=round(motion.end_s, 4))

    def _save_session(self, rid) -> dict:
        if self.session_path is None:
            return _nack(rid, "service started without a session path")
        self.state.calibration.update(self.instrument.host.calibration)
        save_session(self.state, self.session_path)
        return _ack(rid, path=str(self.session_path))

    # -- pacing --------------------------------------------------------------

    async def run(self) -> None:
        while True:
            await asyncio.sleep(TICK_WALL_S)
            self.instrument.scheduler.run_for(
                int(TICK_WALL_S * self.pace * 1e6))
            await self.flush()


def _ack(rid, **extra) -> dict:
    return {"type": "ack", "request_id": rid, **extra}


def _nack(rid, reason: str) -> dict:
    return {"type": "nack", "request_id": rid, "reason": reason}


async def _client_handler(service: InstrumentService, ws) -> None:
    service.clients.add(ws)
    try:
        async for raw in ws:
            try:
                msg = json.loads(raw)
            except json.JSONDecodeError:
                await ws.send(json.dumps(_nack(None, "invalid JSON")))
                continue
            for reply in service.handle(msg):
                await ws.send(json.dumps(reply))
            await service.flush()
    except websockets.ConnectionClosed:
        pass
    finally:
        service.clients.discard(ws)
        if service.wizard.sensor_id is not None and not service.clients:
            # Disconnect mid-wizard: discard the capture safely.
            service.wizard.clear()
            service.instrument.host.capturing = False
            service.instrument.fixture.release()


async def serve_forever(state: SessionState, host: str, port: int,
                        session_path=None, seed: int = 0,
                        pace: float = 1.0, ready_event=None) -> None:
    service = InstrumentService(state, session_path=session_path, seed=seed,
                                pace=pace)

    async def handler(ws):
        await _client_handler(service, ws)

    async with websockets.serve(handler, host, port) as server:
        bound = server.sockets[0].getsockname() if server.sockets else (host, port)
        log.info("serving on ws://%s:%s", bound[0], bound[1])
        print(f"listening on ws://{bound[0]}:{bound[1]}", flush=True)
        if ready_event is not None:
            ready_event.set()
        await service.run()


def run_service(state: SessionState, bind: str, session_path=None,
                seed: int = 0, pace: float = 1.0) -> None:
    host, _, port = bind.rpartition(":")
    asyncio.run(serve_forever(state, host or "127.0.0.1", int(port),
                              session_path=session_path, seed=seed, pace=pace))
