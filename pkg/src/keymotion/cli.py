"""Operator command line: simulate, calibrate, serve, export, init.

Every flag falls back to an environment variable (``KEYMOTION_<FLAG>``) and
then to its built-in default, so headless runs can be configured without
editing command lines; precedence is CLI flag > environment > default.  All
paths are deterministic under a fixed --seed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import report as report_mod
from .action import (GestureSpec, export_events_csv, export_traces_csv)
from .detect import ThresholdDetector, detect_pluck_features
from .errors import CalibrationError, ValidationError
from .events import KeyEvent, velocity_from_time
from .instrument import Instrument
from .midi import MidiRoute, write_smf
from .serve import run_service
from .session import default_session, load_session, save_session

SCORE_SCHEMA_VERSION = 1


def _env(name: str, default=None):
    return os.environ.get(f"KEYMOTION_{name.upper()}", default)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="keymotion",
        description="Optical key-motion capture toolchain (simulated instrument).",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run a score end to end and write artifacts")
    sim.add_argument("--session", default=_env("session"), required=_env("session") is None)
    sim.add_argument("--score", default=_env("score"), required=_env("score") is None)
    sim.add_argument("--seed", type=int, default=int(_env("seed", 0)))
    sim.add_argument("--out", default=_env("out", "out"))
    sim.add_argument("--rate", type=float, default=250.0,
                     help="trace export sample rate (Hz)")
    sim.add_argument("--no-figure", action="store_true",
                     help="skip the trace figure (faster)")

    cal = sub.add_parser("calibrate", help="capture per-sensor calibration")
    cal.add_argument("--session", default=_env("session"), required=_env("session") is None)
    cal.add_argument("--scripted", action="store_true",
                     help="drive the simulated fixture instead of prompting")
    cal.add_argument("--seed", type=int, default=int(_env("seed", 0)))
    cal.add_argument("--sensor", type=int, default=None,
                     help="recalibrate a single sensor id")
    cal.add_argument("--limit", type=int, default=None,
                     help="calibrate at most N uncalibrated sensors")
    cal.add_argument("--anchors", type=int, default=3,
                     help="number of mid-travel anchor captures (0-5)")
    cal.add_argument("--out", default=None,
                     help="write the updated session here (default: in place)")

    srv = sub.add_parser("serve", help="serve the streaming console endpoint")
    srv.add_argument("--session", default=_env("session"), required=_env("session") is None)
    srv.add_argument("--bind", default=_env("bind", "127.0.0.1:8765"))
    srv.add_argument("--seed", type=int, default=int(_env("seed", 0)))
    srv.add_argument("--pace", type=float, default=float(_env("pace", 1.0)),
                     help="simulated seconds per wall second")

    exp = sub.add_parser("export", help="convert a trace file to CSV or SMF")
    exp.add_argument("--session", default=_env("session"), required=_env("session") is None)
    exp.add_argument("--trace", default=_env("trace"), required=_env("trace") is None)
    exp.add_argument("--format", choices=("csv", "smf"), required=True)
    exp.add_argument("--out", default=_env("out"), required=_env("out") is None)

    init = sub.add_parser("init", help="write a demo session and score")
    init.add_argument("--out", default=_env("out", "demo"))
    init.add_argument("--manuals", type=int, default=2)
    init.add_argument("--keys", type=int, default=61)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args)
        if args.command == "calibrate":
            return cmd_calibrate(args)
        if args.command == "serve":
            return cmd_serve(args)
        if args.command == "export":
            return cmd_export(args)
        if args.command == "init":
            return cmd_init(args)
    except (ValidationError, CalibrationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


# -- score files ---------------------------------------------------------------


def load_score(path) -> list[tuple]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema_version") != SCORE_SCHEMA_VERSION:
        raise ValidationError(
            f"unsupported score schema_version {doc.get('schema_version')!r}")
    entries = []
    for note in doc["notes"]:
        gesture = GestureSpec(
            press_duration_s=float(note.get("press_duration_s", 0.12)),
            hold_s=float(note.get("hold_s", 0.2)),
            release_duration_s=float(note.get("release_duration_s", 0.08)),
            release_style=note.get("release_style", "rapid"),
        )
        entries.append(((int(note["manual"]), int(note["key"])),
                        float(note["onset_s"]), gesture))
    return entries


def save_score(entries: list[dict], path) -> None:
    doc = {"schema_version": SCORE_SCHEMA_VERSION, "notes": entries}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    state = load_session(args.session)
    score = load_score(args.score)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    inst = Instrument(state, seed=args.seed)
    inst.start()
    inst.enumerate()
    if not inst.host.calibration:
        inst.scripted_calibration()
    else:
        for board in inst.boards:
            inst.host.push_calibration(board.config.address,
                                       board.config.sensor_ids)

    perf = inst.load_score(score)
    events = inst.run_performance(perf)

    # Ground-truth exports on the performance clock.
    traces = perf.traces(args.rate)
    gt_events = perf.events()
    export_traces_csv(traces, out / "traces.csv")
    export_events_csv(gt_events, out / "events.csv")

    route = MidiRoute(keys_per_manual=state.keys_per_manual)
    norm_events = [
        KeyEvent(kind=e.kind, manual=e.manual, key=e.key,
                 t_s=e.t_s - inst.performance_t0_s,
                 traversal_s=e.traversal_s, velocity=e.velocity)
        for e in events
    ]
    write_smf(norm_events, route, out / "performance.mid")

    # Reconstructed traces (what the sensors saw) drive feature analysis.
    detected = {}
    recon = {}
    duration = perf.duration_s + 0.3
    for key in perf.timelines:
        trace, _truth = inst.reconstructed_trace(key, args.rate, duration)
        recon[key] = trace
        detected[key] = detect_pluck_features(
            trace, state.detection, travel_mm=state.travel_mm)

    rep = report_mod.build_report(
        perf, events, detected, inst.performance_t0_s,
        state.velocity, state.detection, travel_mm=state.travel_mm)
    report_mod.write_report_json(rep, out / "report.json")
    report_mod.write_report_text(rep, out / "report.txt")
    if not args.no_figure:
        report_mod.plot_traces(recon, gt_events, detected,
                               out / "traces.png",
                               travel_mm=state.travel_mm)

    s = rep["summary"]
    print(f"wrote {out}/performance.mid, traces.csv, events.csv, "
          f"report.json, report.txt"
          + ("" if args.no_figure else ", traces.png"))
    print(f"notes: {s['note_on_events']} on / {s['note_off_events']} off; "
          f"plucks matched {s['features_matched']}/{s['ground_truth_plucks']}")
    return 0


def cmd_calibrate(args) -> int:
    state = load_session(args.session)
    if not 0 <= args.anchors <= 5:
        raise ValidationError("--anchors must be in 0..5")
    inst = Instrument(state, seed=args.seed)
    inst.start()
    inst.enumerate()
    inst.host.calibration.update(state.calibration)

    if args.sensor is not None:
        targets = [args.sensor]
    else:
        targets = [sid for sid in state.sensor_ids()
                   if sid not in state.calibration]
        if args.limit is not None:
            targets = targets[:args.limit]
    if not targets:
        print("all sensors calibrated; nothing to do")
        return 0

    fractions = tuple((i + 1) / (args.anchors + 1) for i in range(args.anchors))
    if args.scripted:
        inst.scripted_calibration(sensor_ids=targets,
                                  anchor_fractions=fractions)
    else:
        _interactive_calibration(inst, targets, fractions)

    state.calibration.update(
        {sid: inst.host.calibration[sid] for sid in targets})
    out = args.out or args.session
    save_session(state, out)
    print(f"calibrated {len(targets)} sensor(s); session written to {out}")
    return 0


def _interactive_calibration(inst, targets, fractions) -> None:
    """Per-key prompts; capture code is identical to the scripted path."""
    travel = inst.state.travel_mm
    owner = inst.state.sensor_owner()
    inst.host.capturing = True
    try:
        for sid in targets:
            key = inst.state.key_for_sensor(sid)
            print(f"sensor {sid} (manual {key[0]}, key {key[1]})")
            phases = [("rest", 0.0), ("full travel", travel)]
            phases += [(f"anchor {f * travel:.2f} mm", f * travel)
                       for f in fractions]
            captures = []
            for label, mm in phases:
                input(f"  hold the key at {label} and press Enter...")
                # The simulated fixture stands in for the operator's hand.
                inst.fixture.hold(key, mm)
                inst.scheduler.run_for(2_000)
                got = inst.host.capture_counts(owner[sid], [sid])
                inst.fixture.release(key)
                captures.append((mm, got[sid]))
            rest = captures[0][1]
            full = captures[1][1]
            anchors = [(samples, mm) for mm, samples in captures[2:]]
            inst.host.calibrate_from_captures(sid, rest, full, anchors=anchors)
            inst.host.push_calibration(owner[sid], [sid])
    finally:
        inst.host.capturing = False
        inst.fixture.release()


def cmd_serve(args) -> int:
    state = load_session(args.session)
    run_service(state, args.bind, session_path=args.session,
                seed=args.seed, pace=args.pace)
    return 0


def cmd_export(args) -> int:
    state = load_session(args.session)
    traces = _load_trace_csv(args.trace, state)
    if args.format == "csv":
        records = []
        for key, rows in traces.items():
            sid = state.sensor_for_key(*key)
            for t_s, mm in rows:
                records.append((int(round(t_s * 1e6)), sid, mm))
        with open(args.out, "w", newline="") as fh:
            import csv as _csv

            w = _csv.writer(fh)
            w.writerow(["t_s", "sensor_id", "manual", "key", "displacement_mm"])
            for t_us, sid, mm in sorted(records):
                manual, keynum = state.key_for_sensor(sid)
                w.writerow([f"{t_us / 1e6:.6f}", sid, manual, keynum,
                            f"{mm:.6f}"])
    else:  # smf
        events = _events_from_traces(traces, state)
        route = MidiRoute(keys_per_manual=state.keys_per_manual)
        write_smf(events, route, args.out)
    print(f"wrote {args.out}")
    return 0


def _load_trace_csv(path, state) -> dict:
    import csv as _csv

    traces: dict = {}
    with open(path, newline="") as fh:
        reader = _csv.DictReader(fh)
        for row in reader:
            key = row["key"]
            if ":" in key:
                manual, keynum = (int(p) for p in key.split(":"))
            else:
                manual, keynum = 1, int(key)
            traces.setdefault((manual, keynum), []).append(
                (float(row["t_s"]), float(row["displacement_mm"])))
    for rows in traces.values():
        rows.sort()
    return traces


def _events_from_traces(traces: dict, state) -> list[KeyEvent]:
    """Offline detection over displacement traces (same window semantics)."""
    events: list[KeyEvent] = []
    for (manual, keynum), rows in sorted(traces.items()):
        detector = ThresholdDetector(state.detection)
        for t_s, mm in rows:
            for ev in detector.update(int(round(t_s * 1e6)), mm):
                traversal = max((ev.exit_us - ev.entry_us) / 1e6, 1e-9)
                events.append(KeyEvent(
                    kind="note_on" if ev.kind == "on" else "note_off",
                    manual=manual, key=keynum,
                    t_s=ev.exit_us / 1e6,
                    traversal_s=traversal,
                    velocity=velocity_from_time(state.velocity, traversal),
                ))
    events.sort(key=lambda e: e.t_s)
    return events


def cmd_init(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    state = default_session(manuals=args.manuals, keys_per_manual=args.keys)
    save_session(state, out / "session.json")

    rng = np.random.default_rng(7)
    notes = []
    for i, key in enumerate([1, 3, 5, 6, 8, 10, 12, 13]):
        notes.append({
            "manual": 1,
            "key": key,
            "onset_s": round(0.2 + i * 0.25, 3),
            "press_duration_s": round(float(rng.uniform(0.13, 0.22)), 3),
            "hold_s": round(float(rng.uniform(0.1, 0.2)), 3),
            "release_duration_s": round(float(rng.uniform(0.06, 0.12)), 3),
            "release_style": "rapid" if rng.random() < 0.5 else "held",
        })
    save_score(notes, out / "score.json")
    print(f"wrote {out}/session.json and {out}/score.json")
    return 0


if __name__ == "__main__":
    sys.exit(main())
