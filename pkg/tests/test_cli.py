import json
import os
import subprocess
import sys

import pytest

from keymotion import cli
from keymotion.midi import read_smf
from keymotion.session import default_session, load_session, save_session


@pytest.fixture()
def demo(tmp_path):
    assert cli.main(["init", "--out", str(tmp_path), "--manuals", "1",
                     "--keys", "16"]) == 0
    return tmp_path


def write_score(path, notes):
    cli.save_score(notes, path)
    return path


def note(key, onset, manual=1, press=0.15):
    return {"manual": manual, "key": key, "onset_s": onset,
            "press_duration_s": press, "hold_s": 0.15,
            "release_duration_s": 0.08, "release_style": "rapid"}


def test_init_writes_session_and_score(demo):
    state = load_session(demo / "session.json")
    assert state.sensor_count == 16
    score = cli.load_score(demo / "score.json")
    assert len(score) == 8


def test_simulate_smoke_artifacts(demo, tmp_path):
    out = tmp_path / "out"
    rc = cli.main(["simulate", "--session", str(demo / "session.json"),
                   "--score", str(demo / "score.json"),
                   "--seed", "3", "--out", str(out)])
    assert rc == 0
    for name in ("performance.mid", "traces.csv", "report.json",
                 "report.txt", "events.csv", "traces.png"):
        assert (out / name).exists(), name
    report = json.loads((out / "report.json").read_text())
    assert report["summary"]["note_on_events"] == 8
    assert report["summary"]["note_off_events"] == 8


def test_simulate_disengaged_zero_notes(demo, tmp_path):
    state = load_session(demo / "session.json")
    state.action = type(state.action)(pluck_points_mm=())
    session = tmp_path / "disengaged.json"
    save_session(state, session)
    score = write_score(tmp_path / "score.json",
                        [note(1, 0.1), note(3, 0.6)])
    out = tmp_path / "out"
    rc = cli.main(["simulate", "--session", str(session), "--score",
                   str(score), "--seed", "1", "--out", str(out),
                   "--no-figure"])
    assert rc == 0
    notes, _ = read_smf(out / "performance.mid")
    assert notes == []
    report = json.loads((out / "report.json").read_text())
    assert report["summary"]["ground_truth_plucks"] == 0
    assert report["summary"]["features_detected"] == 0


def test_simulate_deterministic_bytes(demo, tmp_path):
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        rc = cli.main(["simulate", "--session", str(demo / "session.json"),
                       "--score", str(demo / "score.json"),
                       "--seed", "42", "--out", str(out), "--no-figure"])
        assert rc == 0
        outs.append(out)
    for name in ("performance.mid", "traces.csv", "events.csv", "report.json"):
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_calibrate_scripted_resume_and_isolation(demo, tmp_path):
    session = demo / "session.json"
    first = tmp_path / "first.json"
    rc = cli.main(["calibrate", "--session", str(session), "--scripted",
                   "--limit", "10", "--out", str(first)])
    assert rc == 0
    partial = load_session(first)
    assert sorted(partial.calibration) == list(range(10))

    full = tmp_path / "full.json"
    rc = cli.main(["calibrate", "--session", str(first), "--scripted",
                   "--out", str(full)])
    assert rc == 0
    complete = load_session(full)
    assert sorted(complete.calibration) == list(range(16))
    # keys 1-10 preserved bit-for-bit from the first pass
    for sid in range(10):
        assert (complete.calibration[sid].raw_rest
                == partial.calibration[sid].raw_rest)
        assert (complete.calibration[sid].captured_at
                == partial.calibration[sid].captured_at)

    redo = tmp_path / "redo.json"
    rc = cli.main(["calibrate", "--session", str(full), "--scripted",
                   "--sensor", "4", "--out", str(redo)])
    assert rc == 0
    redone = load_session(redo)
    assert redone.calibration[4] != complete.calibration[4]
    for sid in set(range(16)) - {4}:
        assert redone.calibration[sid] == complete.calibration[sid]


def test_export_csv_and_smf(demo, tmp_path):
    out = tmp_path / "sim"
    assert cli.main(["simulate", "--session", str(demo / "session.json"),
                     "--score", str(demo / "score.json"), "--seed", "3",
                     "--out", str(out), "--no-figure"]) == 0
    csv_out = tmp_path / "positions.csv"
    assert cli.main(["export", "--session", str(demo / "session.json"),
                     "--trace", str(out / "traces.csv"),
                     "--format", "csv", "--out", str(csv_out)]) == 0
    lines = csv_out.read_text().splitlines()
    assert lines[0] == "t_s,sensor_id,manual,key,displacement_mm"
    assert len(lines) > 100

    smf_out = tmp_path / "from_trace.mid"
    assert cli.main(["export", "--session", str(demo / "session.json"),
                     "--trace", str(out / "traces.csv"),
                     "--format", "smf", "--out", str(smf_out)]) == 0
    notes, _ = read_smf(smf_out)
    kinds = [n.kind for n in notes]
    assert kinds.count("note_on") == 8
    assert kinds.count("note_off") == 8


def test_env_var_overrides(demo, tmp_path, monkeypatch):
    out = tmp_path / "envout"
    monkeypatch.setenv("KEYMOTION_SESSION", str(demo / "session.json"))
    monkeypatch.setenv("KEYMOTION_SCORE", str(demo / "score.json"))
    monkeypatch.setenv("KEYMOTION_OUT", str(out))
    # env supplies everything; flags omitted entirely
    rc = cli.main(["simulate", "--no-figure"])
    assert rc == 0
    assert (out / "performance.mid").exists()


def test_randomized_score_report_recall(tmp_path):
    # 100 randomized single-manual gestures through the full CLI pipeline:
    # the report must show >= 95% pluck-feature recall at +-0.5 mm
    import numpy as np

    from keymotion.session import default_session as _ds

    state = _ds(manuals=1, keys_per_manual=16, pluck_points_mm=(5.5,))
    session = tmp_path / "session.json"
    save_session(state, session)
    rng = np.random.default_rng(31)
    notes = []
    for i in range(100):
        notes.append({
            "manual": 1,
            "key": (i % 16) + 1,
            "onset_s": round(0.2 + i * 0.45, 3),
            "press_duration_s": round(float(rng.uniform(0.08, 0.25)), 3),
            "hold_s": round(float(rng.uniform(0.05, 0.2)), 3),
            "release_duration_s": round(float(rng.uniform(0.06, 0.15)), 3),
            "release_style": "rapid" if rng.random() < 0.5 else "held",
        })
    score = write_score(tmp_path / "score.json", notes)
    out = tmp_path / "out"
    rc = cli.main(["simulate", "--session", str(session), "--score",
                   str(score), "--seed", "6", "--out", str(out),
                   "--no-figure"])
    assert rc == 0
    report = json.loads((out / "report.json").read_text())
    s = report["summary"]
    assert s["ground_truth_plucks"] == 100
    assert s["feature_recall"] >= 0.95
    assert s["note_on_events"] == 100
    assert s["note_off_events"] == 100


def test_error_exit_code(tmp_path):
    bad = tmp_path / "nope.json"
    bad.write_text(json.dumps({"schema_version": 99}))
    rc = cli.main(["simulate", "--session", str(bad), "--score", str(bad),
                   "--out", str(tmp_path / "x")])
    assert rc == 2


def test_console_script_entry_point():
    proc = subprocess.run([sys.executable, "-m", "keymotion.cli", "--help"],
                          capture_output=True, text=True)
    assert proc.returncode == 0
    for sub in ("simulate", "calibrate", "serve", "export"):
        assert sub in proc.stdout
