"""Simulation reports: detected-vs-ground-truth tables and trace figures.

The report path renders stacked key-motion figures (shared time and
displacement axes, pluck markers) next to the delimited outputs, so a run
can be eyeballed the way bench traces are.
"""

from __future__ import annotations

import json

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .detect import smooth_trace

FIG_DPI = 120


def build_report(perf, events, detected_features, perf_t0_s, velocity_curve,
                 detection_cfg, travel_mm=9.0) -> dict:
    """Summarize a simulated run against its ground truth.

    ``events`` are host KeyEvents (absolute session time);
    ``detected_features`` maps key -> [(t_s, mm)] in performance time.
    """
    gt = perf.events()
    notes = []
    matched_on = 0
    total_strikes = 0
    for key in sorted(perf.timelines, key=str):
        g = gt[key]
        ons = [e for e in events if (e.manual, e.key) == key and e.kind == "note_on"]
        offs = [e for e in events if (e.manual, e.key) == key and e.kind == "note_off"]
        if g.strike_time_s is not None:
            total_strikes += 1
        entry = {
            "manual": key[0],
            "key": key[1],
            "strike_time_s": g.strike_time_s,
            "release_cross_time_s": g.release_cross_time_s,
            "note_on_time_s": None,
            "note_on_delta_ms": None,
            "note_on_velocity": None,
            "note_off_time_s": None,
            "note_off_velocity": None,
            "features_mm": [round(mm, 3) for _, mm in detected_features.get(key, [])],
        }
        if ons:
            on = ons[0]
            t_on = on.t_s - perf_t0_s
            entry["note_on_time_s"] = round(t_on, 6)
            entry["note_on_velocity"] = on.velocity
            if g.strike_time_s is not None:
                entry["note_on_delta_ms"] = round((t_on - g.strike_time_s) * 1e3, 3)
                matched_on += 1
        if offs:
            off = offs[0]
            entry["note_off_time_s"] = round(off.t_s - perf_t0_s, 6)
            entry["note_off_velocity"] = off.velocity
        notes.append(entry)

    n_gt_plucks = sum(len(g.pluck_times_s) for g in gt.values())
    n_matched_features = 0
    n_features = 0
    for key, feats in detected_features.items():
        truth = gt[key].pluck_displacements_mm
        n_features += len(feats)
        used = set()
        for _, mm in feats:
            for j, pd in enumerate(truth):
                if j not in used and abs(mm - pd) <= 0.5:
                    used.add(j)
                    n_matched_features += 1
                    break

    summary = {
        "keys": len(perf.timelines),
        "ground_truth_strikes": total_strikes,
        "note_on_events": sum(1 for e in events if e.kind == "note_on"),
        "note_off_events": sum(1 for e in events if e.kind == "note_off"),
        "note_on_matched": matched_on,
        "ground_truth_plucks": n_gt_plucks,
        "features_detected": n_features,
        "features_matched": n_matched_features,
        "feature_recall": (n_matched_features / n_gt_plucks
                           if n_gt_plucks else None),
        "velocity_curve": {"t_min_s": velocity_curve.t_min_s,
                           "t_max_s": velocity_curve.t_max_s,
                           "shape": velocity_curve.shape},
        "on_window_mm": list(detection_cfg.on_window_mm),
        "travel_mm": travel_mm,
    }
    return {"summary": summary, "notes": notes}


def write_report_json(report: dict, path) -> None:
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report_text(report: dict, path) -> None:
    s = report["summary"]
    lines = [
        "simulation report",
        "=================",
        f"keys played:            {s['keys']}",
        f"ground-truth strikes:   {s['ground_truth_strikes']}",
        f"note-on events:         {s['note_on_events']} "
        f"(matched {s['note_on_matched']})",
        f"note-off events:        {s['note_off_events']}",
        f"ground-truth plucks:    {s['ground_truth_plucks']}",
        f"features detected:      {s['features_detected']} "
        f"(matched {s['features_matched']})",
    ]
    if s["feature_recall"] is not None:
        lines.append(f"feature recall:         {s['feature_recall']:.1%}")
    lines.append("")
    lines.append("manual key   strike_s   on_delta_ms  vel_on  vel_off  features_mm")
    for n in report["notes"]:
        lines.append(
            f"{n['manual']:>6} {n['key']:>3} "
            f"{_fmt(n['strike_time_s'], '10.4f')} "
            f"{_fmt(n['note_on_delta_ms'], '12.2f')} "
            f"{_fmt(n['note_on_velocity'], '7d')} "
            f"{_fmt(n['note_off_velocity'], '8d')}  "
            f"{n['features_mm']}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def _fmt(value, spec: str) -> str:
    width = int(spec.split(".")[0].rstrip("df"))
    if value is None:
        return "-".rjust(width)
    return format(value, spec)


def plot_traces(traces: dict, gt_events: dict, detected: dict, path,
                travel_mm: float = 9.0, smooth: int = 1,
                title: str = "key lever displacement") -> None:
    """Stacked per-key trace plot with pluck markers, shared axes.

    ``traces``: key -> DisplacementTrace (performance time).
    ``gt_events``: key -> GroundTruthEvents (vertical lines at plucks).
    ``detected``: key -> [(t_s, mm)] detected features (dots).
    """
    keys = sorted(traces, key=str)
    n = max(len(keys), 1)
    fig, axes = plt.subplots(n, 1, figsize=(9, 1.6 * n + 0.8),
                             sharex=True, squeeze=False)
    for ax, key in zip(axes[:, 0], keys):
        trace = traces[key]
        y = smooth_trace(trace.samples_mm, smooth)
        ax.plot(trace.times(), y, lw=0.9, color="#2b5d8a")
        g = gt_events.get(key)
        if g is not None:
            for t, mm in zip(g.pluck_times_s, g.pluck_displacements_mm):
                ax.axvline(t, color="#888888", ls=":", lw=0.8)
                ax.plot([t], [mm], marker="x", color="#555555", ms=5)
        for t, mm in detected.get(key, []):
            ax.plot([t], [mm], marker="o", mfc="none", color="#c23b22", ms=7)
        ax.set_ylim(-0.8, travel_mm + 0.8)
        ax.set_ylabel(f"{key[0]}:{key[1]}\nmm", rotation=0, ha="right",
                      va="center", fontsize=8)
        ax.grid(alpha=0.25)
    axes[-1, 0].set_xlabel("time (s)")
    axes[0, 0].set_title(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=FIG_DPI)
    plt.close(fig)
