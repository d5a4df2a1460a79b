"""Run outputs: delimited logs, summaries and rendered figures.

Every run writes a tick-level log CSV, a per-support-point path-time analysis
CSV and a JSON summary; figures render the same data (path-time diagram with
stop points against the active bound, motion profile, sweep speed curves) to
PNG files next to the CSVs. Headers are stable; downstream tooling should
select columns by name.
"""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .simloop import SimLog

LOG_BASE_COLUMNS = ["t", "ego_arc", "ego_speed", "ego_accel", "mode",
                    "s_vis_ego", "s_vis_cross", "iterations", "grad_norm",
                    "max_violation", "fallback_flag", "decisions"]
PT_COLUMNS = ["plan_t", "index", "t", "x", "v", "a", "stop_mu", "stop_sigma",
              "stop_chance", "bound", "slack"]
SWEEP_COLUMNS = ["value", "speed_at_merge", "min_speed", "terminal_speed",
                 "collisions", "min_gap", "fallbacks"]


def _fmt(value) -> str:
    if isinstance(value, float):
        if math.isnan(value):
            return ""
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return repr(float(value))  # shortest exact round-trip
    return str(value)


def log_columns(log: SimLog) -> list[str]:
    cols = list(LOG_BASE_COLUMNS)
    for vid in log.vehicle_ids:
        cols += [f"{vid}_arc", f"{vid}_speed", f"{vid}_meas_arc", f"{vid}_meas_speed"]
    return cols


def write_log_csv(log: SimLog, path) -> None:
    cols = log_columns(log)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for row in log.rows:
            writer.writerow([_fmt(row.get(c, "")) for c in cols])


def write_pt_csv(log: SimLog, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(PT_COLUMNS)
        for row in log.pt_rows:
            writer.writerow([_fmt(row.get(c, "")) for c in PT_COLUMNS])


def write_summary(summary: dict, path) -> None:
    def clean(obj):
        if isinstance(obj, float) and math.isinf(obj):
            return None
        if isinstance(obj, dict):
            return {k: clean(v) for k, v in obj.items()}
        if isinstance(obj, list):
            return [clean(v) for v in obj]
        return obj

    Path(path).write_text(json.dumps(clean(summary), indent=2, sort_keys=True) + "\n")


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row.get(c, "")) for c in SWEEP_COLUMNS])


def fig_path_time(log: SimLog, path) -> None:
    """Path-time diagram: executed motion, last plan's stop points and bound."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    t = [r["t"] for r in log.rows]
    x = [r["ego_arc"] for r in log.rows]
    ax.plot(t, x, lw=2, color="tab:blue", label="executed motion")
    if log.pt_rows:
        last_t = log.pt_rows[-1]["plan_t"]
        rows = [r for r in log.pt_rows if r["plan_t"] == last_t]
        ax.plot([r["t"] for r in rows], [r["x"] for r in rows],
                ".", color="tab:blue", ms=4, label="support points")
        bounded = [r for r in rows if math.isfinite(r["bound"])]
        ax.plot([r["t"] for r in bounded], [r["stop_chance"] for r in bounded],
                "+", color="tab:orange", ms=7, label="stop point (mu + k sigma)")
        if bounded:
            ax.step([r["t"] for r in bounded], [r["bound"] for r in bounded],
                    where="post", color="tab:red", lw=1, label="bound")
    ax.set_xlabel("t [s]")
    ax.set_ylabel("path [m]")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_profile(log: SimLog, path) -> None:
    """Speed and acceleration of the executed motion over time."""
    fig, axes = plt.subplots(2, 1, figsize=(7, 5), sharex=True)
    t = [r["t"] for r in log.rows]
    axes[0].plot(t, [r["ego_speed"] for r in log.rows], color="tab:blue")
    axes[0].set_ylabel("v [m/s]")
    axes[1].plot(t, [r["ego_accel"] for r in log.rows], color="tab:orange")
    axes[1].set_ylabel("a [m/s2]")
    axes[1].set_xlabel("t [s]")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def fig_sweep(runs: list[tuple[float, SimLog]], merge_arc: float | None, path) -> None:
    """Speed over path for every sweep member, merge point marked."""
    fig, ax = plt.subplots(figsize=(7, 4.5))
    for value, log in runs:
        ax.plot([r["ego_arc"] for r in log.rows],
                [r["ego_speed"] for r in log.rows], label=f"{value:g}")
    if merge_arc is not None:
        ax.axvline(merge_arc, color="tab:red", ls="--", lw=1)
    ax.set_xlabel("path [m]")
    ax.set_ylabel("v [m/s]")
    ax.legend(loc="best", fontsize=8, title="swept value")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def write_run_outputs(log: SimLog, out_dir, plots: bool = True) -> dict:
    """Write the full report for one run; returns the file map."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"log": out / "log.csv", "pt": out / "pt_analysis.csv",
             "summary": out / "summary.json"}
    write_log_csv(log, files["log"])
    write_pt_csv(log, files["pt"])
    write_summary(log.summary, files["summary"])
    if plots:
        files["fig_path_time"] = out / "fig_path_time.png"
        files["fig_profile"] = out / "fig_profile.png"
        fig_path_time(log, files["fig_path_time"])
        fig_profile(log, files["fig_profile"])
    return files
