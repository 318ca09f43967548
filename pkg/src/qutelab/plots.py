"""Report figures, rendered headless to PNG files next to the CSVs.

Three figure kinds:
  reliability diagram   per-bin accuracy vs confidence, with the gap bars
  PR curve              precision/recall over the threshold sweep
  EV loss trace         per-exit batch loss over training steps

Everything draws from the delimited artifacts an experiment run wrote,
so figures can be re-rendered later without touching any model.
"""

from __future__ import annotations

import csv
import os
from collections import defaultdict

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)


def reliability_figure(bins, path: str, title: str = "reliability") -> None:
    """bins: (lo, hi, count, accuracy, mean_confidence) rows."""
    centers = [(lo + hi) / 2.0 for lo, hi, _, _, _ in bins]
    width = bins[0][1] - bins[0][0] if bins else 0.0
    accs = [acc for _, _, _, acc, _ in bins]
    occupied = [cnt > 0 for _, _, cnt, _, _ in bins]
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    ax.plot([0, 1], [0, 1], ls="--", lw=1.0, color="gray", label="perfect")
    ax.bar([c for c, o in zip(centers, occupied) if o],
           [a for a, o in zip(accs, occupied) if o],
           width=width * 0.9, color="#4878a8", edgecolor="black", lw=0.4,
           label="accuracy")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1)
    ax.set_xlabel("confidence")
    ax.set_ylabel("accuracy")
    ax.set_title(title)
    ax.legend(loc="upper left", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def pr_curve_figure(points, path: str, title: str = "accuracy-drop detection") -> None:
    """points: (rho, precision, recall) rows from the sweep."""
    pts = sorted(points, key=lambda t: t[2])
    fig, ax = plt.subplots(figsize=(4.2, 4.0))
    ax.plot([r for _, _, r in pts], [p for _, p, _ in pts], marker="o", ms=3.5,
            lw=1.2, color="#a84848")
    for rho, p, r in points:
        ax.annotate(f"{rho:.1f}", (r, p), fontsize=6, xytext=(2, 2),
                    textcoords="offset points")
    ax.set_xlim(-0.02, 1.02)
    ax.set_ylim(-0.02, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ev_trace_figure(rows, path: str, title: str = "per-exit batch loss") -> None:
    """rows: (step, exit_name, loss). One line per exit, total included."""
    series = defaultdict(list)
    for step, name, loss in rows:
        series[name].append((step, loss))
    fig, ax = plt.subplots(figsize=(5.4, 3.6))
    for name in sorted(series):
        pts = series[name]
        ax.plot([s for s, _ in pts], [v for _, v in pts], lw=0.9, alpha=0.85, label=name)
    ax.set_xlabel("training step")
    ax.set_ylabel("batch loss")
    ax.set_yscale("log")
    ax.set_title(title)
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ---------------------------------------------------------------------------
# rendering from a run directory


def _read_csv_rows(path: str) -> list:
    with open(path, newline="") as f:
        rd = csv.reader(f)
        header = next(rd)
        return [dict(zip(header, row)) for row in rd]


def render_report_figures(results: dict, out_dir: str) -> list:
    """Render one figure per matching CSV artifact already in out_dir.
    Returns the PNG names written."""
    written = []
    name = results.get("name", results.get("method", "run"))
    for fname in sorted(os.listdir(out_dir)):
        base, ext = os.path.splitext(fname)
        if ext != ".csv":
            continue
        full = os.path.join(out_dir, fname)
        if base.startswith("reliability_seed"):
            rows = _read_csv_rows(full)
            bins = [(float(r["bin_lo"]), float(r["bin_hi"]), int(r["count"]),
                     float(r["accuracy"]), float(r["mean_confidence"])) for r in rows]
            png = base + ".png"
            reliability_figure(bins, os.path.join(out_dir, png),
                               title=f"{name} {base.replace('_', ' ')}")
            written.append(png)
        elif base.startswith("pr_curve_seed"):
            rows = _read_csv_rows(full)
            pts = [(float(r["rho"]), float(r["precision"]), float(r["recall"]))
                   for r in rows]
            png = base + ".png"
            pr_curve_figure(pts, os.path.join(out_dir, png),
                            title=f"{name} {base.replace('_', ' ')}")
            written.append(png)
        elif base.startswith("ev_trace_seed"):
            rows = _read_csv_rows(full)
            trace = [(int(r["step"]), r["exit"], float(r["loss"])) for r in rows]
            if trace:
                png = base + ".png"
                ev_trace_figure(trace, os.path.join(out_dir, png),
                                title=f"{name} {base.replace('_', ' ')}")
                written.append(png)
    return written
