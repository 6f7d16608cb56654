"""Figures rendered from sweep CSVs and metric reports.

Everything here reads files the evaluation module already wrote, so a figure
can always be regenerated from the delimited output alone.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .evaluation import MetricsReport, SweepRow, read_sweep_csv  # noqa: E402

AXIS_LABELS = {
    "top_k_layers": "edited layers per sample",
    "target_steps": "target optimisation steps",
    "anchor_size": "anchor samples",
}


def plot_sweep(rows: list[SweepRow], axis: str | None, out_path) -> Path:
    """Fix ratio and test-accuracy drop against the swept value, on twin y axes."""
    xs = [r.value for r in rows]
    fig, ax = plt.subplots(figsize=(5.0, 3.4), dpi=120)
    ax.plot(xs, [100 * r.fix_ratio for r in rows], "o-", color="tab:blue", label="fix ratio")
    ax.set_ylabel("fix ratio (%)", color="tab:blue")
    ax.set_xlabel(AXIS_LABELS.get(axis or "", axis or "value"))
    twin = ax.twinx()
    twin.plot(xs, [r.delta_acc_pp for r in rows], "s--", color="tab:red", label="test drop")
    twin.set_ylabel("test accuracy drop (pp)", color="tab:red")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out)
    plt.close(fig)
    return out


def plot_sweep_csv(csv_path, out_path=None) -> Path:
    axis, rows = read_sweep_csv(csv_path)
    return plot_sweep(rows, axis, out_path or Path(csv_path).with_suffix(".png"))


def plot_reports(reports: list[MetricsReport], out_path) -> Path:
    names = [r.method for r in reports]
    fig, axes = plt.subplots(1, 3, figsize=(9.0, 3.0), dpi=120)
    panels = (
        ("fix ratio (%)", [100 * r.fix_ratio for r in reports]),
        ("test drop (pp)", [r.delta_acc_pp for r in reports]),
        ("sec / sample", [r.edit_time_s_per_sample for r in reports]),
    )
    for ax, (title, vals) in zip(axes, panels):
        ax.bar(names, vals, color="tab:gray")
        ax.set_title(title, fontsize=9)
        ax.tick_params(axis="x", labelrotation=30, labelsize=8)
    fig.tight_layout()
    out = Path(out_path)
    fig.savefig(out)
    plt.close(fig)
    return out
