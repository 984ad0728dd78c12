"""Evaluation reports: aligned text tables, delimited files, and figures.

Every report path emits the same numbers three ways: a human-readable table
(mean over std, one column per metric), a machine-readable CSV, and rendered
matplotlib figures saved next to them.
"""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricReport

__all__ = [
    "format_metric_table",
    "write_metric_table",
    "write_metric_csv",
    "write_metric_figures",
    "save_preview_grid",
    "write_training_curves",
]


def _fmt(value: float, decimals: int) -> str:
    if math.isinf(value):
        return "inf"
    if math.isnan(value):
        return "n/a"
    return f"{value:.{decimals}f}"


def format_metric_table(report: MetricReport) -> str:
    """Aligned table, mean over +-std, matching the documented layout."""
    lines = [
        f"{'task':<20}{'PSNR (dB)':>12}{'SSIM':>12}",
        f"{report.task:<20}{_fmt(report.psnr_mean, 2):>12}{_fmt(report.ssim_mean, 3):>12}",
        f"{'':<20}{'±' + _fmt(report.psnr_std, 2):>12}{'±' + _fmt(report.ssim_std, 3):>12}",
    ]
    if report.psnr_inf_count:
        lines.append(f"note: {report.psnr_inf_count} image(s) with zero error (PSNR = inf) "
                     "excluded from the PSNR mean/std")
    for name, p in sorted(report.p_values.items()):
        lines.append(f"wilcoxon[{name}]: p = {p:.5g}")
    return "\n".join(lines) + "\n"


def write_metric_table(report: MetricReport, path) -> None:
    Path(path).write_text(format_metric_table(report))


def write_metric_csv(report: MetricReport, path) -> None:
    lines = ["ident,psnr_db,ssim"]
    for row in report.rows:
        lines.append(f"{row.ident},{row.psnr:.6f},{row.ssim:.6f}")
    lines.append(f"MEAN,{report.psnr_mean:.6f},{report.ssim_mean:.6f}")
    lines.append(f"STD,{report.psnr_std:.6f},{report.ssim_std:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_metric_figures(report: MetricReport, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    psnrs = [r.psnr for r in report.rows if math.isfinite(r.psnr)]
    ssims = [r.ssim for r in report.rows]
    fig, axes = plt.subplots(1, 2, figsize=(9, 3.5))
    for ax, vals, label in ((axes[0], psnrs, "PSNR (dB)"), (axes[1], ssims, "SSIM")):
        if vals:
            ax.boxplot(vals, vert=True, widths=0.5)
            ax.scatter(np.ones(len(vals)) + np.linspace(-0.08, 0.08, len(vals)),
                       vals, s=12, alpha=0.7)
        ax.set_ylabel(label)
        ax.set_xticks([])
        ax.grid(True, alpha=0.3)
    fig.suptitle(f"{report.task}  (n={len(report.rows)})")
    fig.tight_layout()
    path = out_dir / "metrics_summary.png"
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_preview_grid(rows: "list[tuple[str, list[np.ndarray]]]", path,
                      vmin: float = 0.0, vmax: float = 1.0) -> Path:
    """Rows of grayscale panels (one labelled row per sample) as an 8-bit PNG."""
    n_rows = len(rows)
    n_cols = max(len(images) for _, images in rows)
    fig, axes = plt.subplots(n_rows, n_cols, figsize=(2.2 * n_cols, 2.4 * n_rows),
                             squeeze=False)
    for i, (label, images) in enumerate(rows):
        for j in range(n_cols):
            ax = axes[i][j]
            ax.set_axis_off()
            if j < len(images):
                ax.imshow(images[j], cmap="gray", vmin=vmin, vmax=vmax,
                          interpolation="nearest")
        axes[i][0].set_title(label, fontsize=8, loc="left")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def write_training_curves(log_path, out_path) -> "Path | None":
    iters, l1, loss_d = [], [], []
    val_epochs, val_psnr = [], []
    for line in Path(log_path).read_text().splitlines():
        rec = json.loads(line)
        if rec["kind"] == "iter":
            iters.append(rec["iteration"])
            l1.append(rec["l1"])
            loss_d.append(rec["loss_d"])
        elif rec["kind"] == "epoch" and rec.get("val_psnr") is not None:
            val_epochs.append(rec["iteration"])
            val_psnr.append(rec["val_psnr"])
    if not iters:
        return None
    fig, axes = plt.subplots(1, 2, figsize=(10, 3.5))
    axes[0].plot(iters, l1, lw=0.8, label="pixel L1")
    axes[0].plot(iters, loss_d, lw=0.8, label="discriminator")
    axes[0].set_xlabel("iteration")
    axes[0].set_yscale("log")
    axes[0].legend()
    axes[0].grid(True, alpha=0.3)
    if val_psnr:
        axes[1].plot(val_epochs, val_psnr, marker="o", ms=3)
        axes[1].set_xlabel("iteration")
        axes[1].set_ylabel("validation PSNR (dB)")
        axes[1].grid(True, alpha=0.3)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
