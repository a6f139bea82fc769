"""Figures for training logs, evaluation reports and qualitative registration panels."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .losses import REPORT_FIELDS  # noqa: E402

LOSS_COLUMNS = tuple(f for f in REPORT_FIELDS if f != "lambda")


def read_log(path) -> Dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"iteration", *REPORT_FIELDS} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"training log {path} lacks columns {sorted(missing)}")
        rows = list(reader)
    out = {k: np.array([float(r[k]) for r in rows]) for k in ("iteration",) + REPORT_FIELDS}
    out["group"] = np.array([r.get("group", "") for r in rows])
    return out


def moving_average(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or len(x) < window:
        return x
    kernel = np.ones(window) / window
    return np.convolve(x, kernel, mode="valid")


def plot_losses(log: Dict[str, np.ndarray], path, window: int = 20) -> Path:
    """One panel per loss column, raw trace plus moving average, log-scaled."""
    cols = 4
    rows = int(np.ceil(len(LOSS_COLUMNS) / cols))
    fig, axes = plt.subplots(rows, cols, figsize=(3.2 * cols, 2.4 * rows), sharex=True)
    it = log["iteration"]
    for ax, name in zip(axes.flat, LOSS_COLUMNS):
        y = log[name]
        ax.plot(it, y, lw=0.5, alpha=0.35, color="tab:blue")
        sm = moving_average(y, window)
        ax.plot(it[len(it) - len(sm):], sm, lw=1.2, color="tab:blue")
        ax.set_title(name, fontsize=9)
        if np.all(y > 0):
            ax.set_yscale("log")
        ax.tick_params(labelsize=7)
    for ax in axes.flat[len(LOSS_COLUMNS):]:
        ax.axis("off")
    for ax in axes[-1]:
        ax.set_xlabel("iteration", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_dice(report, path) -> Path:
    cols = ["dice_unaligned", "dice_after", "dice_after_reverse"]
    fig, ax = plt.subplots(figsize=(4.5, 3.5))
    ax.boxplot([report.column(c) for c in cols], tick_labels=["unaligned", "A->B", "B->A"])
    ax.set_ylabel("Dice")
    ax.set_ylim(0, 1.02)
    ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def checkerboard(a: np.ndarray, b: np.ndarray, tiles: int = 8) -> np.ndarray:
    """Interleave square tiles of two same-shaped 2D images."""
    if a.shape != b.shape:
        raise ValueError(f"checkerboard operands differ in shape: {a.shape} vs {b.shape}")
    h, w = a.shape
    yy, xx = np.meshgrid(np.arange(h) * tiles // h, np.arange(w) * tiles // w, indexing="ij")
    return np.where((yy + xx) % 2 == 0, a, b)


def draw_field(ax, u: np.ndarray, step: int = 4):
    """Quiver of a 2D displacement field ``(H, W, 2)`` (component 0 = x); returns the Quiver."""
    h, w = u.shape[:2]
    ys, xs = np.mgrid[0:h:step, 0:w:step]
    U = u[::step, ::step, 0]
    V = u[::step, ::step, 1]
    # normalized units -> pixels so arrows are drawn to scale
    q = ax.quiver(xs, ys, U * (w - 1) / 2, V * (h - 1) / 2, angles="xy", scale_units="xy", scale=1, color="tab:red", width=0.004)
    ax.set_xlim(-0.5, w - 0.5)
    ax.set_ylim(h - 0.5, -0.5)
    ax.set_aspect("equal")
    return q


def _middle_slice(x: np.ndarray) -> np.ndarray:
    while x.ndim > 2:
        x = x[x.shape[0] // 2]
    return x


def plot_panel(moving, target, warped, field, path, title: str = "") -> Path:
    """Moving / target / warped / checkerboard(warped, target) / displacement quiver."""
    moving, target, warped = (_middle_slice(np.asarray(v)) for v in (moving, target, warped))
    field = np.asarray(field)
    if field.ndim == 4:
        field = field[field.shape[0] // 2][..., :2]
    fig, axes = plt.subplots(1, 5, figsize=(13, 2.9))
    for ax, img, name in zip(axes, (moving, target, warped, checkerboard(warped, target)),
                             ("moving", "target", "warped", "checkerboard")):
        ax.imshow(img, cmap="gray", vmin=-1, vmax=1)
        ax.set_title(name, fontsize=9)
        ax.axis("off")
    axes[4].imshow(target, cmap="gray", vmin=-1, vmax=1, alpha=0.5)
    draw_field(axes[4], field)
    axes[4].set_title("displacement", fontsize=9)
    axes[4].axis("off")
    if title:
        fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def emit_plots(out_dir, log_path=None, report=None, panels: Sequence[dict] = ()) -> List[Path]:
    """Write every available figure into ``out_dir`` and return the file paths.

    ``panels`` holds dicts with keys moving, target, warped, field and an
    optional title.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    if log_path is not None:
        written.append(plot_losses(read_log(log_path), out / "loss_curves.png"))
    if report is not None:
        written.append(plot_dice(report, out / "dice_boxplot.png"))
    for i, p in enumerate(panels):
        written.append(plot_panel(p["moving"], p["target"], p["warped"], p["field"], out / f"panel_{i:03d}.png", p.get("title", "")))
    return written
