"""Report figures rendered straight to files (Agg canvas, no pyplot state)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np
from matplotlib.backends.backend_agg import FigureCanvasAgg
from matplotlib.figure import Figure

from .masking import TokenMask

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _figure(width=6.0, height=3.6, ncols=1):
    import matplotlib as mpl

    with mpl.rc_context(STYLE):
        fig = Figure(figsize=(width, height), dpi=120)
        axes = fig.subplots(1, ncols)
    return fig, axes


def _save(fig: Figure, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    FigureCanvasAgg(fig)
    fig.tight_layout()
    fig.savefig(path)
    return path


def plot_loss_curves(records: Sequence[dict], path) -> Path:
    """Loss per step, one colour per stage, with the learning rate on a twin axis."""
    fig, ax = _figure()
    stages = list(dict.fromkeys(r["stage"] for r in records))
    for i, name in enumerate(stages):
        rs = [r for r in records if r["stage"] == name]
        ax.plot([r["step"] for r in rs], [r["loss"] for r in rs], lw=0.8,
                color=_COLORS[i % len(_COLORS)], label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("contrastive loss")
    ax.legend(loc="upper right", frameon=False)
    lr_ax = ax.twinx()
    lr_ax.plot([r["step"] for r in records], [r["lr"] for r in records], color="0.6", lw=0.6, ls="--")
    lr_ax.set_ylabel("learning rate", color="0.4")
    return _save(fig, path)


def plot_stage_flops(stages: Sequence[dict], path) -> Path:
    """Measured forward MACs per step for each stage."""
    fig, ax = _figure(width=4.5)
    names = [s["name"] for s in stages]
    vals = np.array([s["flops_per_step"] for s in stages], dtype=float)
    bars = ax.bar(names, vals / 1e6, color=[_COLORS[i % len(_COLORS)] for i in range(len(names))])
    for b, s in zip(bars, stages):
        ax.annotate(f"{s['image_side']}px, r={s['mask_ratio']:g}", (b.get_x() + b.get_width() / 2, b.get_height()),
                    ha="center", va="bottom", fontsize=7)
    ax.set_ylabel("forward MFLOPs / step")
    return _save(fig, path)


def plot_drop_table(drop: dict, path) -> Path:
    """Accuracy drop against fraction of image tokens kept, one line per model size."""
    fig, ax = _figure(width=4.5)
    for i, size in enumerate(drop["sizes"]):
        rows = sorted((r for r in drop["rows"] if r["size"] == size), key=lambda r: r["ratio"])
        ax.plot([100 * (1 - r["ratio"]) for r in rows], [100 * r["drop"] for r in rows], marker="o",
                color=_COLORS[i % len(_COLORS)], label=size)
    ax.invert_xaxis()
    ax.set_xlabel("image tokens kept (%)")
    ax.set_ylabel("top-1 drop vs full tokens (pts)")
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_cost_comparison(table: dict, path) -> Path:
    """Horizontal bars of estimated dollar cost (log scale) per row."""
    rows = [r for r in table["rows"] if r["dollars"] is not None]
    fig, ax = _figure(width=6.5, height=0.45 * len(rows) + 1.2)
    labels = [r["label"] for r in rows]
    vals = [r["dollars"] for r in rows]
    colors = [_COLORS[1] if r["label"] == table["reference"] else _COLORS[0] for r in rows]
    ax.barh(labels, vals, color=colors)
    for y, r in enumerate(rows):
        ax.annotate(r["display_cost"], (r["dollars"], y), xytext=(3, 0), textcoords="offset points",
                    va="center", fontsize=7)
    ax.set_xscale("log")
    ax.set_xlim(min(vals) / 2, max(vals) * 3)
    ax.set_xlabel("estimated cost (USD)")
    ax.invert_yaxis()
    return _save(fig, path)


def plot_masks(masks: Sequence[tuple[str, TokenMask]], path) -> Path:
    """Kept (dark) and removed (light) patches for a few masks side by side."""
    fig, axes = _figure(width=2.2 * len(masks), height=2.4, ncols=len(masks))
    axes = np.atleast_1d(axes)
    for ax, (title, m) in zip(axes, masks):
        grid = np.zeros(m.n_tokens)
        grid[list(m.kept)] = 1
        ax.imshow(grid.reshape(m.grid_h, m.grid_w), cmap="Greys", vmin=-0.3, vmax=1.2)
        ax.set_title(title)
        ax.set_xticks([])
        ax.set_yticks([])
    return _save(fig, path)
