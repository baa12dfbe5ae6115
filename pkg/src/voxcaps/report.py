"""Figure rendering for run reports: training curves, loss breakdowns,
pretext trajectories, slice panels, and the comparison/ablation charts.

Everything renders through the Agg backend straight to files; no display
server is assumed anywhere.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np


def _finish(fig, path: str) -> str:
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def training_curves(history, out_path: str) -> str:
    """Validation macro dice and learning rate against step."""
    steps = [r.step for r in history]
    dice = [r.metrics.macro_dice for r in history]
    lrs = [r.lr for r in history]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.plot(steps, dice, marker="o", ms=3, label="macro dice")
    ax.set_xlabel("step")
    ax.set_ylabel("macro dice")
    ax.set_ylim(0, 1)
    ax2 = ax.twinx()
    ax2.plot(steps, lrs, color="tab:gray", ls="--", lw=1, label="lr")
    ax2.set_ylabel("learning rate")
    ax2.set_yscale("log")
    ax.legend(loc="upper left")
    ax.set_title("validation dice")
    return _finish(fig, out_path)


def loss_curves(losses, out_path: str) -> str:
    steps = [r.step for r in losses]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    for name in ("margin", "ce", "recon", "total"):
        ax.plot(steps, [getattr(r.breakdown, name) for r in losses],
                lw=1, label=name)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend()
    ax.set_title("training losses")
    return _finish(fig, out_path)


def pretext_curve(history, out_path: str) -> str:
    """Pretext loss and probe variance; collapsed steps get red markers."""
    steps = [r.step for r in history]
    fig, ax = plt.subplots(figsize=(6.5, 4))
    ax.plot(steps, [r.loss for r in history], lw=1, label="pair loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax2 = ax.twinx()
    ax2.plot(steps, [r.variance for r in history], color="tab:green",
             lw=1, label="probe variance")
    ax2.set_yscale("log")
    ax2.set_ylabel("probe feature variance")
    bad = [r.step for r in history if r.collapsed]
    if bad:
        ax.scatter(bad, [0] * len(bad), color="red", marker="x", zorder=5,
                   label="collapse flag")
    h1, l1 = ax.get_legend_handles_labels()
    h2, l2 = ax2.get_legend_handles_labels()
    ax.legend(h1 + h2, l1 + l2, loc="upper right")
    ax.set_title("pretext trajectory")
    return _finish(fig, out_path)


def slice_panel(image, labels, pred, out_path: str) -> str:
    """Center axial slice: first image channel, truth, and prediction."""
    z = image.shape[1] // 2
    panels = [(image[0, z], "image", "gray", None),
              (labels[z], "truth", "viridis", labels.max() or 1),
              (pred[z], "prediction", "viridis", labels.max() or 1)]
    fig, axes = plt.subplots(1, 3, figsize=(9, 3.2))
    for axis, (img, title, cmap, vmax) in zip(axes, panels):
        axis.imshow(img.T, cmap=cmap, vmin=0 if vmax else None, vmax=vmax,
                    origin="lower", interpolation="nearest")
        axis.set_title(title)
        axis.axis("off")
    return _finish(fig, out_path)


def dataset_panel(volumes, out_path: str, limit: int = 4) -> str:
    """Center slices of the first few volumes, image beside labels."""
    shown = volumes[:limit]
    fig, axes = plt.subplots(2, len(shown), figsize=(2.6 * len(shown), 5.4),
                             squeeze=False)
    for col, v in enumerate(shown):
        z = v.image.shape[1] // 2
        axes[0][col].imshow(v.image[0, z].T, cmap="gray", origin="lower",
                            interpolation="nearest")
        axes[0][col].set_title(v.volume_id, fontsize=9)
        axes[1][col].imshow(v.labels[z].T, cmap="viridis", origin="lower",
                            vmin=0, vmax=max(int(v.labels.max()), 1),
                            interpolation="nearest")
        for row in (0, 1):
            axes[row][col].axis("off")
    return _finish(fig, out_path)


def comparison_chart(result, out_path: str) -> str:
    """Paired test dice per (seed, fold), pretrained next to scratch."""
    rows = result.rows
    x = np.arange(len(rows))
    fig, ax = plt.subplots(figsize=(max(6.5, 0.8 * len(rows)), 4))
    ax.bar(x - 0.18, [r.pretrained_dice for r in rows], width=0.36,
           label="pretrained")
    ax.bar(x + 0.18, [r.scratch_dice for r in rows], width=0.36,
           label="scratch")
    ax.axhline(result.pretrained_mean, color="tab:blue", ls=":", lw=1)
    ax.axhline(result.scratch_mean, color="tab:orange", ls=":", lw=1)
    ax.set_xticks(x)
    ax.set_xticklabels([f"s{r.seed}/f{r.fold}" for r in rows], fontsize=8)
    ax.set_ylabel("test macro dice")
    ax.set_title(f"pretrained {result.pretrained_mean:.3f} vs "
                 f"scratch {result.scratch_mean:.3f}")
    ax.legend()
    return _finish(fig, out_path)


def ablation_chart(rows, out_path: str) -> str:
    fig, ax = plt.subplots(figsize=(6.5, 4))
    x = np.arange(len(rows))
    means = [r.mean_dice for r in rows]
    ax.bar(x, means, color=["tab:blue"] * (len(rows) - 1) + ["tab:green"])
    for xi, r in zip(x, rows):
        ax.scatter([xi] * len(r.dice_by_seed), r.dice_by_seed,
                   color="black", s=10, zorder=5)
    ax.set_xticks(x)
    ax.set_xticklabels([r.variant for r in rows], rotation=20, fontsize=9)
    ax.set_ylabel("mean test dice")
    ax.set_title("component knockouts")
    return _finish(fig, out_path)
