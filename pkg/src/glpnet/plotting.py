"""PNG figures written next to the CSV/markdown/PGM outputs of the CLI."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_STYLE = {
    "figure.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def _save(fig, path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)
    return path


def plot_loss_curve(history: list[dict], path) -> Path:
    """Per-epoch total and main loss, plus test mIoU on a second axis when logged."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        epochs = [row["epoch"] for row in history]
        ax.plot(epochs, [row["loss"] for row in history], label="total loss", color="C0")
        ax.plot(epochs, [row["main"] for row in history], label="main loss", color="C0", ls="--")
        ax.set_xlabel("epoch")
        ax.set_ylabel("loss")
        miou = [row["miou"] for row in history]
        if miou and all(m != "" for m in miou):
            ax2 = ax.twinx()
            ax2.plot(epochs, miou, color="C3", marker="o", ms=3, label="test mIoU")
            ax2.set_ylabel("mIoU")
            ax2.set_ylim(0, 1)
            ax2.spines["right"].set_visible(True)
            ax2.legend(loc="upper right", frameon=False)
        ax.legend(loc="upper left", frameon=False)
        return _save(fig, path)


def plot_ablation(results, path, title: str = "") -> Path:
    """Mean mIoU per config as bars, individual seeds as dots."""
    with plt.rc_context(_STYLE):
        fig, ax = plt.subplots(figsize=(max(4, 0.9 * len(results) + 1), 3.4))
        x = np.arange(len(results))
        means = [100 * r.mean("miou") for r in results]
        ax.bar(x, means, color="0.75", edgecolor="0.3")
        for i, r in enumerate(results):
            vals = [100 * m["miou"] for m in r.metrics]
            ax.scatter(np.full(len(vals), i), vals, s=12, color="C3", zorder=3)
        ax.set_xticks(x)
        ax.set_xticklabels([r.name for r in results], rotation=30, ha="right")
        ax.set_ylabel("test mIoU (%)")
        if title:
            ax.set_title(title)
        return _save(fig, path)


def plot_mask_grid(masks: dict[str, np.ndarray], path) -> Path:
    """One row per modality, one column per pooling mask, each plane min-max scaled."""
    rows = list(masks)
    k = max(m.shape[0] for m in masks.values())
    with plt.rc_context(_STYLE):
        fig, axes = plt.subplots(len(rows), k, figsize=(1.1 * k + 0.6, 1.2 * len(rows) + 0.2), squeeze=False)
        for r, name in enumerate(rows):
            for j in range(k):
                ax = axes[r, j]
                ax.set_xticks([])
                ax.set_yticks([])
                if j < masks[name].shape[0]:
                    ax.imshow(masks[name][j], cmap="magma", interpolation="nearest")
                if r == 0:
                    ax.set_title(f"k={j}", fontsize=7)
            axes[r, 0].set_ylabel(name)
        return _save(fig, path)
