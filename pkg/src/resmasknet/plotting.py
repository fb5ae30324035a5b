"""Report figures written next to the CSV outputs."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 10,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "legend.fontsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}


def plot_training_curves(epochs: list[dict], path) -> Path:
    """Loss, accuracies and learning rate per epoch, three panels side by side."""
    path = Path(path)
    ep = [e["epoch"] for e in epochs]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9, 2.6))
        axes[0].plot(ep, [e["train_loss"] for e in epochs], marker="o", ms=2)
        axes[0].set(xlabel="epoch", ylabel="train loss")
        axes[1].plot(ep, [e["train_acc"] for e in epochs], label="train", marker="o", ms=2)
        axes[1].plot(ep, [e["val_acc"] for e in epochs], label="val", marker="s", ms=2)
        axes[1].set(xlabel="epoch", ylabel="accuracy", ylim=(0, 1.02))
        axes[1].legend(frameon=False)
        axes[2].semilogy(ep, [e["lr"] for e in epochs], drawstyle="steps-post")
        axes[2].set(xlabel="epoch", ylabel="learning rate")
        fig.tight_layout()
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_confusion(cm, path, normalized: bool = True) -> Path:
    path = Path(path)
    vals = cm.normalized() if normalized else cm.counts
    names = list(cm.class_names)
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.6, 4))
        im = ax.imshow(vals, cmap="Blues", vmin=0, vmax=1 if normalized else max(1, vals.max()))
        ax.set_xticks(range(len(names)), names, rotation=45, ha="right")
        ax.set_yticks(range(len(names)), names)
        ax.set(xlabel="predicted", ylabel="true")
        thresh = (1 if normalized else vals.max()) / 2
        for i in range(vals.shape[0]):
            for j in range(vals.shape[1]):
                txt = f"{vals[i, j]:.2f}" if normalized else str(int(vals[i, j]))
                ax.text(j, i, txt, ha="center", va="center", fontsize=7,
                        color="white" if vals[i, j] > thresh else "black")
        fig.colorbar(im, ax=ax, fraction=0.046, pad=0.04)
        fig.savefig(path)
        plt.close(fig)
    return path


def plot_class_histogram(counts: dict, class_names, path) -> Path:
    """Grouped bars, one group per class, one bar per split."""
    path = Path(path)
    x = np.arange(len(class_names))
    width = 0.8 / max(1, len(counts))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6, 2.8))
        for i, (split, c) in enumerate(counts.items()):
            ax.bar(x + i * width, c, width, label=split)
        ax.set_xticks(x + width * (len(counts) - 1) / 2, class_names)
        ax.set_ylabel("images")
        ax.legend(frameon=False)
        fig.savefig(path)
        plt.close(fig)
    return path
