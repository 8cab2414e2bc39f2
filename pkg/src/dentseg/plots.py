"""Static PNG figures: accuracy curves and a normalized confusion-matrix heatmap."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .train import TrainingLog  # noqa: E402

# keeps PNG bytes independent of the matplotlib version
PNG_METADATA = {"Software": None}
CLASS_LABELS = ("background", "tooth")


def accuracy_figure(log: TrainingLog):
    """Train and validation pixel accuracy per epoch, one marker per epoch."""
    epochs = [r.epoch for r in log.records]
    fig, ax = plt.subplots(figsize=(6, 4), dpi=100)
    ax.plot(epochs, [r.train_acc for r in log.records], marker=".", label="train")
    ax.plot(epochs, [r.val_acc for r in log.records], marker=".", label="validation")
    ax.set_xlabel("epoch")
    ax.set_ylabel("pixel accuracy")
    ax.set_title("Accuracy")
    ax.legend(loc="lower right")
    ax.grid(alpha=0.3)
    fig.tight_layout()
    return fig


def confusion_figure(matrix):
    """2x2 heatmap with each cell labelled to two decimals. Rows are the true class."""
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (2, 2):
        raise ValueError(f"expected a 2x2 matrix, got {m.shape}")
    fig, ax = plt.subplots(figsize=(4.5, 4), dpi=100)
    im = ax.imshow(m, cmap="Blues", vmin=0.0, vmax=1.0)
    for i in range(2):
        for j in range(2):
            ax.text(j, i, f"{m[i, j]:.2f}", ha="center", va="center",
                    color="white" if m[i, j] > 0.5 else "black")
    ax.set_xticks([0, 1], labels=CLASS_LABELS)
    ax.set_yticks([0, 1], labels=CLASS_LABELS)
    ax.set_xlabel("predicted")
    ax.set_ylabel("true")
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    return fig


def save_figure(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=PNG_METADATA)
    plt.close(fig)
    return path
