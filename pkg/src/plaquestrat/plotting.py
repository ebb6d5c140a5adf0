"""Report figures. Everything renders off-screen to files."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from matplotlib.colors import LinearSegmentedColormap  # noqa: E402

from .data import LABELS  # noqa: E402
from .explain import NEG_RGB, NEUTRAL_RGB, POS_RGB  # noqa: E402

PNG_META = {"Software": None}
SIGNED_CMAP = LinearSegmentedColormap.from_list("signed", [NEG_RGB / 255, NEUTRAL_RGB / 255, POS_RGB / 255])


def _save(fig, path) -> None:
    fig.savefig(path, dpi=120, bbox_inches="tight", metadata=PNG_META)
    plt.close(fig)


def plot_confusion(cm, path, title: str = "Confusion matrix") -> None:
    table = cm.as_table()
    fig, ax = plt.subplots(figsize=(4, 3.6))
    ax.imshow(table, cmap="Blues")
    names = [LABELS[0], LABELS[1]]
    ax.set_xticks([0, 1], names)
    ax.set_yticks([0, 1], names, rotation=90, va="center")
    ax.set_xlabel("Predicted label")
    ax.set_ylabel("True label")
    for (i, j), v in np.ndenumerate(table):
        ax.text(j, i, str(v), ha="center", va="center",
                color="white" if v > table.max() / 2 else "black", fontsize=13)
    ax.set_title(title)
    _save(fig, path)


def plot_roc(curves, path) -> None:
    """``curves``: list of (label, fpr, tpr, auc)."""
    fig, ax = plt.subplots(figsize=(4.2, 4))
    for name, fpr, tpr, auc in curves:
        ax.step(fpr, tpr, where="post", label=f"{name} (AUC {auc:.3f})")
    ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("False positive rate")
    ax.set_ylabel("True positive rate")
    ax.legend(loc="lower right", fontsize=8)
    _save(fig, path)


def plot_history(histories, path) -> None:
    """``histories``: list of (name, records) with EpochRecord items."""
    fig, ax = plt.subplots(figsize=(5.5, 3.5))
    for name, records in histories:
        if not records:
            continue
        ep = [r.epoch for r in records]
        line, = ax.plot(ep, [r.train_loss for r in records], lw=1, label=f"{name} train")
        ax.plot(ep, [r.val_loss for r in records], lw=1, ls="--", color=line.get_color(), label=f"{name} val")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend(fontsize=7, ncol=2)
    _save(fig, path)


def plot_explanation(image, heatmap, overlay, coefficients, path, title: str = "") -> None:
    """Overlay and signed heatmap side by side, with a colour bar in coefficient units."""
    vmax = float(np.max(np.abs(coefficients))) if len(coefficients) else 0.0
    fig, axes = plt.subplots(1, 3, figsize=(10, 3.4), gridspec_kw={"width_ratios": [1, 1, 1]})
    axes[0].imshow(np.asarray(image).squeeze(), cmap="gray", vmin=0, vmax=1)
    axes[0].set_title("input")
    axes[1].imshow(overlay)
    axes[1].set_title("top regions")
    im = axes[2].imshow(np.zeros(heatmap.shape[:2]), cmap=SIGNED_CMAP, vmin=-vmax or -1, vmax=vmax or 1)
    axes[2].imshow(heatmap)
    axes[2].set_title("surrogate coefficients")
    fig.colorbar(im, ax=axes[2], fraction=0.046, pad=0.04)
    for ax in axes:
        ax.set_axis_off()
    if title:
        fig.suptitle(title)
    _save(fig, path)
