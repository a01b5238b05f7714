"""Report figures written straight to files (Agg backend, no display needed)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

TERMS = ("rec_h", "rec_o", "seg", "sds_h", "sds_o")


def _smooth(y, window):
    y = np.asarray(y, dtype=float)
    if window <= 1 or len(y) < window:
        return y
    return np.convolve(y, np.ones(window) / window, mode="valid")


def plot_loss_history(history, path, window: int = 50, title: str = "geometry") -> Path:
    """One panel per loss term (log scale), raw in light gray and a moving average on top."""
    steps = [h for h in history if h.get("phase") != "init"]
    terms = [t for t in TERMS + ("total",) if any(t in h for h in steps)]
    fig, axes = plt.subplots(1, max(1, len(terms)), figsize=(3.2 * max(1, len(terms)), 2.8), squeeze=False)
    for ax, term in zip(axes[0], terms):
        y = np.array([h.get(term, np.nan) for h in steps], dtype=float)
        ax.plot(y, color="0.8", lw=0.6)
        s = _smooth(y, window)
        ax.plot(np.arange(len(s)) + (len(y) - len(s)), s, color="C0", lw=1.2)
        if np.all(y[np.isfinite(y)] > 0) and np.any(np.isfinite(y)):
            ax.set_yscale("log")
        ax.set_title(term, fontsize=9)
        ax.set_xlabel("step", fontsize=8)
        ax.tick_params(labelsize=7)
    fig.suptitle(title, fontsize=10)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_views(images, path, titles=None, ncols: int = 4) -> Path:
    """Grid of rendered channels; 2-D arrays are shown in gray."""
    images = list(images)
    n = len(images)
    ncols = max(1, min(ncols, n))
    nrows = max(1, -(-n // ncols))
    fig, axes = plt.subplots(nrows, ncols, figsize=(2.2 * ncols, 2.2 * nrows), squeeze=False)
    for ax in axes.ravel():
        ax.axis("off")
    for i, img in enumerate(images):
        ax = axes.ravel()[i]
        img = np.asarray(img, dtype=float)
        if img.ndim == 3 and img.shape[2] == 3 and img.min() < 0:
            img = (img + 1) / 2
        ax.imshow(np.clip(img, 0, 1), cmap="gray" if img.ndim == 2 else None, vmin=0, vmax=1)
        if titles:
            ax.set_title(titles[i], fontsize=8)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def plot_metrics(rows, path) -> Path:
    """Horizontal bar chart of (metric, value) pairs."""
    rows = list(rows)
    fig, ax = plt.subplots(figsize=(5, 0.4 * len(rows) + 1))
    names = [r[0] for r in rows]
    ax.barh(range(len(rows)), [r[1] for r in rows], color="C0")
    ax.set_yticks(range(len(rows)))
    ax.set_yticklabels(names, fontsize=8)
    ax.invert_yaxis()
    for i, (_, v) in enumerate(rows):
        ax.text(v, i, f" {v:.4g}", va="center", fontsize=7)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
