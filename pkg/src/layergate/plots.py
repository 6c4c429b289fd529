"""Small matplotlib helpers for heatmaps and sweep curves (Agg backend)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = ["save_heatmap", "save_curve"]


def save_heatmap(matrix: np.ndarray, path, title: str = "", xlabel: str = "layer",
                 ylabel: str = "") -> Path:
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    path = Path(path)
    fig, ax = plt.subplots(figsize=(max(4, matrix.shape[1] * 0.35), max(2.5, matrix.shape[0] * 0.3)))
    im = ax.imshow(matrix, aspect="auto", interpolation="nearest", cmap="viridis")
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    fig.colorbar(im, ax=ax, fraction=0.046)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def save_curve(xs, series: dict[str, np.ndarray], path, xlabel: str = "", ylabel: str = "",
               title: str = "") -> Path:
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for label, ys in series.items():
        ax.plot(xs, ys, marker="o", label=label)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    if len(series) > 1:
        ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
