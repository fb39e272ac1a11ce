"""Heatmap renderings of wavefield snapshots and latent fields."""

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

LOG_ERR_FLOOR = 1e-12


def log_abs_error(a, b):
    """log10 |a - b| with the error clamped at 1e-12 before the log."""
    return np.log10(np.maximum(np.abs(np.asarray(a) - np.asarray(b)), LOG_ERR_FLOOR))


def save_heatmap(arr, path, title=None, cmap="viridis", vmin=None, vmax=None):
    fig, ax = plt.subplots(figsize=(4, 3.2))
    im = ax.imshow(np.asarray(arr), origin="lower", cmap=cmap, vmin=vmin, vmax=vmax,
                   aspect="auto")
    fig.colorbar(im, ax=ax, shrink=0.85)
    if title:
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def save_triptych(panels, path, cmap="viridis"):
    """One row of heatmaps, e.g. (observed, predicted, log10 error)."""
    n = len(panels)
    fig, axes = plt.subplots(1, n, figsize=(3.4 * n, 3.0))
    if n == 1:
        axes = [axes]
    for ax, (arr, title) in zip(axes, panels):
        im = ax.imshow(np.asarray(arr), origin="lower", cmap=cmap, aspect="auto")
        fig.colorbar(im, ax=ax, shrink=0.8)
        ax.set_title(title, fontsize=9)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
