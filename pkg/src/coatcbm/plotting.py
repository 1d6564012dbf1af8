"""Figure rendering for the report commands (files only, Agg backend)."""

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

DPI = 120


def _finish(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return path


def heatmap(matrix, path, title="", xlabel="concept", ylabel="class", cmap="viridis", center=False):
    matrix = np.asarray(matrix, dtype=float)
    rows, cols = matrix.shape
    fig, ax = plt.subplots(figsize=(min(12, 2 + 0.18 * cols), min(9, 1.5 + 0.3 * rows)))
    kw = {}
    if center:
        lim = np.nanmax(np.abs(matrix)) or 1.0
        kw = dict(vmin=-lim, vmax=lim)
        cmap = "RdBu_r"
    im = ax.imshow(np.ma.masked_invalid(matrix), aspect="auto", cmap=cmap, interpolation="nearest", **kw)
    fig.colorbar(im, ax=ax, fraction=0.04)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if title:
        ax.set_title(title)
    return _finish(fig, path)


def sweep_plot(values, series, path, xlabel, title=""):
    """Line plot of one or more metrics against a swept hyperparameter."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name, ys in series.items():
        ax.plot(values, ys, marker="o", label=name)
    ax.set_xlabel(xlabel)
    ax.set_ylim(-0.02, 1.02)
    ax.grid(alpha=0.3)
    ax.legend(frameon=False)
    if title:
        ax.set_title(title)
    return _finish(fig, path)
