"""Figures written next to the CSV outputs (SVG, Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "svg.hashsalt": "blno",  # stable element ids between runs
    "lines.linewidth": 1.2,
}


def size(width_in=4.5, ratio=GOLDEN):
    return (width_in, width_in * ratio)


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
    return path


def toy_phase(trajs: dict[str, np.ndarray], path):
    """theta vs omega polylines, one panel per dynamics."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, len(trajs), figsize=(2.2 * len(trajs), 2.3), squeeze=False)
        for ax, (name, xy) in zip(axes[0], trajs.items()):
            ax.plot(xy[:, 0], xy[:, 1], color="C0")
            ax.plot(xy[0, 0], xy[0, 1], "o", color="C1", ms=3)
            ax.plot(0, 0, "x", color="k", ms=4)
            ax.set_xlim(-1, 1)
            ax.set_ylim(-1, 1)
            ax.set_title(name)
            ax.set_xlabel(r"$\theta$")
        axes[0][0].set_ylabel(r"$\omega$")
        return _save(fig, path)


def bench_errors(errors: dict[str, np.ndarray], path):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size())
        names = list(errors)
        ax.boxplot([errors[n] for n in names], showmeans=True)
        ax.set_xticks(range(1, len(names) + 1), names)
        ax.set_yscale("log")
        ax.set_ylabel("IHVP error")
        return _save(fig, path)


def convergence(norms_sq: np.ndarray, path, label="hypergradient"):
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size())
        k = np.arange(len(norms_sq))
        ax.semilogy(k, norms_sq, color="C0", label=r"$\|\hat\nabla\Phi\|^2$")
        ax.semilogy(k, np.cumsum(norms_sq) / (k + 1), color="C1", label="running mean")
        ax.set_xlabel("outer iteration")
        ax.legend(frameon=False)
        return _save(fig, path)


def learning_curves(curves: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]], path):
    """``curves[label] = (steps, mean, lo, hi)``."""
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=size())
        for i, (label, (x, m, lo, hi)) in enumerate(curves.items()):
            ax.plot(x, m, color=f"C{i}", label=label)
            ax.fill_between(x, lo, hi, color=f"C{i}", alpha=0.2, lw=0)
        ax.set_xlabel("environment steps")
        ax.set_ylabel("mean episodic return")
        ax.legend(frameon=False)
        return _save(fig, path)
