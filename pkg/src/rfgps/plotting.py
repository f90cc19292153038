"""Learning-curve figures for training reports (written next to the CSVs)."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

plt.rc("axes", linewidth=0.6)
plt.rc("font", size=9)


def read_report(path) -> dict:
    """Columns of a report CSV as float arrays keyed by header name."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def _episodes(cols, per_iter):
    return cols["iteration"] * per_iter if per_iter else cols["iteration"]


def plot_learning_curves(cols: dict, path, title: str = "", episodes_per_iter: int = 0) -> Path:
    """Four panels: sampled cost, success rate, final distance and step size."""
    x = _episodes(cols, episodes_per_iter)
    xlabel = "episodes" if episodes_per_iter else "iteration"
    fig, axes = plt.subplots(2, 2, figsize=(7, 5), sharex=True)
    ax = axes[0, 0]
    ax.plot(x, cols["mean_cost"], "k.-")
    ax.fill_between(x, cols["mean_cost"] - cols["std_cost"], cols["mean_cost"] + cols["std_cost"],
                    color="0.85", lw=0)
    ax.set_ylabel("sampled cost")
    ax = axes[0, 1]
    ax.plot(x, 100 * cols["success_rate"], "C0.-")
    ax.set_ylim(-5, 105)
    ax.set_ylabel("success (%)")
    ax = axes[1, 0]
    ax.semilogy(x, np.maximum(cols["mean_final_dist"], 1e-6), "C1.-")
    ax.set_ylabel("final distance")
    ax = axes[1, 1]
    ax.semilogy(x, cols["epsilon"], "C2.-", label="step size")
    ax.semilogy(x, np.maximum(cols["mean_kl"], 1e-12), "C3.--", label="achieved KL")
    ax.legend(frameon=False)
    for a in axes[1]:
        a.set_xlabel(xlabel)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def plot_comparison(curves: dict, path, episodes_per_iter: dict | None = None) -> Path:
    """Success rate against sample count for several named runs."""
    episodes_per_iter = episodes_per_iter or {}
    fig, ax = plt.subplots(figsize=(5, 3.2))
    for name, cols in curves.items():
        ax.plot(_episodes(cols, episodes_per_iter.get(name, 0)), 100 * cols["success_rate"],
                ".-", label=name)
    ax.set_xlabel("episodes" if episodes_per_iter else "iteration")
    ax.set_ylabel("success (%)")
    ax.set_ylim(-5, 105)
    ax.legend(frameon=False, loc="lower right")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
