"""Figures written next to the CSV reports.  Always renders off-screen (Agg)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.labelsize": 9,
    "axes.titlesize": 9,
    "legend.fontsize": 8,
    "xtick.labelsize": 8,
    "ytick.labelsize": 8,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.dpi": 120,
    "svg.hashsalt": "mpqsearch",
}


def _save(fig, path) -> None:
    # fixed metadata keeps the PNG bytes reproducible
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def plot_risk_trace(trace: list[dict], path) -> None:
    """Risk terms and capacity exponent against the search step."""
    steps = np.array([r["step"] for r in trace])
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(1, 3, figsize=(9, 2.6))
        axes[0].plot(steps, [r["r_e"] for r in trace], label="task")
        axes[0].plot(steps, [r["total"] for r in trace], label="total")
        axes[0].set_xlabel("step")
        axes[0].set_ylabel("risk")
        axes[0].legend(frameon=False)
        axes[1].plot(steps, [r["e_bops"] for r in trace], color="C2")
        axes[1].set_xlabel("step")
        axes[1].set_ylabel("expected BOPs")
        axes[2].plot(steps, [r["r_g"] for r in trace], color="C3", label="generalization")
        ax2 = axes[2].twinx()
        ax2.plot(steps, [r["p"] for r in trace], color="C4", ls="--", label="p")
        axes[2].set_xlabel("step")
        axes[2].set_ylabel("generalization risk")
        ax2.set_ylabel("p")
        fig.tight_layout()
        _save(fig, path)


def plot_attribution_grid(maps_f: np.ndarray, maps_q: np.ndarray, labels, ards, path) -> None:
    """Full-precision vs quantized attribution maps, one column per sample."""
    n = maps_f.shape[0]
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(2, n, figsize=(1.6 * n + 0.4, 3.4), squeeze=False)
        for j in range(n):
            for row, (maps, tag) in enumerate(((maps_f, "fp"), (maps_q, "quant"))):
                ax = axes[row, j]
                ax.imshow(maps[j], cmap="inferno", interpolation="nearest")
                ax.set_xticks([])
                ax.set_yticks([])
                if j == 0:
                    ax.set_ylabel(tag)
            axes[0, j].set_title(f"y={int(labels[j])}  ARD={ards[j]:.2f}")
        fig.tight_layout()
        _save(fig, path)


def plot_accuracy_trace(acc: list[float], path) -> None:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(3.4, 2.4))
        ax.plot(np.arange(len(acc)), acc, marker="o")
        ax.set_xlabel("epoch")
        ax.set_ylabel("train accuracy")
        ax.set_ylim(0, 1.02)
        fig.tight_layout()
        _save(fig, path)
