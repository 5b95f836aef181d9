"""Static SVG figures for evaluation reports."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

# byte-stable SVG output
matplotlib.rcParams["svg.hashsalt"] = "crpsd"
_META = {"Date": None, "Creator": None}


def pr_plot(path, curves: dict) -> None:
    """``curves`` maps a method name to an :class:`~crpsd.metrics.PRCurve`."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, curve in curves.items():
        ax.plot(curve.recall, curve.precision, label=name)
    ax.set_xlabel("Recall")
    ax.set_ylabel("Precision")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower left")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)


def fbeta_bars(path, scores: dict) -> None:
    """``scores`` maps a method name to (mean F-beta, adaptive F-beta)."""
    names = list(scores)
    fig, ax = plt.subplots(figsize=(5, 4))
    xs = range(len(names))
    width = 0.38
    ax.bar([x - width / 2 for x in xs], [scores[n][0] for n in names], width, label="mean F-beta")
    ax.bar([x + width / 2 for x in xs], [scores[n][1] for n in names], width, label="adaptive F-beta")
    ax.set_xticks(list(xs))
    ax.set_xticklabels(names)
    ax.set_ylim(0, 1)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata=_META)
    plt.close(fig)
