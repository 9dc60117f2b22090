"""Matplotlib figure rendering for report artifacts.

Figures are saved as SVG next to the delimited output. Rendering is
byte-reproducible: a fixed hash salt, no date metadata, and one labelled
group id per plotted curve (the structural hook the artifact tests use).
"""

from __future__ import annotations

import math

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402

matplotlib.rcParams["svg.hashsalt"] = "dpaudit"

_SAVE_KWARGS = {"format": "svg", "metadata": {"Date": None}}


def budget_gid(label: str) -> str:
    safe = str(label).replace(" ", "-").replace("+", "").replace(".", "_")
    return f"budget-{safe}"


def save_bound_curves(rows: list[dict], path) -> None:
    """Worst-case vs relaxed bound curves over the epsilon grid."""
    finite = [r for r in rows if not math.isinf(r["epsilon"])]
    fig, ax = plt.subplots(figsize=(5, 3.5))
    xs = [r["epsilon"] for r in finite]
    (wc,) = ax.plot(xs, [r["worst_case"] for r in finite], marker="o",
                    color="#5e3c99", label="worst-case")
    wc.set_gid("bound-worst-case")
    (rel,) = ax.plot(xs, [r["relaxed"] for r in finite], marker="s",
                     color="#e66101", label="relaxed")
    rel.set_gid("bound-relaxed")
    ax.set_xscale("log")
    ax.set_xlabel(r"privacy budget $\varepsilon$")
    ax.set_ylabel("reconstruction bound")
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="upper left")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)


def save_cumulative_curves(curves: dict, path) -> None:
    """One step curve per budget: fraction of samples below each SSIM error.

    ``curves`` maps a budget label to a ``CumulativeCurve``.
    """
    fig, ax = plt.subplots(figsize=(5, 3.5))
    cmap = plt.get_cmap("viridis")
    n = max(len(curves), 1)
    for i, (label, curve) in enumerate(curves.items()):
        (line,) = ax.step(curve.grid, curve.fraction, where="post",
                          color=cmap(i / max(n - 1, 1)), label=str(label))
        line.set_gid(budget_gid(label))
    ax.set_xlabel("SSIM reconstruction error")
    ax.set_ylabel("fraction of samples")
    ax.set_xlim(0, 1)
    ax.set_ylim(-0.02, 1.02)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KWARGS)
    plt.close(fig)
