"""Figure rendering for the report path.

Renders the evaluation artifacts (score histogram, ROC curve, heatmap) as
matplotlib figures saved next to the delimited outputs. Figures follow the
established color convention: blue for the cancer side, red for normal.
"""

from __future__ import annotations

from typing import Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .evaluation import HistogramBin, RocResult, heatmap_rgb
from .scoring import ScoreMap

CANCER_COLOR = "#3465c0"
NORMAL_COLOR = "#c03434"


def save_histogram_figure(rows: Sequence[HistogramBin], path, title: str = "") -> None:
    """Paired score histogram with the zero line marked in red."""
    fig, ax = plt.subplots(figsize=(8, 4.5))
    if rows:
        width = rows[0].bin_hi - rows[0].bin_lo
        lows = [r.bin_lo for r in rows]
        ax.bar(lows, [r.cancer for r in rows], width=width, align="edge",
               color=CANCER_COLOR, alpha=0.65, label="cancer")
        ax.bar(lows, [r.normal for r in rows], width=width, align="edge",
               color=NORMAL_COLOR, alpha=0.65, label="normal")
    ax.axvline(0.0, color="red", linewidth=1.2)
    ax.set_xlabel("patch classification information content")
    ax.set_ylabel("number of patches")
    if title:
        ax.set_title(title)
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_roc_figure(result: RocResult, path, title: str = "") -> None:
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(result.fpr, result.tpr, color=CANCER_COLOR, linewidth=1.6,
            label=f"AUC = {result.auc:.4f}")
    ax.plot([0, 1], [0, 1], color="gray", linewidth=0.8, linestyle="--")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("false positive rate")
    ax.set_ylabel("true positive rate")
    if title:
        ax.set_title(title)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_heatmap_figure(score_map: ScoreMap, path, title: str = "") -> None:
    """Heatmap figure using the same pixel mapping as the PPM renderer."""
    rgb = heatmap_rgb(score_map)
    fig, ax = plt.subplots(figsize=(max(3.0, score_map.cols / 8), max(3.0, score_map.rows / 8)))
    ax.imshow(rgb, interpolation="nearest")
    ax.set_xlabel("patch X")
    ax.set_ylabel("patch Y")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
