"""Quantitative evaluation of score maps: histograms, ROC/AUC, heatmaps.

Only non-skipped patches with a cancer or normal label enter the statistics;
skipped patches carry no classification claim and render neutral gray.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import EvaluationError, ValidationError
from .scoring import ScoreMap

HISTOGRAM_CSV_HEADER = ["bin_lo", "bin_hi", "cancer", "normal"]
ROC_CSV_HEADER = ["threshold", "fpr", "tpr"]

SKIP_GRAY = (128, 128, 128)


@dataclass(frozen=True)
class HistogramBin:
    bin_lo: float
    bin_hi: float
    cancer: int
    normal: int


@dataclass(frozen=True)
class RocResult:
    """ROC curve points and its area; thresholds descend from +inf."""

    thresholds: np.ndarray
    fpr: np.ndarray
    tpr: np.ndarray
    auc: float


def _labeled_scores(
    score_map: ScoreMap, labels: dict[tuple[int, int], str]
) -> tuple[np.ndarray, np.ndarray]:
    """Scores and is-cancer flags of non-skipped labeled patches, raster order."""
    scores = []
    is_cancer = []
    for (x, y), label in sorted(labels.items(), key=lambda kv: (kv[0][1], kv[0][0])):
        if label not in ("cancer", "normal"):
            continue
        if not (0 <= x < score_map.cols and 0 <= y < score_map.rows):
            continue
        if score_map.skipped[y, x]:
            continue
        scores.append(float(score_map.score[y, x]))
        is_cancer.append(label == "cancer")
    return np.asarray(scores, dtype=np.float64), np.asarray(is_cancer, dtype=bool)


def histogram(
    score_map: ScoreMap,
    labels: dict[tuple[int, int], str],
    bin_width: float | None = None,
) -> list[HistogramBin]:
    """Bin labeled, non-skipped patch scores with one bin edge exactly at zero.

    Bin i covers [i*bin_width, (i+1)*bin_width). Default width spans the
    observed range over 50 bins. Returns a contiguous table including empty
    bins; empty input yields an empty table.
    """
    scores, is_cancer = _labeled_scores(score_map, labels)
    if len(scores) == 0:
        return []
    if bin_width is None:
        spread = float(scores.max() - scores.min())
        bin_width = spread / 50.0 if spread > 0 else 1.0
    if bin_width <= 0:
        raise ValidationError(f"bin_width must be positive, got {bin_width}")

    idx = np.floor(scores / bin_width).astype(np.int64)
    lo, hi = int(idx.min()), int(idx.max())
    n_bins = hi - lo + 1
    cancer_counts = np.bincount(idx[is_cancer] - lo, minlength=n_bins)
    normal_counts = np.bincount(idx[~is_cancer] - lo, minlength=n_bins)
    return [
        HistogramBin(
            bin_lo=(lo + i) * bin_width,
            bin_hi=(lo + i + 1) * bin_width,
            cancer=int(cancer_counts[i]),
            normal=int(normal_counts[i]),
        )
        for i in range(n_bins)
    ]


def write_histogram_csv(rows: Sequence[HistogramBin], target) -> None:
    lines = [",".join(HISTOGRAM_CSV_HEADER)]
    for r in rows:
        lines.append(f"{r.bin_lo!r},{r.bin_hi!r},{r.cancer},{r.normal}")
    text = "\n".join(lines) + "\n"
    if hasattr(target, "write"):
        target.write(text)
        return
    with open(target, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def roc_from_scores(scores, is_cancer) -> RocResult:
    """ROC by descending threshold sweep over the distinct scores.

    The area under the curve is the trapezoidal integral, which with grouped
    ties equals the probability that a random cancer patch outscores a random
    normal one, counting ties half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    is_cancer = np.asarray(is_cancer, dtype=bool)
    if scores.shape != is_cancer.shape or scores.ndim != 1:
        raise ValidationError("scores and labels must be parallel 1-D arrays")
    n_pos = int(is_cancer.sum())
    n_neg = int(len(is_cancer) - n_pos)
    if n_pos == 0 or n_neg == 0:
        raise EvaluationError(
            f"ROC needs both classes, got {n_pos} cancer / {n_neg} normal patches"
        )

    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    c = is_cancer[order]
    distinct = np.flatnonzero(np.diff(s)) + 1
    stops = np.concatenate((distinct, [len(s)]))
    tp = np.cumsum(c)[stops - 1]
    fp = stops - tp

    thresholds = np.concatenate(([np.inf], s[stops - 1]))
    tpr = np.concatenate(([0.0], tp / n_pos))
    fpr = np.concatenate(([0.0], fp / n_neg))
    auc = float(np.trapezoid(tpr, fpr))
    return RocResult(thresholds=thresholds, fpr=fpr, tpr=tpr, auc=auc)


def roc_auc(score_map: ScoreMap, labels: dict[tuple[int, int], str]) -> RocResult:
    """ROC over the labeled, non-skipped patches of a score map."""
    scores, is_cancer = _labeled_scores(score_map, labels)
    return roc_from_scores(scores, is_cancer)


def write_roc_csv(result: RocResult, target) -> None:
    """Rows of threshold,fpr,tpr plus a trailing auc footer line."""
    lines = [",".join(ROC_CSV_HEADER)]
    for t, f, tp in zip(result.thresholds, result.fpr, result.tpr):
        t_txt = "inf" if math.isinf(t) else repr(float(t))
        lines.append(f"{t_txt},{float(f)!r},{float(tp)!r}")
    lines.append(f"auc,{result.auc!r}")
    text = "\n".join(lines) + "\n"
    if hasattr(target, "write"):
        target.write(text)
        return
    with open(target, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def heatmap_rgb(score_map: ScoreMap) -> np.ndarray:
    """(rows, cols, 3) uint8 image: blue = cancer side, red = normal, gray = skipped.

    Intensity is |score| relative to the 95th percentile of |score| over the
    scored patches, clamped at full saturation; exact zero renders white.
    """
    rows, cols = score_map.rows, score_map.cols
    img = np.empty((rows, cols, 3), dtype=np.uint8)
    img[:] = SKIP_GRAY

    scored = ~score_map.skipped
    if not scored.any():
        return img
    mags = np.abs(score_map.score[scored])
    s95 = float(np.percentile(mags, 95))
    for y in range(rows):
        for x in range(cols):
            if score_map.skipped[y, x]:
                continue
            v = float(score_map.score[y, x])
            t = 0.0 if s95 == 0.0 else min(1.0, abs(v) / s95)
            fade = int((1.0 - t) * 255.0 + 0.5)
            if v > 0.0:
                img[y, x] = (fade, fade, 255)
            elif v < 0.0:
                img[y, x] = (255, fade, fade)
            else:
                img[y, x] = (255, 255, 255)
    return img


def write_ppm(rgb: np.ndarray, target, comments: Sequence[str] = ()) -> None:
    """Write an (h, w, 3) uint8 array as binary PPM (P6)."""
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValidationError(f"expected (h, w, 3) uint8 image, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    header = ["P6"]
    for c in comments:
        header.append("# " + c.replace("\n", " "))
    header.append(f"{w} {h}")
    header.append("255")
    payload = ("\n".join(header) + "\n").encode("ascii") + rgb.tobytes()
    if hasattr(target, "write"):
        target.write(payload)
        return
    with open(target, "wb") as fh:
        fh.write(payload)


def render_heatmap(
    score_map: ScoreMap, target, cell_px: int = 1, comments: Sequence[str] = ()
) -> np.ndarray:
    """Render a score map to a PPM file, one cell_px-square block per patch.

    Deterministic: rendering the same map twice produces byte-identical
    files. Returns the pixel array that was written.
    """
    if cell_px < 1:
        raise ValueError(f"cell_px must be >= 1, got {cell_px}")
    rgb = heatmap_rgb(score_map)
    if cell_px > 1:
        rgb = np.repeat(np.repeat(rgb, cell_px, axis=0), cell_px, axis=1)
    write_ppm(rgb, target, comments=comments)
    return rgb
