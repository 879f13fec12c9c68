"""Per-patch scoring: the spatial distribution of classification information content.

Every patch descriptor is matched against the union codebook of the model
(positives first, then negatives; nearest assignment, ties to the lowest
index) so a descriptor can never count as both kinds of evidence. The patch
score is the count-weighted sum of the matched features' information
content, with the positive and negative sums weighted (1 - alpha) and alpha
to compensate for unequal evidence counts.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, EmptyModelError, InputFormatError
from .evidence import EvidenceModel, nearest_leaders
from .features import SlideDescriptorSet

SCORE_CSV_HEADER = ["X", "Y", "n_descriptors", "skipped", "score", "pos_hits", "neg_hits"]


@dataclass(frozen=True)
class PatchScore:
    score: float
    pos_hits: int
    neg_hits: int


@dataclass
class ScoreMap:
    """Per-patch scores over a slide grid, indexed [Y, X].

    Skipped patches (too few descriptors to support a claim) carry NaN in
    ``score`` and True in ``skipped``.
    """

    slide_id: str
    cols: int
    rows: int
    score: np.ndarray
    n_descriptors: np.ndarray
    skipped: np.ndarray
    pos_hits: np.ndarray
    neg_hits: np.ndarray

    def cell(self, x: int, y: int) -> dict:
        return {
            "score": float(self.score[y, x]),
            "n_descriptors": int(self.n_descriptors[y, x]),
            "skipped": bool(self.skipped[y, x]),
            "pos_hits": int(self.pos_hits[y, x]),
            "neg_hits": int(self.neg_hits[y, x]),
        }

    def scored_mask(self) -> np.ndarray:
        return ~self.skipped


class CodebookMatcher:
    """Reusable scoring kernel for one model: union codebook plus weights."""

    def __init__(self, model: EvidenceModel):
        feats = model.features
        if not feats:
            raise EmptyModelError("cannot score with a model that has no evidence features")
        self.model = model
        self.leaders = np.vstack([f.leader for f in feats])
        self.cic = np.array([f.cic for f in feats], dtype=np.float64)
        self.n_p = model.n_p
        # Positive evidence weighted (1 - alpha), negative weighted alpha.
        side_weight = np.where(
            np.arange(len(feats)) < self.n_p, 1.0 - model.alpha, model.alpha
        )
        self.weighted_cic = side_weight * self.cic

    def score_patch(self, patch_records: np.ndarray) -> PatchScore:
        if len(patch_records) == 0:
            return PatchScore(0.0, 0, 0)
        idx, ok = nearest_leaders(
            patch_records, self.leaders, self.model.params.match_threshold
        )
        counts = np.bincount(idx[ok], minlength=len(self.leaders)).astype(np.float64)
        score = float(self.weighted_cic @ counts)
        pos_hits = int(counts[: self.n_p].sum())
        neg_hits = int(counts[self.n_p:].sum())
        return PatchScore(score, pos_hits, neg_hits)


def score_patch(model: EvidenceModel, patch_records) -> PatchScore:
    """Score one patch's descriptor block against the model."""
    recs = np.asarray(patch_records, dtype=np.float64)
    if recs.ndim == 1:
        recs = recs.reshape(0, -1) if recs.size == 0 else recs.reshape(1, -1)
    return CodebookMatcher(model).score_patch(recs)


def classify(score: float) -> str:
    """Cancer iff the patch's information content is strictly positive."""
    return "cancer" if score > 0.0 else "not_cancer"


def score_slide(
    model: EvidenceModel, slide: SlideDescriptorSet, threads: int = 1
) -> ScoreMap:
    """Score every patch of a slide; patches under the skip threshold are marked skipped.

    ``threads`` sizes an internal worker pool (0 = auto); results are
    identical for any value because patches are scored independently.
    """
    if slide.patch_size_px != model.patch_size_px:
        raise ConfigurationError(
            f"slide patch size {slide.patch_size_px} != model patch size {model.patch_size_px}"
        )
    matcher = CodebookMatcher(model)
    cols, rows = slide.grid_cols, slide.grid_rows
    score = np.full((rows, cols), np.nan)
    skipped = np.ones((rows, cols), dtype=bool)
    pos_hits = np.zeros((rows, cols), dtype=np.int64)
    neg_hits = np.zeros((rows, cols), dtype=np.int64)
    n_desc = slide.patch_count_grid()

    todo = [
        (x, y)
        for y in range(rows)
        for x in range(cols)
        if n_desc[y, x] >= model.patch_skip_threshold
    ]

    def run(coord):
        x, y = coord
        return coord, matcher.score_patch(slide.patch_descriptors(x, y))

    if threads == 1 or len(todo) <= 1:
        results = map(run, todo)
        for (x, y), ps in results:
            score[y, x] = ps.score
            skipped[y, x] = False
            pos_hits[y, x] = ps.pos_hits
            neg_hits[y, x] = ps.neg_hits
    else:
        workers = threads if threads > 0 else None
        with ThreadPoolExecutor(max_workers=workers) as pool:
            for (x, y), ps in pool.map(run, todo):
                score[y, x] = ps.score
                skipped[y, x] = False
                pos_hits[y, x] = ps.pos_hits
                neg_hits[y, x] = ps.neg_hits

    return ScoreMap(
        slide_id=slide.slide_id,
        cols=cols,
        rows=rows,
        score=score,
        n_descriptors=n_desc,
        skipped=skipped,
        pos_hits=pos_hits,
        neg_hits=neg_hits,
    )


def write_score_map(score_map: ScoreMap, target) -> None:
    """Write a score map as CSV, raster order, scores at 9 significant digits.

    Skipped cells report an absent score (empty field).
    """
    if hasattr(target, "write"):
        _write_stream(score_map, target)
        return
    with open(target, "w", encoding="utf-8", newline="") as fh:
        _write_stream(score_map, fh)


def _write_stream(score_map: ScoreMap, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(SCORE_CSV_HEADER)
    for y in range(score_map.rows):
        for x in range(score_map.cols):
            sk = bool(score_map.skipped[y, x])
            writer.writerow(
                [
                    x,
                    y,
                    int(score_map.n_descriptors[y, x]),
                    "true" if sk else "false",
                    "" if sk else f"{float(score_map.score[y, x]):.9g}",
                    int(score_map.pos_hits[y, x]),
                    int(score_map.neg_hits[y, x]),
                ]
            )


def read_score_map(source, slide_id: str = "") -> ScoreMap:
    """Read a score-map CSV back into a ScoreMap."""
    if hasattr(source, "read"):
        return _read_stream(source, slide_id)
    with open(source, "r", encoding="utf-8", newline="") as fh:
        return _read_stream(fh, slide_id)


def _read_stream(stream, slide_id: str) -> ScoreMap:
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise InputFormatError("missing header", line=1) from None
    if header != SCORE_CSV_HEADER:
        raise InputFormatError(
            f"bad header: expected {','.join(SCORE_CSV_HEADER)}", line=1
        )
    cells = []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(SCORE_CSV_HEADER):
            raise InputFormatError(
                f"expected {len(SCORE_CSV_HEADER)} fields, got {len(row)}", line=lineno
            )
        try:
            x, y, nd = int(row[0]), int(row[1]), int(row[2])
            sk = {"true": True, "false": False}[row[3]]
            sc = math.nan if row[4] == "" else float(row[4])
            ph, nh = int(row[5]), int(row[6])
        except (ValueError, KeyError) as exc:
            raise InputFormatError(str(exc), line=lineno) from None
        cells.append((x, y, nd, sk, sc, ph, nh))
    if not cells:
        raise InputFormatError("score map has no cells")
    cols = max(c[0] for c in cells) + 1
    rows = max(c[1] for c in cells) + 1
    out = ScoreMap(
        slide_id=slide_id,
        cols=cols,
        rows=rows,
        score=np.full((rows, cols), np.nan),
        n_descriptors=np.zeros((rows, cols), dtype=np.int64),
        skipped=np.ones((rows, cols), dtype=bool),
        pos_hits=np.zeros((rows, cols), dtype=np.int64),
        neg_hits=np.zeros((rows, cols), dtype=np.int64),
    )
    for x, y, nd, sk, sc, ph, nh in cells:
        out.score[y, x] = sc
        out.n_descriptors[y, x] = nd
        out.skipped[y, x] = sk
        out.pos_hits[y, x] = ph
        out.neg_hits[y, x] = nh
    return out
