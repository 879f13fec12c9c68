"""Evidence model fitting.

Turns labeled training patches into an evidence model: a leader codebook over
their descriptors, per-leader occurrence counts in the cancer and normal
training sets, appearance probabilities, signed classification information
content, and the accepted positive/negative evidence features.

The information measures use the natural logarithm by convention; the base
only rescales scores and never changes any sign test, and is recorded in the
model file.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .errors import EmptyModelError, ValidationError
from .features import DESCRIPTOR_DIM, SlideDescriptorSet, as_descriptor_matrix

MODEL_FORMAT_VERSION = 1

DEFAULT_MATCH_THRESHOLD = 325.0
DEFAULT_MIN_OCCURRENCES = 10
DEFAULT_ACCEPTANCE_RATIO = 2.0
DEFAULT_PATCH_SKIP_THRESHOLD = 3000

Polarity = Literal["positive", "negative"]

_CHUNK = 8192


@dataclass(frozen=True)
class MatchParams:
    """Descriptor-equality and evidence-acceptance parameters."""

    match_threshold: float = DEFAULT_MATCH_THRESHOLD
    min_occurrences: int = DEFAULT_MIN_OCCURRENCES
    acceptance_ratio: float = DEFAULT_ACCEPTANCE_RATIO

    def __post_init__(self):
        if self.match_threshold <= 0:
            raise ValueError(f"match_threshold must be positive, got {self.match_threshold}")
        if self.min_occurrences < 1:
            raise ValueError(f"min_occurrences must be >= 1, got {self.min_occurrences}")
        if self.acceptance_ratio <= 1:
            raise ValueError(f"acceptance_ratio must be > 1, got {self.acceptance_ratio}")


def distance(a, b) -> float:
    """Euclidean distance between two descriptors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = a - b
    return math.sqrt(float(d @ d))


def matches(a, b, params: MatchParams) -> bool:
    """Two descriptors are considered equal when strictly closer than the threshold."""
    return distance(a, b) < params.match_threshold


def sq_distances(queries: np.ndarray, leaders: np.ndarray) -> np.ndarray:
    """(n, m) squared Euclidean distances, clamped at zero.

    Uses the expanded-product form; exact for integer-valued inputs, and the
    clamp absorbs the tiny negatives rounding can produce otherwise.
    """
    q = queries.astype(np.float64, copy=False)
    l = leaders.astype(np.float64, copy=False)
    q2 = np.einsum("ij,ij->i", q, q)
    l2 = np.einsum("ij,ij->i", l, l)
    d2 = q2[:, None] + l2[None, :] - 2.0 * (q @ l.T)
    np.maximum(d2, 0.0, out=d2)
    return d2


def nearest_leaders(
    records: np.ndarray, leaders: np.ndarray, match_threshold: float
) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-leader index per record and whether it lies within the threshold.

    Ties on the nearest distance go to the lowest leader index. Records
    outside the threshold of every leader are flagged unmatched.
    """
    n = len(records)
    if n == 0 or len(leaders) == 0:
        return np.zeros(n, dtype=np.int64), np.zeros(n, dtype=bool)
    idx = np.empty(n, dtype=np.int64)
    ok = np.empty(n, dtype=bool)
    t2 = float(match_threshold) ** 2
    for s in range(0, n, _CHUNK):
        e = min(s + _CHUNK, n)
        d2 = sq_distances(records[s:e], leaders)
        best = d2.argmin(axis=1)
        idx[s:e] = best
        ok[s:e] = d2[np.arange(e - s), best] < t2
    return idx, ok


def build_codebook(records, params: MatchParams) -> np.ndarray:
    """Greedy leader clustering over a canonical descriptor sequence.

    Scans records in order; a record within the match threshold of an
    existing leader is absorbed, otherwise it becomes a new leader. Returns
    the (L, 128) leader matrix in creation order. The chunked implementation
    reproduces the sequential scan exactly.
    """
    recs = records if isinstance(records, np.ndarray) else as_descriptor_matrix(records)
    if recs.ndim != 2 or recs.shape[1] != DESCRIPTOR_DIM:
        raise ValidationError(f"records must be (n, {DESCRIPTOR_DIM}), got {recs.shape}")
    n = len(recs)
    if n == 0:
        return np.empty((0, DESCRIPTOR_DIM), dtype=np.float64)

    t2 = float(params.match_threshold) ** 2
    leaders: list[np.ndarray] = []
    for s in range(0, n, _CHUNK):
        chunk = recs[s:min(s + _CHUNK, n)].astype(np.float64, copy=False)
        m = len(chunk)
        if leaders:
            mind = sq_distances(chunk, np.vstack(leaders)).min(axis=1)
        else:
            mind = np.full(m, np.inf)
        # Each new leader can only absorb records after it within the chunk.
        while True:
            unmatched = np.flatnonzero(mind >= t2)
            if unmatched.size == 0:
                break
            i = int(unmatched[0])
            leader = chunk[i].copy()
            leaders.append(leader)
            mind[i] = 0.0
            if i + 1 < m:
                d2 = sq_distances(chunk[i + 1:], leader[None, :])[:, 0]
                np.minimum(mind[i + 1:], d2, out=mind[i + 1:])
    return np.vstack(leaders)


def count_occurrences(leader, records, codebook: np.ndarray, params: MatchParams) -> int:
    """Number of records whose nearest codebook leader (within threshold) is this one."""
    leader = np.asarray(leader, dtype=np.float64)
    hits = np.flatnonzero(np.all(codebook == leader, axis=1))
    if hits.size == 0:
        raise ValueError("leader is not a member of the codebook")
    li = int(hits[0])
    recs = records if isinstance(records, np.ndarray) else as_descriptor_matrix(records)
    idx, ok = nearest_leaders(recs, codebook, params.match_threshold)
    return int(np.count_nonzero(ok & (idx == li)))


def estimate_rho(count_p: int, count_n: int) -> float:
    """Appearance probability on the cancer side: count_p / (count_p + count_n)."""
    if count_p < 0 or count_n < 0:
        raise ValueError("occurrence counts must be non-negative")
    total = count_p + count_n
    if total == 0:
        raise ValueError("probability undefined: zero occurrences on both sides")
    return count_p / total


def _xlog2x(r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    # r*ln(2r) and (1-r)*ln(2(1-r)) with the 0*log(0) = 0 convention.
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.where(r > 0.0, r * np.log(2.0 * r), 0.0)
        b = np.where(r < 1.0, (1.0 - r) * np.log(2.0 * (1.0 - r)), 0.0)
    return a, b


def classification_information(rho_p):
    """Signed information content of a feature with cancer probability rho_p.

    C(rho) = rho*ln(2 rho) - (1-rho)*ln(2(1-rho)), in nats. Positive for
    rho > 1/2 (cancer evidence), zero at 1/2, negative below. Accepts a
    scalar or an array.
    """
    r = np.asarray(rho_p, dtype=np.float64)
    if r.size and (r.min() < 0.0 or r.max() > 1.0):
        raise ValueError("rho_p must lie in [0, 1]")
    a, b = _xlog2x(r)
    out = a - b
    return float(out) if out.ndim == 0 else out


def kl_divergence(rho_p):
    """Divergence of (rho, 1-rho) from the uninformative (1/2, 1/2), in nats.

    D(rho) = rho*ln(2 rho) + (1-rho)*ln(2(1-rho)); non-negative and symmetric
    about 1/2, so it flags useful features without telling their direction.
    """
    r = np.asarray(rho_p, dtype=np.float64)
    if r.size and (r.min() < 0.0 or r.max() > 1.0):
        raise ValueError("rho_p must lie in [0, 1]")
    a, b = _xlog2x(r)
    out = a + b
    return float(out) if out.ndim == 0 else out


def accept_evidence(
    rho_p: float, count_p: int, count_n: int, params: MatchParams
) -> Polarity | None:
    """Acceptance test for one candidate feature; None means rejected.

    Features seen fewer than min_occurrences times are ignored; otherwise one
    side's probability must exceed the other by the acceptance ratio.
    """
    if count_p + count_n < params.min_occurrences:
        return None
    rho_n = 1.0 - rho_p
    if rho_p > params.acceptance_ratio * rho_n:
        return "positive"
    if rho_n > params.acceptance_ratio * rho_p:
        return "negative"
    return None


@dataclass(frozen=True)
class EvidenceFeature:
    """An accepted codebook leader with its counts, probability and information content."""

    leader: np.ndarray
    count_p: int
    count_n: int
    rho_p: float
    cic: float
    polarity: Polarity


@dataclass(frozen=True)
class PatchRef:
    """Reference to one labeled training patch: a slide plus grid coordinates."""

    slide: SlideDescriptorSet
    x: int
    y: int

    def key(self) -> tuple[str, int, int]:
        return (self.slide.slide_id, self.x, self.y)


@dataclass
class EvidenceModel:
    """The fitted set of evidence features plus all fitting parameters."""

    positives: list[EvidenceFeature]
    negatives: list[EvidenceFeature]
    alpha: float
    params: MatchParams
    patch_skip_threshold: int = DEFAULT_PATCH_SKIP_THRESHOLD
    patch_size_px: int = 512
    log_base: str = "e"
    provenance: dict = field(default_factory=dict)

    @property
    def n_p(self) -> int:
        return len(self.positives)

    @property
    def n_n(self) -> int:
        return len(self.negatives)

    @property
    def features(self) -> list[EvidenceFeature]:
        """Union codebook order: positives first, then negatives."""
        return list(self.positives) + list(self.negatives)

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "log_base": self.log_base,
            "params": {
                "match_threshold": self.params.match_threshold,
                "min_occurrences": self.params.min_occurrences,
                "acceptance_ratio": self.params.acceptance_ratio,
                "patch_skip_threshold": self.patch_skip_threshold,
                "patch_size_px": self.patch_size_px,
            },
            "alpha": self.alpha,
            "n_p": self.n_p,
            "n_n": self.n_n,
            "features": [
                {
                    "polarity": f.polarity,
                    "rho_p": f.rho_p,
                    "cic": f.cic,
                    "count_p": f.count_p,
                    "count_n": f.count_n,
                    "leader": [float(v) for v in f.leader],
                }
                for f in self.features
            ],
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "EvidenceModel":
        if doc.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValidationError(
                f"unsupported model format_version {doc.get('format_version')!r}"
            )
        p = doc["params"]
        params = MatchParams(
            match_threshold=p["match_threshold"],
            min_occurrences=p["min_occurrences"],
            acceptance_ratio=p["acceptance_ratio"],
        )
        positives: list[EvidenceFeature] = []
        negatives: list[EvidenceFeature] = []
        for f in doc["features"]:
            leader = np.asarray(f["leader"], dtype=np.float64)
            if leader.shape != (DESCRIPTOR_DIM,):
                raise ValidationError(f"leader must have {DESCRIPTOR_DIM} components")
            feat = EvidenceFeature(
                leader=leader,
                count_p=int(f["count_p"]),
                count_n=int(f["count_n"]),
                rho_p=float(f["rho_p"]),
                cic=float(f["cic"]),
                polarity=f["polarity"],
            )
            if feat.polarity == "positive":
                positives.append(feat)
            elif feat.polarity == "negative":
                negatives.append(feat)
            else:
                raise ValidationError(f"unknown polarity {feat.polarity!r}")
        return cls(
            positives=positives,
            negatives=negatives,
            alpha=float(doc["alpha"]),
            params=params,
            patch_skip_threshold=int(p["patch_skip_threshold"]),
            patch_size_px=int(p["patch_size_px"]),
            log_base=doc.get("log_base", "e"),
            provenance=doc.get("provenance", {}),
        )

    def save(self, target) -> None:
        """Write the model as JSON; floats round-trip exactly via repr."""
        doc = self.to_dict()
        if hasattr(target, "write"):
            json.dump(doc, target, indent=1)
            target.write("\n")
            return
        with open(target, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(doc, fh, indent=1)
            fh.write("\n")

    @classmethod
    def load(cls, source) -> "EvidenceModel":
        if hasattr(source, "read"):
            return cls.from_dict(json.load(source))
        with open(source, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def _canonical_side(refs: Sequence[PatchRef], side: str) -> list[PatchRef]:
    """Validate one training set and return it in canonical order.

    Canonical order across possibly several slides: slide id, then patch
    raster order (Y before X); descriptor order within a patch is the
    slide's stored order.
    """
    seen: set[tuple[str, int, int]] = set()
    for ref in refs:
        key = ref.key()
        if key in seen:
            raise ValidationError(f"patch {key} appears twice in the {side} set")
        seen.add(key)
        cols, rows = ref.slide.grid_cols, ref.slide.grid_rows
        if not (0 <= ref.x < cols and 0 <= ref.y < rows):
            raise ValidationError(
                f"patch ({ref.x}, {ref.y}) outside the {cols}x{rows} grid of {ref.slide.slide_id!r}"
            )
    return sorted(refs, key=lambda r: (r.slide.slide_id, r.y, r.x))


def _stack_patches(refs: Sequence[PatchRef]) -> np.ndarray:
    blocks = [r.slide.patch_descriptors(r.x, r.y) for r in refs]
    blocks = [b for b in blocks if len(b)]
    if not blocks:
        return np.empty((0, DESCRIPTOR_DIM), dtype=np.float64)
    return np.vstack(blocks)


def _gather_training(
    positive_patches: Sequence[PatchRef], negative_patches: Sequence[PatchRef]
) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
    """Training streams: codebook stream (each distinct patch once) plus per-side records.

    A patch may legitimately appear in both sets (it then pulls every one of
    its features toward probability 1/2); duplicates within one set are
    rejected.
    """
    pos_refs = _canonical_side(positive_patches, "positive")
    neg_refs = _canonical_side(negative_patches, "negative")

    patch_sizes = {r.slide.patch_size_px for r in pos_refs + neg_refs}
    if len(patch_sizes) != 1:
        raise ValidationError(f"training slides disagree on patch size: {sorted(patch_sizes)}")

    by_key = {r.key(): r for r in pos_refs + neg_refs}
    union = sorted(by_key.values(), key=lambda r: (r.slide.slide_id, r.y, r.x))
    return (
        _stack_patches(union),
        _stack_patches(pos_refs),
        _stack_patches(neg_refs),
        patch_sizes.pop(),
    )


def fit_model(
    positive_patches: Sequence[PatchRef],
    negative_patches: Sequence[PatchRef],
    params: MatchParams = MatchParams(),
    *,
    patch_skip_threshold: int = DEFAULT_PATCH_SKIP_THRESHOLD,
    log_base: str = "e",
) -> EvidenceModel:
    """Fit an evidence model from labeled training patches.

    Pipeline: canonical concatenation of the training descriptors, leader
    codebook, per-leader occurrence counts on each side, probability and
    acceptance test, classification information content. Deterministic for
    identical inputs.
    """
    if not positive_patches or not negative_patches:
        raise ValidationError("both training patch sets must be non-empty")
    if log_base not in ("e", "2"):
        raise ValueError(f"log_base must be 'e' or '2', got {log_base!r}")

    stream, pos_records, neg_records, patch_size = _gather_training(
        positive_patches, negative_patches
    )
    codebook = build_codebook(stream, params)
    n_leaders = len(codebook)
    idx_p, ok_p = nearest_leaders(pos_records, codebook, params.match_threshold)
    idx_n, ok_n = nearest_leaders(neg_records, codebook, params.match_threshold)
    counts_p = np.bincount(idx_p[ok_p], minlength=n_leaders)
    counts_n = np.bincount(idx_n[ok_n], minlength=n_leaders)

    scale = 1.0 if log_base == "e" else 1.0 / math.log(2.0)
    positives: list[EvidenceFeature] = []
    negatives: list[EvidenceFeature] = []
    for li in range(n_leaders):
        cp, cn = int(counts_p[li]), int(counts_n[li])
        if cp + cn == 0:
            continue
        rho = estimate_rho(cp, cn)
        polarity = accept_evidence(rho, cp, cn, params)
        if polarity is None:
            continue
        feat = EvidenceFeature(
            leader=codebook[li].copy(),
            count_p=cp,
            count_n=cn,
            rho_p=rho,
            cic=classification_information(rho) * scale,
            polarity=polarity,
        )
        (positives if polarity == "positive" else negatives).append(feat)

    if not positives and not negatives:
        raise EmptyModelError(
            "no evidence features accepted: training patches are insufficient or not separable"
        )
    alpha = len(positives) / (len(positives) + len(negatives))
    provenance = {
        "positive_patches": [
            {"slide_id": r.slide.slide_id, "x": r.x, "y": r.y} for r in positive_patches
        ],
        "negative_patches": [
            {"slide_id": r.slide.slide_id, "x": r.x, "y": r.y} for r in negative_patches
        ],
    }
    return EvidenceModel(
        positives=positives,
        negatives=negatives,
        alpha=alpha,
        params=params,
        patch_skip_threshold=patch_skip_threshold,
        patch_size_px=patch_size,
        log_base=log_base,
        provenance=provenance,
    )
