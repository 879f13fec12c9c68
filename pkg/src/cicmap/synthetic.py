"""Synthetic slide generation: the desk-scale stand-in for real slide data.

Plants well-separated descriptor clusters in the 128-dimensional value box
and emits tokens into a labeled patch grid so that each cluster's true
cancer-appearance probability is known. Cluster centers are drawn
sequentially, so extending a spec with additional clusters keeps the
earlier centers unchanged (useful for building distribution-shifted
companion slides).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import SyntheticSpecError
from .features import COMPONENT_MAX, DESCRIPTOR_DIM, SlideDescriptorSet

_MAX_CENTER_TRIES = 1000


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for one synthetic slide; identical spec implies identical output.

    planted_rho gives each cluster's target probability of appearing on the
    cancer side; cluster_weights (optional) scale how much each cluster emits
    at all, with zero silencing a cluster entirely. Tokens are perturbed
    within match_threshold / 4 of their center, so descriptors of one
    cluster always match each other and never match another cluster when
    the separation is at least 1.5x the threshold.
    """

    n_clusters_p: int
    n_clusters_n: int
    cluster_separation: float
    planted_rho: tuple[float, ...]
    cols: int
    rows: int
    seed: int
    slide_id: str = "synthetic"
    match_threshold: float = 325.0
    patch_size_px: int = 512
    descriptors_per_patch: tuple = ("uniform", 3000, 3600)
    cancer_fraction: float = 0.5
    cluster_weights: tuple[float, ...] | None = None
    center_seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "planted_rho", tuple(float(r) for r in self.planted_rho))
        if self.cluster_weights is not None:
            object.__setattr__(
                self, "cluster_weights", tuple(float(w) for w in self.cluster_weights)
            )
        object.__setattr__(self, "descriptors_per_patch", tuple(self.descriptors_per_patch))
        n = self.n_clusters_p + self.n_clusters_n
        if self.n_clusters_p < 0 or self.n_clusters_n < 0 or n == 0:
            raise SyntheticSpecError("need at least one cluster")
        if len(self.planted_rho) != n:
            raise SyntheticSpecError(
                f"planted_rho must have {n} entries, got {len(self.planted_rho)}"
            )
        if any(r < 0.0 or r > 1.0 for r in self.planted_rho):
            raise SyntheticSpecError("planted_rho entries must lie in [0, 1]")
        if self.cluster_weights is not None:
            if len(self.cluster_weights) != n:
                raise SyntheticSpecError(f"cluster_weights must have {n} entries")
            if any(w < 0.0 for w in self.cluster_weights):
                raise SyntheticSpecError("cluster_weights must be non-negative")
        if self.cluster_separation <= self.match_threshold:
            raise SyntheticSpecError(
                "cluster_separation must exceed the match threshold "
                f"({self.cluster_separation} <= {self.match_threshold})"
            )
        if self.cols < 1 or self.rows < 1:
            raise SyntheticSpecError(f"grid must be non-empty, got {self.cols}x{self.rows}")
        if not 0.0 <= self.cancer_fraction <= 1.0:
            raise SyntheticSpecError("cancer_fraction must lie in [0, 1]")
        kind = self.descriptors_per_patch[0]
        if kind == "fixed":
            if len(self.descriptors_per_patch) != 2 or int(self.descriptors_per_patch[1]) < 0:
                raise SyntheticSpecError("fixed count spec is ('fixed', n) with n >= 0")
        elif kind == "uniform":
            if len(self.descriptors_per_patch) != 3:
                raise SyntheticSpecError("uniform count spec is ('uniform', low, high)")
            lo, hi = int(self.descriptors_per_patch[1]), int(self.descriptors_per_patch[2])
            if lo < 0 or hi < lo:
                raise SyntheticSpecError(f"bad uniform count range [{lo}, {hi}]")
        else:
            raise SyntheticSpecError(f"unknown count distribution kind {kind!r}")

    @property
    def n_clusters(self) -> int:
        return self.n_clusters_p + self.n_clusters_n

    def to_dict(self) -> dict:
        doc = {
            "n_clusters_p": self.n_clusters_p,
            "n_clusters_n": self.n_clusters_n,
            "cluster_separation": self.cluster_separation,
            "planted_rho": list(self.planted_rho),
            "cols": self.cols,
            "rows": self.rows,
            "seed": self.seed,
            "slide_id": self.slide_id,
            "match_threshold": self.match_threshold,
            "patch_size_px": self.patch_size_px,
            "descriptors_per_patch": list(self.descriptors_per_patch),
            "cancer_fraction": self.cancer_fraction,
        }
        if self.cluster_weights is not None:
            doc["cluster_weights"] = list(self.cluster_weights)
        if self.center_seed is not None:
            doc["center_seed"] = self.center_seed
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticSpec":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise SyntheticSpecError(f"unknown spec fields: {sorted(unknown)}")
        return cls(**doc)

    def save(self, target) -> None:
        text = json.dumps(self.to_dict(), indent=1) + "\n"
        if hasattr(target, "write"):
            target.write(text)
            return
        with open(target, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)

    @classmethod
    def load(cls, source) -> "SyntheticSpec":
        if hasattr(source, "read"):
            return cls.from_dict(json.load(source))
        with open(source, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def sample_centers(spec: SyntheticSpec) -> np.ndarray:
    """Cluster centers, pairwise at least cluster_separation apart.

    Drawn sequentially with rejection from the full component box, so the
    first k centers of a spec with more clusters (same center seed) are
    identical to the k-cluster spec's centers.
    """
    max_possible = math.sqrt(DESCRIPTOR_DIM) * COMPONENT_MAX
    if spec.cluster_separation > max_possible:
        raise SyntheticSpecError(
            f"separation {spec.cluster_separation:g} exceeds the box diameter {max_possible:g}"
        )
    rng = np.random.default_rng(spec.seed if spec.center_seed is None else spec.center_seed)
    centers: list[np.ndarray] = []
    for ci in range(spec.n_clusters):
        for _ in range(_MAX_CENTER_TRIES):
            cand = rng.uniform(0.0, COMPONENT_MAX, DESCRIPTOR_DIM)
            if all(
                float(np.linalg.norm(cand - c)) >= spec.cluster_separation for c in centers
            ):
                centers.append(cand)
                break
        else:
            raise SyntheticSpecError(
                f"could not place center {ci} at separation {spec.cluster_separation:g}"
            )
    return np.vstack(centers)


def patch_labels_for(spec: SyntheticSpec) -> dict[tuple[int, int], str]:
    """Spatial label layout: the left columns of the grid are the cancer region."""
    cancer_cols = int(spec.cols * spec.cancer_fraction + 0.5)
    return {
        (x, y): "cancer" if x < cancer_cols else "normal"
        for y in range(spec.rows)
        for x in range(spec.cols)
    }


def _emission_weights(spec: SyntheticSpec) -> tuple[np.ndarray, np.ndarray]:
    rho = np.asarray(spec.planted_rho, dtype=np.float64)
    mult = (
        np.ones(spec.n_clusters)
        if spec.cluster_weights is None
        else np.asarray(spec.cluster_weights, dtype=np.float64)
    )
    w_cancer = mult * rho
    w_normal = mult * (1.0 - rho)
    return w_cancer, w_normal


def synth_slide(spec: SyntheticSpec) -> tuple[SlideDescriptorSet, dict[tuple[int, int], str]]:
    """Generate a slide and its patch labels from a synthetic spec.

    Every patch draws its token clusters from the label-conditional emission
    weights; tokens are stored as float32 to keep large slides affordable.
    """
    centers = sample_centers(spec)
    labels = patch_labels_for(spec)
    w_cancer, w_normal = _emission_weights(spec)
    for name, w, lab in (("cancer", w_cancer, "cancer"), ("normal", w_normal, "normal")):
        if any(l == lab for l in labels.values()) and w.sum() <= 0.0:
            raise SyntheticSpecError(f"no cluster can emit in {name} patches")
    probs = {
        "cancer": w_cancer / w_cancer.sum() if w_cancer.sum() > 0 else None,
        "normal": w_normal / w_normal.sum() if w_normal.sum() > 0 else None,
    }

    rng = np.random.default_rng(spec.seed)
    coords = [(x, y) for y in range(spec.rows) for x in range(spec.cols)]
    kind = spec.descriptors_per_patch[0]
    if kind == "fixed":
        counts = np.full(len(coords), int(spec.descriptors_per_patch[1]), dtype=np.int64)
    else:
        lo, hi = int(spec.descriptors_per_patch[1]), int(spec.descriptors_per_patch[2])
        counts = rng.integers(lo, hi + 1, size=len(coords))

    total = int(counts.sum())
    desc = np.empty((total, DESCRIPTOR_DIM), dtype=np.float32)
    xs = np.empty(total, dtype=np.int64)
    ys = np.empty(total, dtype=np.int64)
    radius = spec.match_threshold / 4.0
    half = spec.patch_size_px // 2

    pos = 0
    for (x, y), n in zip(coords, counts):
        if n == 0:
            continue
        p = probs[labels[(x, y)]]
        ids = rng.choice(spec.n_clusters, size=n, p=p)
        dirs = rng.standard_normal((n, DESCRIPTOR_DIM))
        norms = np.linalg.norm(dirs, axis=1)
        norms[norms == 0.0] = 1.0
        radii = rng.uniform(0.0, radius, n)
        pts = centers[ids] + dirs * (radii / norms)[:, None]
        np.clip(pts, 0.0, COMPONENT_MAX, out=pts)
        desc[pos:pos + n] = pts.astype(np.float32)
        xs[pos:pos + n] = x * spec.patch_size_px + half
        ys[pos:pos + n] = y * spec.patch_size_px + half
        pos += n

    slide = SlideDescriptorSet.build(
        spec.slide_id,
        spec.cols * spec.patch_size_px,
        spec.rows * spec.patch_size_px,
        xs,
        ys,
        desc,
        patch_size_px=spec.patch_size_px,
    )
    return slide, labels


def shifted_companion_spec(
    spec: SyntheticSpec,
    *,
    slide_id: str,
    seed: int,
    extra_rho: tuple[float, ...],
    extra_is_positive: tuple[bool, ...],
    keep_original_emission: bool = False,
) -> SyntheticSpec:
    """Spec for a slide sharing the original's cluster centers plus unseen clusters.

    The companion reuses the original center stream (same center seed), so
    the original clusters keep their positions; the appended clusters are new
    feature-space regions the original slide never emitted. By default the
    original clusters are silenced so the companion draws only from the
    unseen ones.
    """
    if len(extra_rho) != len(extra_is_positive):
        raise SyntheticSpecError("extra_rho and extra_is_positive must align")
    base_w = (
        spec.cluster_weights
        if spec.cluster_weights is not None
        else tuple(1.0 for _ in range(spec.n_clusters))
    )
    old_w = base_w if keep_original_emission else tuple(0.0 for _ in base_w)
    return replace(
        spec,
        slide_id=slide_id,
        seed=seed,
        center_seed=spec.center_seed if spec.center_seed is not None else spec.seed,
        n_clusters_p=spec.n_clusters_p + sum(1 for p in extra_is_positive if p),
        n_clusters_n=spec.n_clusters_n + sum(1 for p in extra_is_positive if not p),
        planted_rho=tuple(spec.planted_rho) + tuple(extra_rho),
        cluster_weights=old_w + tuple(1.0 for _ in extra_rho),
    )
