"""Independent reference implementations used to cross-check the library.

Everything here is deliberately written the slow, explicit way (per-record
loops, pairwise pair counting) and shares no code with the production paths
it verifies.
"""

import math

import numpy as np


def slow_distance(a, b) -> float:
    total = 0.0
    for x, y in zip(a, b):
        total += (float(x) - float(y)) ** 2
    return math.sqrt(total)


def slow_codebook(records, threshold):
    """Sequential leader scan: absorb within threshold, else new leader."""
    leaders = []
    for rec in np.asarray(records, dtype=np.float64):
        if not any(np.linalg.norm(rec - l) < threshold for l in leaders):
            leaders.append(rec.copy())
    if not leaders:
        return np.empty((0, records.shape[1] if hasattr(records, "shape") else 128))
    return np.vstack(leaders)


def slow_assign(record, leaders, threshold):
    """Nearest-leader index within threshold, ties to the lowest index; -1 if none."""
    d2 = np.sum((np.asarray(leaders, dtype=np.float64) - np.asarray(record, dtype=np.float64)) ** 2, axis=1)
    best = int(np.flatnonzero(d2 == d2.min())[0])
    return best if math.sqrt(float(d2[best])) < threshold else -1


def slow_counts(records, leaders, threshold):
    counts = np.zeros(len(leaders), dtype=np.int64)
    for rec in records:
        j = slow_assign(rec, leaders, threshold)
        if j >= 0:
            counts[j] += 1
    return counts


def slow_patch_score(records, leaders, cic, n_p, alpha, threshold):
    """Explicit nearest-assignment double loop over a patch's records.

    Returns (score, pos_hits, neg_hits) with the positive evidence sum
    weighted (1 - alpha) and the negative sum weighted alpha.
    """
    pos_sum = 0.0
    neg_sum = 0.0
    pos_hits = 0
    neg_hits = 0
    for rec in records:
        j = slow_assign(rec, leaders, threshold)
        if j < 0:
            continue
        if j < n_p:
            pos_sum += cic[j]
            pos_hits += 1
        else:
            neg_sum += cic[j]
            neg_hits += 1
    return (1.0 - alpha) * pos_sum + alpha * neg_sum, pos_hits, neg_hits


def pairwise_auc(scores, is_cancer) -> float:
    """Probability that a cancer patch outscores a normal one, ties counted half."""
    scores = list(map(float, scores))
    pos = [s for s, c in zip(scores, is_cancer) if c]
    neg = [s for s, c in zip(scores, is_cancer) if not c]
    total = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                total += 1.0
            elif p == n:
                total += 0.5
    return total / (len(pos) * len(neg))
