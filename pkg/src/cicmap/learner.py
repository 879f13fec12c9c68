"""Rapid model training by iterative patch selection.

Builds the training sets a few patches at a time: each round picks the most
informative labeled patches per class under a selection criterion, refits the
evidence model and rescores the slide. The default schedule runs the
high-density / worst / deterioration cycle three times and then fills the
remaining per-class budget with worst-criterion rounds, which lands exactly
on the default 20-patch budget.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

from .errors import InputFormatError, SelectionStateError, ValidationError
from .evidence import (
    DEFAULT_PATCH_SKIP_THRESHOLD,
    EmptyModelError,
    EvidenceModel,
    MatchParams,
    PatchRef,
    fit_model,
)
from .features import SlideDescriptorSet
from .scoring import ScoreMap, score_slide

CRITERIA = ("high_density", "worst", "deterioration", "no_information")

LABEL_VALUES = ("cancer", "normal", "excluded")
LABELS_CSV_HEADER = ["X", "Y", "label"]

PatchLabels = dict[tuple[int, int], str]

DEFAULT_BUDGET_PER_CLASS = 20
DEFAULT_PER_ROUND_K = 2


@dataclass
class TrainState:
    """Mutable state of a training run: current selections and score history."""

    selected_p: list[tuple[int, int]] = field(default_factory=list)
    selected_n: list[tuple[int, int]] = field(default_factory=list)
    round_scores: list[ScoreMap] = field(default_factory=list)
    round_criteria: list[str] = field(default_factory=list)
    budget_per_class: int = DEFAULT_BUDGET_PER_CLASS
    per_round_k: int = DEFAULT_PER_ROUND_K


def default_schedule() -> list[str]:
    return ["high_density", "worst", "deterioration"] * 3


def parse_schedule(spec) -> list[str]:
    """Expand a schedule description into a flat list of criterion tokens.

    Accepts a list of tokens or a comma-separated string; a token may carry
    a repeat count, e.g. ``"high_density,worst*3"``.
    """
    tokens = [t.strip() for t in spec.split(",")] if isinstance(spec, str) else list(spec)
    out: list[str] = []
    for tok in tokens:
        if not tok:
            continue
        name, _, times = str(tok).partition("*")
        repeat = 1
        if times:
            try:
                repeat = int(times)
            except ValueError:
                raise ValueError(f"bad repeat count in schedule token {tok!r}") from None
            if repeat < 1:
                raise ValueError(f"repeat count must be >= 1 in {tok!r}")
        if name not in CRITERIA:
            raise ValueError(f"unknown selection criterion {name!r}")
        out.extend([name] * repeat)
    return out


def _eligible(
    state: TrainState,
    labels: PatchLabels,
    slide: SlideDescriptorSet,
    patch_skip_threshold: int,
    want_label: str,
) -> list[tuple[int, int]]:
    taken = set(state.selected_p) | set(state.selected_n)
    out = []
    for (x, y), label in labels.items():
        if label != want_label or (x, y) in taken:
            continue
        if not (0 <= x < slide.grid_cols and 0 <= y < slide.grid_rows):
            continue
        if slide.patch_count(x, y) < patch_skip_threshold:
            continue
        out.append((x, y))
    return out


def _cell_score(score_map: ScoreMap, coord: tuple[int, int]) -> float:
    x, y = coord
    return float(score_map.score[y, x])


def select_patches(
    criterion: str,
    state: TrainState,
    labels: PatchLabels,
    slide: SlideDescriptorSet,
    k: int,
    patch_skip_threshold: int = DEFAULT_PATCH_SKIP_THRESHOLD,
) -> tuple[list[tuple[int, int]], list[tuple[int, int]]]:
    """Pick k not-yet-selected labeled patches per class under a criterion.

    high_density: most descriptors. worst: lowest score among cancer patches /
    highest among normal. deterioration: score moved most against the label
    since the previous round. no_information: |score| closest to zero. Ties
    break in raster order (Y then X). Patches under the skip threshold are
    never eligible.
    """
    if criterion not in CRITERIA:
        raise ValueError(f"unknown selection criterion {criterion!r}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if criterion in ("worst", "no_information") and not state.round_scores:
        raise SelectionStateError(f"{criterion} selection requires a scored round")
    if criterion == "deterioration" and len(state.round_scores) < 2:
        raise SelectionStateError("deterioration selection requires two scored rounds")

    picks: list[list[tuple[int, int]]] = []
    for want in ("cancer", "normal"):
        cands = _eligible(state, labels, slide, patch_skip_threshold, want)
        if criterion != "high_density":
            # Score-based criteria can only rank patches the maps actually scored.
            cands = [
                c
                for c in cands
                if not any(
                    math.isnan(_cell_score(m, c))
                    for m in state.round_scores[-2 if criterion == "deterioration" else -1:]
                )
            ]
        if len(cands) < k:
            raise SelectionStateError(
                f"need {k} eligible {want} patches, only {len(cands)} remain"
            )
        if criterion == "high_density":
            keyf = lambda c: -slide.patch_count(*c)
        elif criterion == "worst":
            cur = state.round_scores[-1]
            sign = 1.0 if want == "cancer" else -1.0
            keyf = lambda c: sign * _cell_score(cur, c)
        elif criterion == "deterioration":
            cur, prev = state.round_scores[-1], state.round_scores[-2]
            sign = 1.0 if want == "cancer" else -1.0
            keyf = lambda c: sign * (_cell_score(cur, c) - _cell_score(prev, c))
        else:  # no_information
            cur = state.round_scores[-1]
            keyf = lambda c: abs(_cell_score(cur, c))
        ranked = sorted(cands, key=lambda c: (keyf(c), c[1], c[0]))
        picks.append(ranked[:k])
    return picks[0], picks[1]


def _validate_labels(labels: PatchLabels, slide: SlideDescriptorSet) -> None:
    for (x, y), label in labels.items():
        if label not in LABEL_VALUES:
            raise ValidationError(f"unknown label {label!r} at patch ({x}, {y})")
        if not (0 <= x < slide.grid_cols and 0 <= y < slide.grid_rows):
            raise ValidationError(
                f"labeled patch ({x}, {y}) outside the {slide.grid_cols}x{slide.grid_rows} grid"
            )


def train(
    slide: SlideDescriptorSet,
    labels: PatchLabels,
    params: MatchParams = MatchParams(),
    *,
    schedule: list[str] | None = None,
    budget_per_class: int = DEFAULT_BUDGET_PER_CLASS,
    per_round_k: int = DEFAULT_PER_ROUND_K,
    patch_skip_threshold: int = DEFAULT_PATCH_SKIP_THRESHOLD,
    log_base: str = "e",
    threads: int = 1,
) -> tuple[EvidenceModel, TrainState]:
    """Run the scheduled selection/refit loop until the per-class budget is full.

    The schedule is a list of criterion tokens consumed one per round; once
    exhausted, worst-criterion rounds fill the remaining budget. Every round
    adds up to per_round_k patches per class, refits and rescores, so the
    history holds one score map per round.
    """
    if budget_per_class < 1:
        raise ValueError(f"budget_per_class must be >= 1, got {budget_per_class}")
    if per_round_k < 1:
        raise ValueError(f"per_round_k must be >= 1, got {per_round_k}")
    if schedule is None:
        schedule = default_schedule()
    for token in schedule:
        if token not in CRITERIA:
            raise ValueError(f"unknown selection criterion {token!r} in schedule")
    _validate_labels(labels, slide)

    state = TrainState(budget_per_class=budget_per_class, per_round_k=per_round_k)
    for cls_name in ("cancer", "normal"):
        n_eligible = len(_eligible(state, labels, slide, patch_skip_threshold, cls_name))
        if n_eligible < budget_per_class:
            raise ValidationError(
                f"labels provide {n_eligible} eligible {cls_name} patches; "
                f"need at least budget_per_class = {budget_per_class}"
            )

    model: EvidenceModel | None = None
    round_idx = 0
    while len(state.selected_p) < budget_per_class:
        criterion = schedule[round_idx] if round_idx < len(schedule) else "worst"
        k = min(per_round_k, budget_per_class - len(state.selected_p))
        new_p, new_n = select_patches(
            criterion, state, labels, slide, k, patch_skip_threshold
        )
        state.selected_p.extend(new_p)
        state.selected_n.extend(new_n)
        try:
            model = fit_model(
                [PatchRef(slide, x, y) for x, y in state.selected_p],
                [PatchRef(slide, x, y) for x, y in state.selected_n],
                params,
                patch_skip_threshold=patch_skip_threshold,
                log_base=log_base,
            )
        except EmptyModelError as exc:
            raise EmptyModelError(f"round {round_idx}: {exc}") from exc
        state.round_scores.append(score_slide(model, slide, threads=threads))
        state.round_criteria.append(criterion)
        round_idx += 1

    assert model is not None
    return model, state


def load_labels(source) -> PatchLabels:
    """Read a labels CSV (header ``X,Y,label``); unlisted patches are excluded."""
    if hasattr(source, "read"):
        return _load_labels_stream(source)
    with open(source, "r", encoding="utf-8", newline="") as fh:
        return _load_labels_stream(fh)


def _load_labels_stream(stream) -> PatchLabels:
    reader = csv.reader(stream)
    try:
        header = next(reader)
    except StopIteration:
        raise InputFormatError("missing header", line=1) from None
    if header != LABELS_CSV_HEADER:
        raise InputFormatError("bad header: expected X,Y,label", line=1)
    labels: PatchLabels = {}
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != 3:
            raise InputFormatError(f"expected 3 fields, got {len(row)}", line=lineno)
        try:
            x, y = int(row[0]), int(row[1])
        except ValueError as exc:
            raise InputFormatError(str(exc), line=lineno) from None
        label = row[2]
        if label not in LABEL_VALUES:
            raise ValidationError(
                f"label must be one of {'/'.join(LABEL_VALUES)}, got {label!r}", line=lineno
            )
        if x < 0 or y < 0:
            raise ValidationError(f"negative patch coordinate ({x}, {y})", line=lineno)
        labels[(x, y)] = label
    return labels


def save_labels(labels: PatchLabels, target) -> None:
    """Write labels CSV in raster order (Y then X)."""
    if hasattr(target, "write"):
        _save_labels_stream(labels, target)
        return
    with open(target, "w", encoding="utf-8", newline="") as fh:
        _save_labels_stream(labels, fh)


def _save_labels_stream(labels: PatchLabels, stream) -> None:
    writer = csv.writer(stream, lineterminator="\n")
    writer.writerow(LABELS_CSV_HEADER)
    for (x, y) in sorted(labels, key=lambda c: (c[1], c[0])):
        writer.writerow([x, y, labels[(x, y)]])
