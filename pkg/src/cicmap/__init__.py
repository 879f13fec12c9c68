"""Patch-level tumor-likeness scoring via classification information content.

The pipeline: local descriptors are bucketed into a slide's patch grid
(features), labeled training patches yield an evidence model of positive and
negative features (evidence), the model scores every patch of a slide
(scoring), a selection schedule grows the training sets a few patches at a
time (learner), and histograms / ROC / heatmaps quantify the result
(evaluation, synthetic, report).
"""

from .errors import (
    CicmapError,
    ConfigurationError,
    EmptyModelError,
    EvaluationError,
    InputFormatError,
    SelectionStateError,
    SyntheticSpecError,
    ValidationError,
)
from .evidence import (
    EvidenceFeature,
    EvidenceModel,
    MatchParams,
    PatchRef,
    accept_evidence,
    build_codebook,
    classification_information,
    count_occurrences,
    distance,
    estimate_rho,
    fit_model,
    kl_divergence,
    matches,
)
from .features import (
    ExtractionConfig,
    KeypointRecord,
    SlideDescriptorSet,
    extract_descriptors,
    grid_dims,
    ingest_descriptors,
    patch_index,
    write_descriptors,
)
from .learner import (
    TrainState,
    default_schedule,
    load_labels,
    parse_schedule,
    save_labels,
    select_patches,
    train,
)
from .scoring import (
    PatchScore,
    ScoreMap,
    classify,
    read_score_map,
    score_patch,
    score_slide,
    write_score_map,
)
from .evaluation import (
    HistogramBin,
    RocResult,
    heatmap_rgb,
    histogram,
    render_heatmap,
    roc_auc,
    roc_from_scores,
    write_histogram_csv,
    write_ppm,
    write_roc_csv,
)
from .synthetic import SyntheticSpec, sample_centers, shifted_companion_spec, synth_slide

__version__ = "0.1.0"

__all__ = [
    "CicmapError",
    "ConfigurationError",
    "EmptyModelError",
    "EvaluationError",
    "InputFormatError",
    "SelectionStateError",
    "SyntheticSpecError",
    "ValidationError",
    "EvidenceFeature",
    "EvidenceModel",
    "MatchParams",
    "PatchRef",
    "accept_evidence",
    "build_codebook",
    "classification_information",
    "count_occurrences",
    "distance",
    "estimate_rho",
    "fit_model",
    "kl_divergence",
    "matches",
    "ExtractionConfig",
    "KeypointRecord",
    "SlideDescriptorSet",
    "extract_descriptors",
    "grid_dims",
    "ingest_descriptors",
    "patch_index",
    "write_descriptors",
    "TrainState",
    "default_schedule",
    "load_labels",
    "parse_schedule",
    "save_labels",
    "select_patches",
    "train",
    "PatchScore",
    "ScoreMap",
    "classify",
    "read_score_map",
    "score_patch",
    "score_slide",
    "write_score_map",
    "HistogramBin",
    "RocResult",
    "heatmap_rgb",
    "histogram",
    "render_heatmap",
    "roc_auc",
    "roc_from_scores",
    "write_histogram_csv",
    "write_ppm",
    "write_roc_csv",
    "SyntheticSpec",
    "sample_centers",
    "shifted_companion_spec",
    "synth_slide",
    "__version__",
]
