"""Command-line pipeline: extract/ingest descriptors, synthesize, train, score, evaluate.

Diagnostics go to stderr; data goes to files only. Exit status is 0 on
success, 1 on validation/usage errors, 2 on I/O errors. Every output gets
the effective configuration echoed into a provenance block (model JSON and
PPM carry it inline, CSVs get a ``<name>.provenance.json`` sidecar); the
thread count is excluded so it can never affect output bytes.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass

import numpy as np

from . import evaluation, evidence, features, learner, report, scoring, synthetic
from .errors import CicmapError, InputFormatError

PROG = "cicmap"

TABLE_DEFAULTS = {
    "match_threshold": evidence.DEFAULT_MATCH_THRESHOLD,
    "min_occurrences": evidence.DEFAULT_MIN_OCCURRENCES,
    "acceptance_ratio": evidence.DEFAULT_ACCEPTANCE_RATIO,
    "patch_skip_threshold": evidence.DEFAULT_PATCH_SKIP_THRESHOLD,
    "patch_size_px": features.DEFAULT_PATCH_SIZE,
}

# Every key any subcommand understands; a shared config file may carry all of
# them and each subcommand picks the ones it uses.
ALL_CONFIG_KEYS = frozenset(TABLE_DEFAULTS) | {
    "budget_per_class", "per_round_k", "schedule", "log_base", "threads",
    "stride_px", "cell_px", "bin_width", "heatmap_cell_px",
}


class _Parser(argparse.ArgumentParser):
    """argparse variant that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


@dataclass
class RunConfig:
    """Effective run options: built-in defaults, overlaid by the config file, then flags."""

    values: dict

    @classmethod
    def resolve(cls, args: argparse.Namespace, defaults: dict) -> "RunConfig":
        merged = dict(defaults)
        config_path = getattr(args, "config", None)
        if config_path:
            with open(config_path, "r", encoding="utf-8") as fh:
                try:
                    doc = json.load(fh)
                except json.JSONDecodeError as exc:
                    raise InputFormatError(f"config file: {exc}") from None
            if not isinstance(doc, dict):
                raise InputFormatError("config file must hold a JSON object")
            unknown = set(doc) - ALL_CONFIG_KEYS
            if unknown:
                raise InputFormatError(f"unknown config keys: {sorted(unknown)}")
            merged.update({k: v for k, v in doc.items() if k in defaults})
        for key in defaults:
            flag_val = getattr(args, key, None)
            if flag_val is not None:
                merged[key] = flag_val
        return cls(values=merged)

    def __getitem__(self, key):
        return self.values[key]

    def echo(self) -> dict:
        """Provenance view of the config; thread count never reaches output bytes."""
        return {k: v for k, v in sorted(self.values.items()) if k != "threads"}


def _match_params(cfg: RunConfig) -> evidence.MatchParams:
    return evidence.MatchParams(
        match_threshold=float(cfg["match_threshold"]),
        min_occurrences=int(cfg["min_occurrences"]),
        acceptance_ratio=float(cfg["acceptance_ratio"]),
    )


def _write_sidecar(out_path: str, command: str, inputs: dict, cfg: RunConfig) -> None:
    doc = {
        "tool": PROG,
        "command": command,
        "inputs": inputs,
        "config": cfg.echo(),
    }
    with open(f"{out_path}.provenance.json", "w", encoding="utf-8", newline="\n") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _ppm_comments(command: str, cfg: RunConfig) -> list[str]:
    parts = [f"{k}={v}" for k, v in cfg.echo().items()]
    return [f"{PROG} {command}", " ".join(parts)]


def _info(msg: str) -> None:
    print(msg, file=sys.stderr)


# ---------------------------------------------------------------- subcommands


def _cmd_extract(args) -> int:
    defaults = {"stride_px": 8, "cell_px": 4, "patch_size_px": features.DEFAULT_PATCH_SIZE}
    cfg = RunConfig.resolve(args, defaults)
    from PIL import Image, UnidentifiedImageError

    try:
        with Image.open(args.image) as img:
            gray = np.asarray(img.convert("L"), dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise InputFormatError(f"unsupported raster: {exc}") from None
    config = features.ExtractionConfig(
        stride_px=int(cfg["stride_px"]),
        cell_px=int(cfg["cell_px"]),
        patch_size_px=int(cfg["patch_size_px"]),
    )
    slide = features.extract_descriptors(gray, config, slide_id=args.slide_id)
    features.write_descriptors(slide, args.out)
    _write_sidecar(args.out, "extract", {"image": args.image}, cfg)
    _info(f"extracted {len(slide)} descriptors from {gray.shape[1]}x{gray.shape[0]} raster")
    return 0


def _cmd_ingest(args) -> int:
    cfg = RunConfig.resolve(args, {"patch_size_px": features.DEFAULT_PATCH_SIZE})
    slide = features.ingest_descriptors(
        args.input, patch_size_px=int(cfg["patch_size_px"]), slide_id=args.slide_id
    )
    features.write_descriptors(slide, args.out)
    _write_sidecar(args.out, "ingest", {"input": args.input}, cfg)
    _info(
        f"ingested {len(slide)} records into a {slide.grid_cols}x{slide.grid_rows} grid "
        f"({len(slide.bucket_bounds)} occupied patches)"
    )
    return 0


def _cmd_synth(args) -> int:
    spec = synthetic.SyntheticSpec.load(args.spec)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.slide_id is not None:
        overrides["slide_id"] = args.slide_id
    if overrides:
        from dataclasses import replace

        spec = replace(spec, **overrides)
    slide, labels = synthetic.synth_slide(spec)
    features.write_descriptors(slide, args.out_slide)
    learner.save_labels(labels, args.out_labels)
    cfg = RunConfig(values=spec.to_dict())
    _write_sidecar(args.out_slide, "synth", {"spec": args.spec}, cfg)
    _write_sidecar(args.out_labels, "synth", {"spec": args.spec}, cfg)
    _info(
        f"synthesized slide {slide.slide_id!r}: {len(slide)} descriptors, "
        f"{spec.cols}x{spec.rows} patches"
    )
    return 0


def _train_defaults() -> dict:
    d = dict(TABLE_DEFAULTS)
    d.update(
        {
            "budget_per_class": learner.DEFAULT_BUDGET_PER_CLASS,
            "per_round_k": learner.DEFAULT_PER_ROUND_K,
            "schedule": ",".join(learner.default_schedule()),
            "log_base": "e",
            "threads": 1,
        }
    )
    return d


def _cmd_train(args) -> int:
    cfg = RunConfig.resolve(args, _train_defaults())
    slide = features.ingest_descriptors(args.slide, patch_size_px=int(cfg["patch_size_px"]))
    labels = learner.load_labels(args.labels)
    schedule = learner.parse_schedule(cfg["schedule"])
    model, state = learner.train(
        slide,
        labels,
        _match_params(cfg),
        schedule=schedule,
        budget_per_class=int(cfg["budget_per_class"]),
        per_round_k=int(cfg["per_round_k"]),
        patch_skip_threshold=int(cfg["patch_skip_threshold"]),
        log_base=str(cfg["log_base"]),
        threads=int(cfg["threads"]),
    )
    model.provenance["command"] = "train"
    model.provenance["inputs"] = {"slide": args.slide, "labels": args.labels}
    model.provenance["config"] = cfg.echo()
    model.provenance["rounds"] = state.round_criteria
    model.save(args.out)
    _info(
        f"trained on {len(state.selected_p)}+{len(state.selected_n)} patches over "
        f"{len(state.round_criteria)} rounds: n_p={model.n_p} n_n={model.n_n} "
        f"alpha={model.alpha:.6g}"
    )
    return 0


def _cmd_score(args) -> int:
    defaults = {"threads": 1, "heatmap_cell_px": 4}
    cfg = RunConfig.resolve(args, defaults)
    model = evidence.EvidenceModel.load(args.model)
    slide = features.ingest_descriptors(args.slide, patch_size_px=model.patch_size_px)
    score_map = scoring.score_slide(model, slide, threads=int(cfg["threads"]))
    scoring.write_score_map(score_map, args.out)
    inputs = {"model": args.model, "slide": args.slide}
    _write_sidecar(args.out, "score", inputs, cfg)
    if args.heatmap:
        evaluation.render_heatmap(
            score_map,
            args.heatmap,
            cell_px=int(cfg["heatmap_cell_px"]),
            comments=_ppm_comments("score", cfg),
        )
    if args.heatmap_png:
        report.save_heatmap_figure(score_map, args.heatmap_png, title=slide.slide_id)
    scored = int(score_map.scored_mask().sum())
    _info(
        f"scored {scored}/{score_map.cols * score_map.rows} patches "
        f"({score_map.cols}x{score_map.rows} grid)"
    )
    return 0


def _cmd_eval(args) -> int:
    cfg = RunConfig.resolve(args, {"bin_width": None, "heatmap_cell_px": 4})
    score_map = scoring.read_score_map(args.scores)
    labels = learner.load_labels(args.labels)
    inputs = {"scores": args.scores, "labels": args.labels}

    if args.report_dir:
        # One-stop report: delimited outputs plus their figures, side by side.
        os.makedirs(args.report_dir, exist_ok=True)
        join = lambda name: os.path.join(args.report_dir, name)
        args.hist_csv = args.hist_csv or join("histogram.csv")
        args.roc_csv = args.roc_csv or join("roc.csv")
        args.hist_png = args.hist_png or join("histogram.png")
        args.roc_png = args.roc_png or join("roc.png")
        args.heatmap = args.heatmap or join("heatmap.ppm")
        args.heatmap_png = args.heatmap_png or join("heatmap.png")

    bin_width = cfg["bin_width"]
    rows = evaluation.histogram(
        score_map, labels, None if bin_width is None else float(bin_width)
    )
    if args.hist_csv:
        evaluation.write_histogram_csv(rows, args.hist_csv)
        _write_sidecar(args.hist_csv, "eval", inputs, cfg)
    if args.hist_png:
        report.save_histogram_figure(rows, args.hist_png)

    # A histogram-only run must work even when the ROC would be undefined
    # (single-class labels); otherwise the AUC is the headline number.
    hist_only = (args.hist_csv or args.hist_png) and not (args.roc_csv or args.roc_png)
    result = None if hist_only else evaluation.roc_auc(score_map, labels)
    if args.roc_csv:
        evaluation.write_roc_csv(result, args.roc_csv)
        _write_sidecar(args.roc_csv, "eval", inputs, cfg)
    if args.roc_png:
        report.save_roc_figure(result, args.roc_png)
    if args.heatmap:
        evaluation.render_heatmap(
            score_map,
            args.heatmap,
            cell_px=int(cfg["heatmap_cell_px"]),
            comments=_ppm_comments("eval", cfg),
        )
    if args.heatmap_png:
        report.save_heatmap_figure(score_map, args.heatmap_png)
    if result is not None:
        _info(f"auc={result.auc:.6f} over {len(rows)} histogram bins")
    else:
        _info(f"{len(rows)} histogram bins")
    return 0


# ---------------------------------------------------------------- wiring


def build_parser() -> _Parser:
    parser = _Parser(prog=PROG, description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add_config(p):
        p.add_argument("--config", help="JSON config file; explicit flags win")

    p = sub.add_parser("extract", help="extract dense descriptors from an image file")
    add_config(p)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True, help="descriptor CSV to write")
    p.add_argument("--slide-id", default="slide")
    p.add_argument("--stride-px", type=int, dest="stride_px")
    p.add_argument("--cell-px", type=int, dest="cell_px")
    p.add_argument("--patch-size-px", type=int, dest="patch_size_px")
    p.set_defaults(func=_cmd_extract)

    p = sub.add_parser("ingest", help="validate and canonicalize a descriptor CSV")
    add_config(p)
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slide-id", default=None)
    p.add_argument("--patch-size-px", type=int, dest="patch_size_px")
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("synth", help="generate a synthetic slide and its labels")
    p.add_argument("--spec", required=True, help="synthetic spec JSON")
    p.add_argument("--out-slide", required=True)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--slide-id", default=None)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("train", help="train an evidence model from a slide and labels")
    add_config(p)
    p.add_argument("--slide", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--out", required=True, help="model JSON to write")
    p.add_argument("--match-threshold", type=float, dest="match_threshold")
    p.add_argument("--min-occurrences", type=int, dest="min_occurrences")
    p.add_argument("--acceptance-ratio", type=float, dest="acceptance_ratio")
    p.add_argument("--patch-skip-threshold", type=int, dest="patch_skip_threshold")
    p.add_argument("--patch-size-px", type=int, dest="patch_size_px")
    p.add_argument("--budget-per-class", type=int, dest="budget_per_class")
    p.add_argument("--per-round-k", type=int, dest="per_round_k")
    p.add_argument("--schedule", dest="schedule",
                   help="comma-separated selection criteria consumed one per round")
    p.add_argument("--log-base", choices=("e", "2"), dest="log_base")
    p.add_argument("--threads", type=int, dest="threads")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("score", help="score a slide with a trained model")
    add_config(p)
    p.add_argument("--model", required=True)
    p.add_argument("--slide", required=True)
    p.add_argument("--out", required=True, help="score CSV to write")
    p.add_argument("--heatmap", default=None, help="PPM heatmap to write")
    p.add_argument("--heatmap-png", default=None, help="matplotlib heatmap figure")
    p.add_argument("--heatmap-cell-px", type=int, dest="heatmap_cell_px")
    p.add_argument("--threads", type=int, dest="threads")
    p.set_defaults(func=_cmd_score)

    p = sub.add_parser("eval", help="histograms, ROC/AUC and figures from a score map")
    add_config(p)
    p.add_argument("--scores", required=True, help="score CSV from the score command")
    p.add_argument("--labels", required=True)
    p.add_argument("--hist-csv", default=None)
    p.add_argument("--roc-csv", default=None)
    p.add_argument("--hist-png", default=None)
    p.add_argument("--roc-png", default=None)
    p.add_argument("--heatmap", default=None, help="PPM heatmap to write")
    p.add_argument("--heatmap-png", default=None)
    p.add_argument("--heatmap-cell-px", type=int, dest="heatmap_cell_px")
    p.add_argument("--bin-width", type=float, dest="bin_width")
    p.add_argument("--report-dir", default=None,
                   help="write the full report (CSVs plus figures) into this directory")
    p.set_defaults(func=_cmd_eval)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (CicmapError, ValueError) as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"{PROG}: i/o error: {exc}", file=sys.stderr)
        return 2


def entrypoint() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entrypoint()
