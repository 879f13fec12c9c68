import json
import shutil
import subprocess

import numpy as np
import pytest
from PIL import Image

from cicmap.cli import main


SPEC = {
    "n_clusters_p": 2,
    "n_clusters_n": 2,
    "cluster_separation": 500.0,
    "planted_rho": [0.9, 0.9, 0.1, 0.1],
    "cols": 6,
    "rows": 4,
    "seed": 31,
    "slide_id": "demo",
    "descriptors_per_patch": ["uniform", 40, 80],
}


@pytest.fixture
def workdir(tmp_path):
    (tmp_path / "spec.json").write_text(json.dumps(SPEC))
    return tmp_path


def _synth(d):
    assert main([
        "synth", "--spec", str(d / "spec.json"),
        "--out-slide", str(d / "s.csv"), "--out-labels", str(d / "l.csv"),
    ]) == 0


def _train(d, extra=()):
    return main([
        "train", "--slide", str(d / "s.csv"), "--labels", str(d / "l.csv"),
        "--out", str(d / "model.json"),
        "--budget-per-class", "4", "--patch-skip-threshold", "10",
        *extra,
    ])


class TestPipeline:
    def test_full_happy_path(self, workdir, capsys):
        d = workdir
        _synth(d)
        assert _train(d) == 0
        assert main([
            "score", "--model", str(d / "model.json"), "--slide", str(d / "s.csv"),
            "--out", str(d / "scores.csv"), "--heatmap", str(d / "h.ppm"),
            "--heatmap-png", str(d / "h.png"),
        ]) == 0
        assert main([
            "eval", "--scores", str(d / "scores.csv"), "--labels", str(d / "l.csv"),
            "--hist-csv", str(d / "hist.csv"), "--roc-csv", str(d / "roc.csv"),
            "--hist-png", str(d / "hist.png"), "--roc-png", str(d / "roc.png"),
        ]) == 0
        for name in ("model.json", "scores.csv", "h.ppm", "h.png",
                     "hist.csv", "roc.csv", "hist.png", "roc.png"):
            assert (d / name).exists(), name
        err = capsys.readouterr().err
        assert "auc=1.0" in err
        assert (d / "roc.csv").read_text().splitlines()[-1].startswith("auc,")

    def test_report_dir_bundles_csvs_and_figures(self, workdir):
        d = workdir
        _synth(d)
        assert _train(d) == 0
        assert main([
            "score", "--model", str(d / "model.json"), "--slide", str(d / "s.csv"),
            "--out", str(d / "scores.csv"),
        ]) == 0
        assert main([
            "eval", "--scores", str(d / "scores.csv"), "--labels", str(d / "l.csv"),
            "--report-dir", str(d / "report"),
        ]) == 0
        for name in ("histogram.csv", "roc.csv", "histogram.png", "roc.png",
                     "heatmap.ppm", "heatmap.png"):
            assert (d / "report" / name).exists(), name

    def test_histogram_only_eval_tolerates_single_class(self, workdir):
        d = workdir
        _synth(d)
        assert _train(d) == 0
        assert main([
            "score", "--model", str(d / "model.json"), "--slide", str(d / "s.csv"),
            "--out", str(d / "scores.csv"),
        ]) == 0
        lines = (d / "l.csv").read_text().splitlines()
        cancer_only = [lines[0]] + [l for l in lines[1:] if l.endswith("cancer")]
        (d / "lc.csv").write_text("\n".join(cancer_only) + "\n")
        assert main([
            "eval", "--scores", str(d / "scores.csv"), "--labels", str(d / "lc.csv"),
            "--hist-csv", str(d / "h.csv"),
        ]) == 0
        assert main([
            "eval", "--scores", str(d / "scores.csv"), "--labels", str(d / "lc.csv"),
            "--roc-csv", str(d / "r.csv"),
        ]) == 1

    def test_ingest_canonicalizes(self, workdir):
        d = workdir
        _synth(d)
        assert main([
            "ingest", "--input", str(d / "s.csv"), "--out", str(d / "canon.csv"),
        ]) == 0
        assert (d / "canon.csv").read_bytes() == (d / "s.csv").read_bytes()

    @pytest.mark.skipif(shutil.which("cicmap") is None, reason="console script not installed")
    def test_console_script_runs_as_subprocess(self, workdir):
        d = workdir
        proc = subprocess.run(
            ["cicmap", "synth", "--spec", str(d / "spec.json"),
             "--out-slide", str(d / "s.csv"), "--out-labels", str(d / "l.csv")],
            capture_output=True, text=True,
        )
        assert proc.returncode == 0, proc.stderr
        assert proc.stdout == ""
        assert "synthesized" in proc.stderr
        proc = subprocess.run(["cicmap", "train", "--nope"], capture_output=True, text=True)
        assert proc.returncode == 1
        assert "usage" in proc.stderr

    def test_extract_writes_descriptor_csv(self, tmp_path, rng):
        img = rng.integers(0, 256, (48, 48)).astype(np.uint8)
        Image.fromarray(img, mode="L").save(tmp_path / "img.png")
        assert main([
            "extract", "--image", str(tmp_path / "img.png"),
            "--out", str(tmp_path / "d.csv"), "--stride-px", "8",
        ]) == 0
        header = (tmp_path / "d.csv").read_text().splitlines()[0]
        assert header.startswith("slide_id,x,y,d0,") and header.endswith("d127")

    def test_extract_converts_color_images_by_luminance(self, tmp_path, rng):
        rgb = rng.integers(0, 256, (40, 40, 3)).astype(np.uint8)
        Image.fromarray(rgb, mode="RGB").save(tmp_path / "c.png")
        assert main([
            "extract", "--image", str(tmp_path / "c.png"),
            "--out", str(tmp_path / "d.csv"), "--stride-px", "16",
        ]) == 0
        assert len((tmp_path / "d.csv").read_text().splitlines()) > 1


class TestDeterminism:
    def test_thread_count_never_changes_output_bytes(self, tmp_path, monkeypatch):
        # Identical relative paths in separate working directories, so the
        # provenance echoes match and only the thread count differs.
        outputs = {}
        for threads in ("1", "3"):
            d = tmp_path / f"t{threads}"
            d.mkdir()
            monkeypatch.chdir(d)
            (d / "spec.json").write_text(json.dumps(SPEC))
            assert main([
                "synth", "--spec", "spec.json",
                "--out-slide", "s.csv", "--out-labels", "l.csv",
            ]) == 0
            assert main([
                "train", "--slide", "s.csv", "--labels", "l.csv", "--out", "model.json",
                "--budget-per-class", "4", "--patch-skip-threshold", "10",
                "--threads", threads,
            ]) == 0
            assert main([
                "score", "--model", "model.json", "--slide", "s.csv",
                "--out", "scores.csv", "--heatmap", "h.ppm",
                "--threads", threads,
            ]) == 0
            outputs[threads] = {
                name: (d / name).read_bytes()
                for name in ("s.csv", "model.json", "scores.csv", "h.ppm")
            }
        assert outputs["1"] == outputs["3"]


class TestExitCodes:
    def test_single_class_labels_exit_one(self, workdir, capsys):
        d = workdir
        _synth(d)
        labels = [l for l in (d / "l.csv").read_text().splitlines() if not l.endswith("normal")]
        (d / "l.csv").write_text("\n".join(labels) + "\n")
        assert _train(d) == 1
        assert "normal" in capsys.readouterr().err

    def test_unknown_flag_exits_one_with_usage(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["score", "--bogus"])
        assert exc.value.code == 1
        assert "usage" in capsys.readouterr().err

    def test_unknown_subcommand_exits_one(self, capsys):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_missing_input_file_exits_two(self, tmp_path, capsys):
        code = main([
            "ingest", "--input", str(tmp_path / "nope.csv"), "--out", str(tmp_path / "o.csv"),
        ])
        assert code == 2

    def test_invalid_csv_exits_one(self, tmp_path):
        bad = tmp_path / "bad.csv"
        bad.write_text("slide_id,x,y\n")
        assert main(["ingest", "--input", str(bad), "--out", str(tmp_path / "o.csv")]) == 1

    def test_diagnostics_go_to_stderr_only(self, workdir, capsys):
        _synth(workdir)
        out, err = capsys.readouterr()
        assert out == ""
        assert "synthesized" in err


class TestConfig:
    def test_config_file_applies_and_flags_win(self, workdir):
        d = workdir
        _synth(d)
        (d / "cfg.json").write_text(json.dumps({
            "budget_per_class": 2, "patch_skip_threshold": 10, "min_occurrences": 10,
        }))
        assert main([
            "train", "--slide", str(d / "s.csv"), "--labels", str(d / "l.csv"),
            "--out", str(d / "m.json"), "--config", str(d / "cfg.json"),
            "--budget-per-class", "3",
        ]) == 0
        doc = json.loads((d / "m.json").read_text())
        assert len(doc["provenance"]["positive_patches"]) == 3  # flag beat config
        assert doc["provenance"]["config"]["patch_skip_threshold"] == 10

    def test_shared_config_file_works_across_subcommands(self, workdir):
        d = workdir
        _synth(d)
        (d / "cfg.json").write_text(json.dumps({
            "budget_per_class": 4, "patch_skip_threshold": 10,
            "bin_width": 0.5, "schedule": "high_density,worst*2",
        }))
        assert main([
            "train", "--slide", str(d / "s.csv"), "--labels", str(d / "l.csv"),
            "--out", str(d / "m.json"), "--config", str(d / "cfg.json"),
        ]) == 0
        assert main([
            "score", "--model", str(d / "m.json"), "--slide", str(d / "s.csv"),
            "--out", str(d / "sc.csv"), "--config", str(d / "cfg.json"),
        ]) == 0
        assert main([
            "eval", "--scores", str(d / "sc.csv"), "--labels", str(d / "l.csv"),
            "--roc-csv", str(d / "r.csv"), "--config", str(d / "cfg.json"),
        ]) == 0
        rounds = json.loads((d / "m.json").read_text())["provenance"]["rounds"]
        assert rounds == ["high_density", "worst"]  # budget 4 with k 2 stops after 2

    def test_unknown_config_key_rejected(self, workdir):
        d = workdir
        (d / "cfg.json").write_text(json.dumps({"bogus_key": 1}))
        _synth(d)
        assert _train(d, extra=["--config", str(d / "cfg.json")]) == 1

    def test_log_base_recorded_in_model(self, workdir):
        d = workdir
        _synth(d)
        assert _train(d, extra=["--log-base", "2"]) == 0
        doc = json.loads((d / "model.json").read_text())
        assert doc["log_base"] == "2"

    def test_table_defaults_in_provenance(self, workdir):
        d = workdir
        _synth(d)
        assert main([
            "train", "--slide", str(d / "s.csv"), "--labels", str(d / "l.csv"),
            "--out", str(d / "m.json"),
            "--budget-per-class", "4", "--patch-skip-threshold", "10",
            "--min-occurrences", "10",
        ]) == 0
        cfg = json.loads((d / "m.json").read_text())["provenance"]["config"]
        assert cfg["match_threshold"] == 325.0
        assert cfg["acceptance_ratio"] == 2.0
        assert cfg["min_occurrences"] == 10
        assert cfg["patch_size_px"] == 512
        assert "threads" not in cfg

    def test_sidecar_provenance_for_csv_outputs(self, workdir):
        d = workdir
        _synth(d)
        assert _train(d) == 0
        assert main([
            "score", "--model", str(d / "model.json"), "--slide", str(d / "s.csv"),
            "--out", str(d / "scores.csv"),
        ]) == 0
        sidecar = json.loads((d / "scores.csv.provenance.json").read_text())
        assert sidecar["command"] == "score"
        assert "threads" not in sidecar["config"]
