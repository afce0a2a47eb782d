"""Command-line behavior, end to end: files in, files out, stable bytes."""

import json
import os
import shutil

import numpy as np
import pytest
import yaml

from anchoradapt.cli import main
from anchoradapt.config import DEFAULT_CONFIG_YAML
from anchoradapt.domains import load

SMALL_CONFIG = {
    "seed": 0,
    "out_dir": "runs/exp",
    "data": {
        "categories": 4, "feature_dim": 4, "height": 4, "width": 4,
        "source_count": 3, "target_train_count": 3, "target_eval_count": 2,
        "noise_sigma": 0.25, "coherence_scale": 2, "rotation_degrees": 25.0,
        "shift_offset": 0.4, "target_noise_sigma": 0.25, "dir": "data",
    },
    "train": {
        "stages": 2, "iterations_per_stage": 5,
        "pretrain_iterations": 6, "warmup_iterations": 6,
    },
    "ablate": {"variants": ["warmup", "dis", "full"]},
}


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    with open("exp.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(SMALL_CONFIG, f)
    return tmp_path


def _generate():
    assert main(["generate", "--config", "exp.yaml"]) == 0


def test_print_config_round_trips(capsys):
    assert main(["print-config"]) == 0
    out = capsys.readouterr().out
    assert out == DEFAULT_CONFIG_YAML
    assert isinstance(yaml.safe_load(out), dict)


def test_generate_writes_three_loadable_files(workdir, capsys):
    _generate()
    out = capsys.readouterr().out
    for name in ("source.grids", "target-train.grids", "target-eval.grids"):
        path = workdir / "data" / name
        assert path.exists()
        assert name in out
    src = load(workdir / "data" / "source.grids")
    assert src.role == "source" and len(src) == 3


def test_generate_is_reproducible_and_seed_sensitive(workdir):
    _generate()
    first = (workdir / "data" / "source.grids").read_bytes()
    _generate()
    assert (workdir / "data" / "source.grids").read_bytes() == first
    assert main(["generate", "--config", "exp.yaml", "--seed", "7"]) == 0
    assert (workdir / "data" / "source.grids").read_bytes() != first


def test_run_requires_generated_data(workdir, capsys):
    assert main(["run", "--config", "exp.yaml"]) == 1
    err = capsys.readouterr().err
    assert "dataset file missing" in err


def test_run_produces_the_full_artifact_set(workdir, capsys):
    _generate()
    assert main(["run", "--config", "exp.yaml"]) == 0
    out = capsys.readouterr().out
    assert "final target mIoU" in out
    run_dir = workdir / "runs" / "exp"
    expected = ["pretrain.model", "warmup.model", "final.model",
                "metrics.jsonl", "final-report.json", "final-report.tsv"]
    for k in (1, 2):
        expected += [f"stage-{k}.model", f"stage-{k}.opt", f"stage-{k}.snapshot"]
    for name in expected:
        assert (run_dir / name).exists(), name
    report = json.loads((run_dir / "final-report.json").read_text())
    assert 0.0 <= report["miou"] <= 1.0
    assert report["pseudo_audit"] is not None
    assert set(report["pseudo_audit"]) == {"anchor", "prob"}
    # every metrics line is valid JSON with a phase tag
    for line in (run_dir / "metrics.jsonl").read_text().splitlines():
        assert "phase" in json.loads(line)


def test_run_twice_is_byte_identical(workdir):
    _generate()
    assert main(["run", "--config", "exp.yaml", "--out", "run-a"]) == 0
    assert main(["run", "--config", "exp.yaml", "--out", "run-b"]) == 0
    for name in ("metrics.jsonl", "final.model", "final-report.json",
                 "stage-2.snapshot"):
        assert (workdir / "run-a" / name).read_bytes() == \
            (workdir / "run-b" / name).read_bytes(), name


def test_stage_resume_matches_the_straight_run(workdir):
    _generate()
    assert main(["run", "--config", "exp.yaml", "--out", "full"]) == 0
    cut = workdir / "cut"
    cut.mkdir()
    for name in ("stage-1.model", "stage-1.opt"):
        shutil.copy(workdir / "full" / name, cut / name)
    assert main(["run", "--config", "exp.yaml", "--stage-resume",
                 str(cut)]) == 0
    assert (cut / "final.model").read_bytes() == \
        (workdir / "full" / "final.model").read_bytes()
    assert (cut / "metrics-resume.jsonl").exists()


def test_stage_resume_needs_a_checkpoint_pair(workdir, capsys):
    _generate()
    empty = workdir / "empty"
    empty.mkdir()
    assert main(["run", "--config", "exp.yaml", "--stage-resume",
                 str(empty)]) == 1
    assert "no stage checkpoint" in capsys.readouterr().err


def test_ablate_table_matches_its_reports(workdir, capsys):
    _generate()
    assert main(["ablate", "--config", "exp.yaml", "--out", "abl"]) == 0
    table = (workdir / "abl" / "ablation.tsv").read_text().strip().split("\n")
    assert table[0] == "variant\tmiou_x100\tgain_x100"
    names = [row.split("\t")[0] for row in table[1:]]
    assert names == ["warmup", "dis", "full"]
    warm = json.loads((workdir / "abl" / "warmup-report.json").read_text())
    for row in table[1:]:
        name, miou, gain = row.split("\t")
        vdir = workdir / "abl" / name.replace("+", "_plus_")
        rep = json.loads((vdir / "report.json").read_text())
        assert float(miou) == pytest.approx(100.0 * rep["miou"], abs=5e-5)
        assert float(gain) == pytest.approx(
            100.0 * (rep["miou"] - warm["miou"]), abs=5e-5)
    # the warmup variant is the shared base: zero gain by construction
    assert float(table[1].split("\t")[2]) == 0.0


def test_eval_single_checkpoint(workdir, capsys):
    _generate()
    assert main(["run", "--config", "exp.yaml", "--out", "run"]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", "run/final.model",
                 "--data", "data/target-eval.grids", "--out", "ev"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("category\t")
    assert (workdir / "ev" / "report.json").exists()
    assert (workdir / "ev" / "report.tsv").exists()


def test_eval_series_with_and_without_audit(workdir, capsys):
    _generate()
    assert main(["run", "--config", "exp.yaml", "--out", "run"]) == 0
    capsys.readouterr()

    assert main(["eval", "--run-dir", "run",
                 "--data", "data/target-eval.grids"]) == 0
    bare = (workdir / "run" / "series.tsv").read_text().strip().split("\n")
    assert bare[0].split("\t") == ["stage", "miou_x100", "anchor_active_frac",
                                   "prob_active_frac", "anchor_precision",
                                   "prob_precision"]
    assert [row.split("\t")[0] for row in bare[1:]] == ["0", "1", "2"]
    # without a labeled audit set the activation columns stay blank
    assert all(row.split("\t")[2] == "-" for row in bare[1:])

    assert main(["eval", "--run-dir", "run",
                 "--data", "data/target-eval.grids",
                 "--audit-data", "data/target-train.grids",
                 "--out", "series-audited"]) == 0
    audited = (workdir / "series-audited" / "series.tsv").read_text()
    rows = audited.strip().split("\n")[1:]
    assert rows[0].split("\t")[2] == "-"  # warm-up row has no snapshot
    for row in rows[1:]:
        frac = float(row.split("\t")[2])
        assert 0.0 <= frac <= 1.0


def test_eval_needs_exactly_one_mode(workdir, capsys):
    _generate()
    assert main(["eval", "--data", "data/target-eval.grids"]) == 1
    assert "exactly one" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", "x", "--run-dir", "y",
                 "--data", "data/target-eval.grids"]) == 1


def test_eval_rejects_mismatched_dimensions(workdir, capsys):
    _generate()
    assert main(["run", "--config", "exp.yaml", "--out", "run"]) == 0
    capsys.readouterr()
    wide = dict(SMALL_CONFIG)
    wide["data"] = dict(SMALL_CONFIG["data"], feature_dim=6, dir="wide-data")
    with open("wide.yaml", "w", encoding="utf-8") as f:
        yaml.safe_dump(wide, f)
    assert main(["generate", "--config", "wide.yaml"]) == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", "run/final.model",
                 "--data", "wide-data/target-eval.grids"]) == 1
    assert "features" in capsys.readouterr().err


def test_bad_config_fails_loudly(workdir, capsys):
    with open("broken.yaml", "w", encoding="utf-8") as f:
        f.write("data: {categories: 4}\n")  # no seed
    assert main(["generate", "--config", "broken.yaml"]) == 1
    assert "seed" in capsys.readouterr().err
