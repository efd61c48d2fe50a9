import csv
import hashlib
import json

import numpy as np
import pytest
import torch

import dynamind.harness as harness
from dynamind.cli import main
from dynamind.config import region_names
from dynamind.errors import ConfigError, DivergenceError, MissingArtifactError, ValidationError
from dynamind.harness import (Pipeline, RunManifest, ablation_grid, cmd_ablate, cmd_evaluate, cmd_train,
                              config_diff, cosine_lr, derive_seed, resolve_out_root, run_dir_for)
from dynamind.report import cmd_report

from tiny import tiny_config, tiny_yaml


def _digests(run_dir):
    phases = ("ae", "rsm", "prior", "tda", "dgvr")
    return {p: hashlib.sha256((run_dir / "checkpoints" / f"{p}.ckpt").read_bytes()).hexdigest() for p in phases}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("runs")
    manifest = cmd_train(tiny_config(), root)
    cmd_evaluate(manifest)
    return manifest


# ---- helpers

def test_derive_seed_is_stable_and_distinct():
    assert derive_seed(0, "ae") == derive_seed(0, "ae")
    assert len({derive_seed(0, p) for p in ("ae", "rsm", "prior", "tda", "dgvr")}) == 5
    assert 0 <= derive_seed(1, "x") < 2 ** 63


def test_cosine_schedule():
    assert cosine_lr(1.0, 0, 10) == 1.0
    assert cosine_lr(1.0, 5, 10) == pytest.approx(0.5)
    assert cosine_lr(1.0, 10, 10) == pytest.approx(0.0)


def test_out_root_precedence(monkeypatch):
    cfg = tiny_config(out_dir="from-config")
    monkeypatch.delenv("DYNAMIND_OUT", raising=False)
    assert str(resolve_out_root(cfg)) == "from-config"
    monkeypatch.setenv("DYNAMIND_OUT", "from-env")
    assert str(resolve_out_root(cfg)) == "from-env"
    assert str(resolve_out_root(cfg, "from-cli")) == "from-cli"


def test_run_dir_name():
    cfg = tiny_config(seed=7)
    assert run_dir_for(cfg, "r").name == f"dynamind-s7-{cfg.fingerprint()}"


# ---- training

def test_train_writes_manifest_and_logs(trained):
    run_dir = harness.Path(trained.run_dir)
    assert trained.status == "evaluated"
    assert set(trained.checkpoints) == {"ae", "rsm", "prior", "tda", "dgvr"}
    assert not RunManifest.load(run_dir).missing_artifacts()
    rows = list(csv.DictReader((run_dir / "logs" / "tda_losses.csv").read_text().splitlines()))
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert set(rows[0]) == {"epoch", "l_hv", "l_struct", "l_total"}


def test_training_is_reproducible(trained, tmp_path):
    again = cmd_train(tiny_config(), tmp_path)
    assert _digests(harness.Path(again.run_dir)) == _digests(harness.Path(trained.run_dir))


def test_resume_matches_uninterrupted(trained, tmp_path):
    class Stop(Exception):
        pass

    def hook(phase, epoch):
        if phase == "tda" and epoch == 1:
            raise Stop

    with pytest.raises(Stop):
        cmd_train(tiny_config(), tmp_path, hook=hook)
    resumed = cmd_train(tiny_config(), tmp_path)
    assert _digests(harness.Path(resumed.run_dir)) == _digests(harness.Path(trained.run_dir))


def test_divergence_keeps_last_good_checkpoint(tmp_path, monkeypatch):
    real = harness.dgvr_loss
    calls = {"n": 0}

    def flaky(*args, **kwargs):
        calls["n"] += 1
        loss = real(*args, **kwargs)
        return loss * float("nan") if calls["n"] > 1 else loss

    monkeypatch.setattr(harness, "dgvr_loss", flaky)
    cfg = tiny_config(**{"dgvr.batch_size": 64})  # one batch per epoch
    with pytest.raises(DivergenceError) as err:
        cmd_train(cfg, tmp_path)
    assert (err.value.phase, err.value.epoch) == ("dgvr", 2)
    _, meta = harness.load_checkpoint(run_dir_for(cfg, tmp_path) / "checkpoints" / "dgvr.ckpt")
    assert meta["epoch"] == 1


def test_load_enforces_phase_order(trained):
    pipe = Pipeline(tiny_config(), trained.run_dir)
    pipe._current = "tda"
    with pytest.raises(ConfigError):
        pipe.load("dgvr")
    pipe._current = None
    assert pipe.load("dgvr") is pipe.load("dgvr")


def test_foreign_checkpoints_are_rejected(trained, tmp_path):
    other = Pipeline(tiny_config(seed=1), trained.run_dir)
    with pytest.raises(ConfigError):
        other.load("ae")


def test_optional_phases(tmp_path):
    cfg = tiny_config(**{"tda.use_inversion": True, "rsm.joint_prior": True})
    manifest = cmd_train(cfg, tmp_path)
    assert list(manifest.checkpoints) == ["ae", "rsm", "inversion", "tda", "dgvr"]
    pipe = Pipeline(cfg, manifest.run_dir)
    assert pipe.load("prior") is pipe.load("rsm")["prior"]
    assert len(pipe.generate(pipe.corpus.test[:2])) == 2


def test_untrained_pipeline_runs(tmp_path):
    cfg = tiny_config(**{f"{p}.epochs": 0 for p in ("ae", "rsm", "prior", "tda", "dgvr")})
    manifest = cmd_train(cfg, tmp_path)
    clips = Pipeline(cfg, manifest.run_dir).generate(Pipeline(cfg, manifest.run_dir).corpus.test[:1])
    assert clips[0].frames.shape == (3, 16, 16, 3)


# ---- ablation switches

def test_dropped_region_never_reaches_the_mapper(tmp_path):
    cfg = tiny_config(**{"ablation.drop_region": region_names(tiny_config())[0]})
    pipe = Pipeline(cfg, tmp_path)
    rsm = pipe.new_model("rsm")["rsm"].eval()
    blocks = harness._blocks(pipe.corpus.trials[:4], pipe.corpus.partition)
    noisy = [b + 10 * torch.randn_like(b) if i == 0 else b for i, b in enumerate(blocks)]
    with torch.no_grad():
        a, b = rsm(blocks), rsm(noisy)
    for x, y in zip(a, b):
        assert torch.equal(x, y)


def test_without_consistency_logs_zero_structure(tmp_path):
    manifest = cmd_train(tiny_config(**{"ablation.drop_consistency": True}), tmp_path)
    rows = list(csv.DictReader((harness.Path(manifest.run_dir) / "logs" / "tda_losses.csv").read_text().splitlines()))
    assert all(float(r["l_struct"]) == 0.0 for r in rows)
    assert all(float(r["l_total"]) == float(r["l_hv"]) for r in rows)


def test_ablation_grid_changes_one_switch():
    base = tiny_config()
    grid = ablation_grid(base)
    assert len(grid) == 10 and grid[0] == ("Full", {})
    for label, diff in grid[1:]:
        changed = config_diff(base, base.replace(**diff, name=label))
        assert len(changed) == 1, label


def test_ablation_table_records_failures(trained, tmp_path):
    def runner(cfg, out_root):
        if cfg.ablation.drop_feature == "text":
            raise DivergenceError("rsm", 3, "nan")
        return harness.Path(trained.run_dir)

    paths = cmd_ablate(tiny_config(), tmp_path, class_count=4, runner=runner)
    rows = list(csv.DictReader(paths["csv"].read_text().splitlines()))
    assert [r["run"] for r in rows][:1] == ["Full"] and len(rows) == 10
    failed = [r for r in rows if r["SSIM"].startswith("FAILED")]
    assert [r["run"] for r in failed] == ["w/o Text"]
    assert next(r for r in rows if r["run"] == "w/o Consistency")["40-c top-1"] == "-"
    runs = json.loads(paths["runs"].read_text())
    assert sum(r["status"] == "failed" for r in runs) == 1
    assert "| Method |" in paths["markdown"].read_text()


# ---- evaluation and reports

def test_evaluate_outputs(trained):
    run_dir = harness.Path(trained.run_dir)
    rows = list(csv.DictReader((run_dir / "eval" / "report.csv").read_text().splitlines()))
    assert len(rows) == 12 and {r["class_count"] for r in rows} == {"2", "4"}
    sidecars = sorted((run_dir / "eval" / "clips").glob("*.json"))
    assert sidecars and json.loads(sidecars[0].read_text())["seed"] == 0
    assert len(list((run_dir / "eval" / "grids").glob("*.png"))) == 1
    tasks = [r["task"] for r in csv.DictReader((run_dir / "eval" / "report_classification.csv").read_text().splitlines())]
    assert "40c_top1" in tasks and "9c_top1" in tasks


def test_evaluate_is_deterministic(trained):
    run_dir = harness.Path(trained.run_dir)
    before = (run_dir / "eval" / "report.csv").read_bytes()
    cmd_evaluate(trained, stem="again", write_clips=False)
    assert (run_dir / "eval" / "again.csv").read_bytes() == before


def test_evaluate_argument_errors(trained, tmp_path):
    with pytest.raises(ValidationError):
        cmd_evaluate(trained, [])
    with pytest.raises(ValidationError):
        cmd_evaluate(trained, [5])
    with pytest.raises(MissingArtifactError):
        cmd_evaluate(tmp_path)
    cfg = tiny_config(seed=3)
    manifest = RunManifest(run_dir_for(cfg, tmp_path).name, str(run_dir_for(cfg, tmp_path)), cfg.to_flat())
    manifest.save()
    with pytest.raises(MissingArtifactError):
        cmd_evaluate(manifest)


def test_report_is_idempotent(trained, tmp_path):
    a = cmd_report([trained.run_dir], tmp_path / "a").read_text()
    b = cmd_report([trained.run_dir], tmp_path / "a").read_text()
    assert a == b and "Reconstruction metrics" in a and "![losses]" in a


def test_report_compares_runs(trained, tmp_path):
    other = cmd_train(tiny_config(**{"dgvr.alpha": 0.0}), tmp_path)
    cmd_evaluate(other, write_clips=False)
    text = cmd_report([trained.run_dir, other.run_dir], tmp_path / "cmp").read_text()
    assert "Differences against the first run" in text
    assert "delta" in text
    with pytest.raises(ValidationError):
        cmd_report([], tmp_path)
    with pytest.raises(MissingArtifactError):
        cmd_report([tmp_path / "nowhere"], tmp_path)


# ---- command line

def test_cli_round_trip(tmp_path):
    config = tiny_yaml(tmp_path / "tiny.yaml")
    out = str(tmp_path / "out")
    assert main(["train", "--config", str(config), "--out", out]) == 0
    assert main(["evaluate", "--config", str(config), "--out", out, "--class-counts", "4"]) == 0
    assert main(["report", "--config", str(config), "--out", out]) == 0
    assert list((tmp_path / "out" / "reports").glob("*/summary.md"))


def test_cli_exit_codes(tmp_path, monkeypatch):
    bad = tmp_path / "bad.yaml"
    bad.write_text("no.such.key: 1\n")
    assert main(["train", "--config", str(bad)]) == 2
    config = tiny_yaml(tmp_path / "tiny.yaml")
    assert main(["evaluate", "--config", str(config), "--out", str(tmp_path / "empty")]) == 4
    monkeypatch.setattr(harness, "dgvr_loss", lambda *a, **k: torch.tensor(float("nan"), requires_grad=True))
    assert main(["train", "--config", str(config), "--out", str(tmp_path / "nan")]) == 3
    with pytest.raises(SystemExit):
        main(["frobnicate"])
