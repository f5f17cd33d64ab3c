"""End-to-end tests driving the ``rule-miner`` command line."""

import json
import logging
from pathlib import Path

import pandas as pd
import pytest

TESTS_DIR = Path(__file__).resolve().parents[1]
TOY = str(TESTS_DIR / "configs" / "toy.yaml")

pytestmark = pytest.mark.e2e


@pytest.fixture(scope="module", autouse=True)
def _keep_root_logger():
    root = logging.getLogger()
    handlers, level = list(root.handlers), root.level
    yield
    root.handlers[:] = handlers
    root.setLevel(level)


def run(*argv):
    from rule_miner.cli import main

    return main([str(arg) for arg in argv])


@pytest.fixture(scope="module")
def trained_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    assert run("train", "--config", TOY, "--out", out) == 0
    return out


def test_synth_is_byte_identical_across_runs(tmp_path, capsys):
    args = ("synth", "--seed", 3, "--rules", 2, "--windows", 120, "--config", TOY)
    assert run(*args, "--out", tmp_path / "a") == 0
    assert run(*args, "--out", tmp_path / "b") == 0

    for name in ("windows.jsonl", "planted_rules.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name
    assert "synth: windows=120 rules=2 seed=3" in capsys.readouterr().out

    sidecar = json.loads((tmp_path / "a" / "planted_rules.json").read_text(encoding="utf-8"))
    assert sidecar["seed"] == 3 and len(sidecar["rules"]) == 2


@pytest.mark.parametrize("extra", [("--rules", 0), ("--windows", 50)])
def test_synth_rejects_bad_generator_settings(tmp_path, extra, capsys):
    assert run("synth", "--config", TOY, *extra, "--out", tmp_path) == 2
    assert "error:" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [[], ["train"], ["train", "--out", "x"], ["fly", "--out", "x"],
                                  ["ablate", "--config", TOY, "--seeds", "one", "--out", "x"]])
def test_argument_errors_exit_with_usage_code(argv):
    assert run(*argv) == 2


def test_train_writes_checkpoint_and_log(trained_dir):
    assert (trained_dir / "checkpoint.json").exists()
    log = pd.read_csv(trained_dir / "training_log.csv")
    assert len(log) == 5
    assert list(log.columns[:2]) == ["step", "nll"]


def test_train_is_byte_identical_across_runs(trained_dir, tmp_path):
    assert run("train", "--config", TOY, "--out", tmp_path) == 0
    for name in ("checkpoint.json", "training_log.csv"):
        assert (tmp_path / name).read_bytes() == (trained_dir / name).read_bytes(), name


def test_eval_writes_metrics_and_rules(trained_dir, tmp_path, capsys):
    assert run("eval", "--checkpoint", trained_dir / "checkpoint.json", "--out", tmp_path) == 0

    metrics = json.loads((tmp_path / "metrics.json").read_text(encoding="utf-8"))
    for key in ("rule_mining_accuracy", "rule_coverage", "wall_time_seconds", "rule_count",
                "config_fingerprint", "planted_recovery"):
        assert key in metrics, f"metrics.json lacks {key}"
    assert 0.0 <= metrics["rule_coverage"] <= 1.0
    rules = json.loads((tmp_path / "rules.json").read_text(encoding="utf-8"))
    assert len(rules) == metrics["rule_count"]
    assert capsys.readouterr().out.startswith("eval: accuracy=")

    assert run("eval", "--checkpoint", trained_dir, "--out", tmp_path / "again") == 0
    assert (tmp_path / "again" / "metrics.json").read_bytes() == (tmp_path / "metrics.json").read_bytes()


def test_mine_and_export(trained_dir, tmp_path):
    assert run("mine", "--checkpoint", trained_dir, "--out", tmp_path / "mined") == 0
    assert (tmp_path / "mined" / "rules.json").exists()

    assert run("export", "--checkpoint", trained_dir, "--out", tmp_path / "figures") == 0
    for name in ("rule_timeline.csv", "support_distribution.csv", "rule_correlation.csv"):
        assert (tmp_path / "figures" / name).exists(), name


def test_baseline_writes_its_own_files(tmp_path):
    assert run("baseline", "--config", TOY, "--out", tmp_path) == 0
    metrics = json.loads((tmp_path / "baseline_metrics.json").read_text(encoding="utf-8"))
    assert metrics["miner"] == "apriori"
    assert (tmp_path / "baseline_rules.json").exists()


def test_train_on_a_saved_synthetic_directory(tmp_path):
    assert run("synth", "--config", TOY, "--windows", 100, "--out", tmp_path / "data") == 0
    assert run("train", "--config", TOY, "--data", tmp_path / "data", "--out", tmp_path / "run") == 0
    assert (tmp_path / "run" / "checkpoint.json").exists()


def test_train_on_a_cmapss_file(tmp_path):
    fixture = TESTS_DIR / "fixtures" / "cmapss_small.txt"
    assert run("--log-level", "ERROR", "train", "--config", TOY, "--data", fixture,
               "--out", tmp_path) == 0
    checkpoint = json.loads((tmp_path / "checkpoint.json").read_text(encoding="utf-8"))
    assert checkpoint["sensor_stats"] is not None


def test_single_seed_ablation(tmp_path):
    assert run("ablate", "--config", TOY, "--seeds", 0, "--out", tmp_path) == 0

    table = pd.read_csv(tmp_path / "ablation.csv")
    assert list(table.columns) == [
        "variant", "rule_mining_accuracy", "rule_coverage",
        "calculation_efficiency_seconds", "rule_count", "status",
    ]
    assert list(table["variant"]) == [
        "full", "no_time_dependency", "no_dynamic_weights", "no_self_attention",
    ]


@pytest.mark.slow
def test_three_seed_ablation_reruns_identically(tmp_path):
    assert run("ablate", "--config", TOY, "--seeds", 0, 1, 2, "--out", tmp_path / "a") == 0
    assert run("ablate", "--config", TOY, "--seeds", 0, 1, 2, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "ablation.csv").read_bytes() == (tmp_path / "b" / "ablation.csv").read_bytes()
    assert set(pd.read_csv(tmp_path / "a" / "ablation.csv")["status"]) <= {"ok", "partial", "failed"}


def test_unknown_config_key_is_a_usage_error(tmp_path, capsys):
    config = tmp_path / "bad.yaml"
    config.write_text("model:\n  dmodel: 8\n", encoding="utf-8")
    assert run("train", "--config", config, "--out", tmp_path / "out") == 2
    assert "model.dmodel" in capsys.readouterr().err


def test_missing_files_are_io_errors(tmp_path):
    assert run("train", "--config", tmp_path / "absent.yaml", "--out", tmp_path) == 1
    assert run("eval", "--checkpoint", tmp_path / "absent.json", "--out", tmp_path) == 1
    assert run("train", "--config", TOY, "--data", tmp_path / "absent.txt", "--out", tmp_path) == 1


def test_numeric_failures_exit_with_code_3(tmp_path, mocker, capsys):
    from rule_miner.exceptions import NumericError

    mocker.patch(
        "rule_miner.cli.RuleMiningPipeline.train",
        side_effect=NumericError("non-finite loss nan at batch 0"),
    )
    assert run("train", "--config", TOY, "--out", tmp_path) == 3
    assert "non-finite loss" in capsys.readouterr().err
    assert not (tmp_path / "checkpoint.json").exists()
