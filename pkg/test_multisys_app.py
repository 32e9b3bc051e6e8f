import json
import os

import pandas as pd
import pytest

from errors import ConfigError
from lab_standardizer import CONFIG_DIR
from multisys_app import (
    EXIT_ARTIFACT,
    EXIT_CONFIG,
    EXIT_OK,
    RunConfig,
    load_run_config,
    main,
)

FIGURES = ["histograms.svg", "burden.svg", "correlation.svg", "roc.svg", "shap_beeswarm.svg", "importance.svg", "pdp.svg"]


def _write_config(path, **overrides):
    config = {
        "synth_spec": os.path.join(CONFIG_DIR, "synth_spec.json"),
        "schema_path": os.path.join(CONFIG_DIR, "lab_schema.json"),
        "systems_path": os.path.join(CONFIG_DIR, "systems.json"),
        "synth_n": 300,
        "folds": 3,
        "forest": {"n_trees": 20},
        "boosting": {"n_estimators": 60},
        "pdp": {"grid_size": 12},
    }
    config.update(overrides)
    path.write_text(json.dumps(config), encoding="utf-8")
    return str(path)


def _read(path):
    with open(path, "r", encoding="utf-8") as f:
        return json.load(f)


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    config = _write_config(root / "run.json")
    out = root / "run_a"
    assert main(["all", "--config", config, "--out", str(out)]) == EXIT_OK
    return config, out


def test_all_writes_every_artifact(small_run):
    _, out = small_run
    for name in ["raw_cohort.csv", "features.csv", "provenance.csv", "feature_meta.json", "cleaning_audit.json",
                 "indices.csv", "prevalence.json", "partition.json", "folds.json",
                 "model_lr.json", "model_rf.json", "model_gb.json",
                 "metrics.json", "metrics_table.csv", "roc_curves.csv",
                 "importance.csv", "beeswarm.csv", "explain.json", "table1.csv", "summary.json", "manifest.json"]:
        assert (out / name).exists(), name
    for name in FIGURES:
        assert (out / "figures" / name).exists(), name


def test_summary_contents(small_run):
    _, out = small_run
    summary = _read(out / "summary.json")
    assert summary["schema_version"] == 1
    assert summary["split_sizes"] == {"train": 210, "validation": 45, "test": 45}
    assert summary["cohort"]["n"] == 300
    assert summary["threshold"] == 0.5
    assert len(summary["cross_validation"]["gb"]["fold_auc"]) == 3
    gb_test = [r for r in summary["performance"] if r["model"] == "gb" and r["split"] == "test"][0]
    assert gb_test["auc"] >= 0.9
    assert summary["shap_max_local_accuracy_gap"] <= 1e-6
    assert 1 <= len(summary["pdp_files"]) <= 3
    assert "BUN" not in [r["feature"] for r in summary["importance"][:3]]


def test_roc_curves_cover_three_models(small_run):
    _, out = small_run
    curves = pd.read_csv(out / "roc_curves.csv")
    assert set(curves["model"]) == {"Logistic regression", "Random forest", "Gradient boosting"}
    assert open(out / "figures" / "roc.svg", encoding="utf-8").read().count("<polyline") == 3


def test_identical_config_gives_identical_summary(small_run):
    config, out = small_run
    other = out.parent / "run_b"
    assert main(["all", "--config", config, "--out", str(other)]) == EXIT_OK
    assert (out / "summary.json").read_bytes() == (other / "summary.json").read_bytes()
    assert (out / "figures" / "roc.svg").read_bytes() == (other / "figures" / "roc.svg").read_bytes()


def test_evaluate_before_train(tmp_path, capsys):
    config = _write_config(tmp_path / "run.json")
    out = str(tmp_path / "run")
    for stage in ("simulate", "ingest", "features", "split"):
        assert main([stage, "--config", config, "--out", out]) == EXIT_OK
    assert main(["evaluate", "--config", config, "--out", out]) == EXIT_ARTIFACT
    report = _read(os.path.join(out, "error.json"))
    assert report["error"] == "MissingArtifactError"
    assert "missing model artifact" in report["message"]
    assert "missing model artifact" in capsys.readouterr().err


def test_artifacts_from_another_config(tmp_path):
    config = _write_config(tmp_path / "run.json")
    out = str(tmp_path / "run")
    for stage in ("simulate", "ingest", "features"):
        assert main([stage, "--config", config, "--out", out]) == EXIT_OK
    assert main(["split", "--config", config, "--out", out, "--seed", "7"]) == EXIT_ARTIFACT
    assert _read(os.path.join(out, "error.json"))["error"] == "ConfigHashMismatchError"
    assert main(["split", "--config", config, "--out", out, "--seed", "7", "--force"]) == EXIT_OK


def test_bad_config_exits_with_config_status(tmp_path):
    bad_ratios = _write_config(tmp_path / "ratios.json", ratios=[0.7, 0.2, 0.2])
    assert main(["all", "--config", bad_ratios, "--out", str(tmp_path / "a")]) == EXIT_CONFIG
    unknown = _write_config(tmp_path / "unknown.json", learning_rate=0.1)
    assert main(["all", "--config", unknown, "--out", str(tmp_path / "b")]) == EXIT_CONFIG
    assert main(["all", "--config", str(tmp_path / "absent.json"), "--out", str(tmp_path / "c")]) == EXIT_CONFIG


def test_shipped_config_and_hash():
    config = load_run_config()
    assert config.seed == 42
    assert config.ratios == [0.70, 0.15, 0.15]
    assert config.forest["n_trees"] == 200
    assert len(config.config_hash) == 16
    moved = load_run_config()
    moved.output_dir = "elsewhere"
    assert moved.config_hash == config.config_hash
    moved.seed = 43
    assert moved.config_hash != config.config_hash


def test_partial_section_merges_defaults(tmp_path):
    config = load_run_config(_write_config(tmp_path / "run.json"))
    assert config.boosting == {"n_estimators": 60, "learning_rate": 0.05, "max_depth": 4, "min_samples_leaf": 10}


def test_config_validation():
    with pytest.raises(ConfigError):
        RunConfig().validate()
    with pytest.raises(ConfigError):
        RunConfig(synth_spec="a.json", input_path="b.csv").validate()
    with pytest.raises(ConfigError):
        RunConfig(synth_spec="a.json", threshold=1.0).validate()
    with pytest.raises(ConfigError):
        RunConfig(synth_spec="a.json", folds=1).validate()


def test_default_cohort_end_to_end(tmp_path):
    config = _write_config(tmp_path / "run.json", synth_n=None, folds=5, forest={}, boosting={}, pdp={})
    out = tmp_path / "full"
    assert main(["all", "--config", config, "--out", str(out)]) == EXIT_OK
    summary = _read(out / "summary.json")
    assert summary["split_sizes"] == {"train": 836, "validation": 179, "test": 180}
    assert abs(summary["cohort"]["target_prevalence"] - 0.168) <= 0.04
    test_rows = {r["model"]: r for r in summary["performance"] if r["split"] == "test"}
    assert test_rows["gb"]["auc"] >= 0.99
    assert test_rows["rf"]["auc"] >= 0.98
    # nonlinearity gap: the linear model trails boosting
    assert test_rows["gb"]["auc"] >= test_rows["lr"]["auc"]
    assert test_rows["lr"]["sensitivity"] < test_rows["gb"]["sensitivity"]
