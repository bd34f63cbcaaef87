import json
import os

import numpy as np
import pandas as pd
import pytest
import toml
from main import ConfigProcessor, DEFAULT_CONFIG
from src.KnowledgeTracing.experiment import MODEL_NAME, Experiment, learner_seeds, sub_seed
from src.KnowledgeTracing.inference import load_checkpoint


def make_config(out, text=""):
    """
    defaults merged with a small TOML snippet, written to out
    """
    config = ConfigProcessor().merge(DEFAULT_CONFIG, toml.loads(text))
    config["IO"]["out"] = str(out)
    config["IO"]["plots"] = False
    return ConfigProcessor.resolve_paths(config)


SMALL_RUN = """
[settings]
seed = 7

[simulate]
n_learners = 6
n_kcs = 4
n_interactions = 24
embedding_dim = 2
gap_mean = 3600.0

[protocol]
min_interactions = 20
train_len = 10
test_len = 10

[fit]
max_epochs = 3
mc_samples = 2
embedding_dim = 2
continual_steps = 2
prior_samples = 32
predict_samples = 50

[baselines]
max_iter = 5
continual_iter = 2

[continual]
n_steps = 2
horizon = 3

[metrics]
causal_samples = 256
n_subsets = 2
subset_len = 10
subset_epochs = 2
"""


def run(config, command):
    return Experiment(config, ConfigProcessor.config_hash(config)).run(command)


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """
    simulated cohort and fitted checkpoint shared by the command tests
    """
    root = tmp_path_factory.mktemp("pipeline")
    run(make_config(root / "sim", SMALL_RUN), "simulate")
    data = root / "sim"
    fit_config = make_config(root / "fit", SMALL_RUN)
    fit_config["data"]["interactions"] = str(data / "interactions.csv")
    run(fit_config, "fit")

    def config_for(name):
        config = make_config(root / name, SMALL_RUN)
        config["data"]["interactions"] = str(data / "interactions.csv")
        config["data"]["latent"] = str(data / "latent.json")
        config["IO"]["checkpoint"] = str(root / "fit" / "checkpoint.json")
        return config

    return root, config_for


def test_sub_seeds_are_named_streams():
    assert sub_seed(3, "fit") == sub_seed(3, "fit")
    assert sub_seed(3, "fit") != sub_seed(3, "data")
    assert learner_seeds(3, 4) == learner_seeds(3, 4)
    assert len(set(learner_seeds(3, 4))) == 4


def test_simulate_writes_outputs(pipeline):
    root, _ = pipeline
    sim = root / "sim"

    frame = pd.read_csv(sim / "interactions.csv")
    assert list(frame.columns) == ["learner_id", "kc_id", "timestamp", "correct"]
    assert len(frame) == 6 * 24
    with open(sim / "report.json") as file:
        report = json.load(file)
    assert report["metrics"]["metrics"]["n_interactions"] == 144.0
    assert os.path.exists(sim / "latent.json") and os.path.exists(sim / "timings.json")


def test_timings_sit_beside_the_report(tmp_path):
    report = run(make_config(tmp_path, SMALL_RUN), "simulate")

    assert "total" in report.timings and report.timings["total"] >= 0.0
    assert "timings" not in report.to_dict()
    with open(tmp_path / "timings.json") as file:
        assert json.load(file) == pytest.approx(report.timings)


def test_simulate_is_byte_identical(tmp_path):
    config = make_config(tmp_path, SMALL_RUN)
    names = ["interactions.csv", "latent.json", "graph.csv", "report.json"]

    run(config, "simulate")
    first = {name: (tmp_path / name).read_bytes() for name in names}
    run(config, "simulate")
    assert all((tmp_path / name).read_bytes() == first[name] for name in names)


def test_seed_changes_simulation(tmp_path):
    first, second = make_config(tmp_path / "a", SMALL_RUN), make_config(tmp_path / "b", SMALL_RUN)
    second["settings"]["seed"] = 8
    run(first, "simulate")
    run(second, "simulate")

    assert (tmp_path / "a" / "interactions.csv").read_bytes() != (tmp_path / "b" / "interactions.csv").read_bytes()


def test_fit_writes_checkpoint(pipeline):
    root, _ = pipeline
    checkpoint = load_checkpoint(str(root / "fit" / "checkpoint.json"))

    assert len(checkpoint.states) == 6
    assert len(checkpoint.vocabulary) == 4
    trace = pd.read_csv(root / "fit" / "elbo_trace.csv")
    assert list(trace.columns) == ["epoch", "elbo"]
    assert trace["elbo"].is_monotonic_increasing


def test_between_protocol_covers_held_out_learners(pipeline):
    _, config_for = pipeline
    config = config_for("between")
    config["protocol"]["mode"] = "between"
    config["protocol"]["validation_fraction"] = 0.34
    report = run(config, "fit")

    assert report.metrics.metrics["n_learners"] == 6.0


def test_predict_reports_all_models(pipeline):
    _, config_for = pipeline
    config = config_for("predict")
    report = run(config, "predict")

    metrics = report.metrics.metrics
    for model in (MODEL_NAME, "hlr", "ppe"):
        assert 0.0 <= metrics[f"{model}_accuracy"] <= 1.0
        assert f"{model}_f1" in metrics and f"{model}_brier" in metrics
    assert "final_elbo" in metrics and report.metrics.all_finite()
    frame = pd.read_csv(os.path.join(config["IO"]["out"], "predictions.csv"))
    assert len(frame) == 3 * 6 * 10
    assert frame["step"].min() == 10
    assert frame["p"].between(0, 1).all()


def test_predict_is_reproducible(pipeline):
    _, config_for = pipeline
    config = config_for("predict_twice")
    path = os.path.join(config["IO"]["out"], "predictions.csv")

    run(config, "predict")
    with open(path, "rb") as file:
        first = file.read()
    run(config, "predict")
    with open(path, "rb") as file:
        assert file.read() == first


def test_continual_series(pipeline):
    _, config_for = pipeline
    config = config_for("continual")
    report = run(config, "continual")

    frame = pd.read_csv(os.path.join(config["IO"]["out"], "continual.csv"))
    assert len(frame) == 2 * 3
    assert sorted(frame["model"].unique()) == sorted([MODEL_NAME, "hlr", "ppe"])
    timing = pd.read_csv(os.path.join(config["IO"]["out"], "continual_timing.csv"))
    for _, group in timing.groupby("model"):
        assert group["cumulative_seconds"].is_monotonic_increasing
    assert f"{MODEL_NAME}_mean_accuracy" in report.metrics.metrics


def test_continual_needs_long_histories(pipeline):
    _, config_for = pipeline
    config = config_for("continual_long")
    config["continual"]["n_steps"] = 50

    with pytest.raises(ValueError):
        run(config, "continual")


def test_eval_graph(pipeline, tmp_path):
    _, config_for = pipeline
    config = config_for("graph")
    vocabulary = load_checkpoint(config["IO"]["checkpoint"]).vocabulary
    annotations = tmp_path / "annotations.csv"
    annotations.write_text("\n".join([
        "source_kc,target_kc,relation,rating,expert",
        f"{vocabulary[0]},{vocabulary[1]},prerequisite,,1",
        f"{vocabulary[1]},{vocabulary[2]},prerequisite,7,0",
        f"{vocabulary[1]},{vocabulary[2]},prerequisite,8,0",
        f"{vocabulary[2]},{vocabulary[3]},similarity,3,0",
    ]) + "\n")
    config["data"]["annotations"] = str(annotations)
    report = run(config, "eval-graph")

    metrics = report.metrics.metrics
    for name in ("mrr_expert", "jaccard_expert", "jaccard_crowd", "rating_nll_prerequisite", "rating_nll_similarity", "jaccard_truth"):
        assert name in metrics
    assert 0.0 < metrics["mrr_expert"] <= 1.0
    support = pd.read_csv(os.path.join(config["IO"]["out"], "causal_support.csv"))
    assert list(support.columns) == ["source_kc", "target_kc", "support", "probability"]
    assert len(support) == metrics["n_support_pairs"]


def test_eval_traits(pipeline):
    _, config_for = pipeline
    config = config_for("traits")
    report = run(config, "eval-traits")

    metrics = report.metrics.metrics
    for name in ("specificity_mi", "disentanglement_kl", "consistency_mi", "retention_slope", "interval_slope", "alpha_spearman"):
        assert name in metrics
    assert np.isfinite(metrics["specificity_mi"])
    bins = pd.read_csv(os.path.join(config["IO"]["out"], "regression_bins.csv"))
    assert list(bins.columns) == ["regression", "bin_center", "mean", "sem", "count"]


def test_report_merges_runs(pipeline, tmp_path):
    root, _ = pipeline
    config = make_config(tmp_path, SMALL_RUN)
    config["IO"]["reports"] = [str(root / "sim" / "report.json"), str(root / "fit" / "report.json")]
    report = run(config, "report")

    table = pd.read_csv(tmp_path / "report_table.csv")
    assert report.metrics.metrics["n_reports"] == 2.0
    assert table["command"].tolist() == ["simulate", "fit"]


def test_report_missing_file(tmp_path):
    config = make_config(tmp_path, SMALL_RUN)
    config["IO"]["reports"] = [str(tmp_path / "missing.json")]

    with pytest.raises(FileNotFoundError):
        run(config, "report")


def test_unknown_command(tmp_path):
    with pytest.raises(ValueError):
        Experiment(make_config(tmp_path)).run("train")


@pytest.mark.slow
def test_full_model_beats_no_graph_ablation(tmp_path):
    """
    on a strongly structured cohort the graph improves held-out accuracy
    """
    wins = 0
    for seed in range(5):
        base = f"""
        [settings]
        seed = {seed}
        [simulate]
        n_learners = 100
        n_kcs = 10
        n_interactions = 30
        strong_edges = 8
        embedding_dim = 8
        schedule = "curriculum"
        s_bar = [-11.5, 0.0, -5.4, 3.0]
        [protocol]
        min_interactions = 30
        train_len = 20
        test_len = 10
        [fit]
        max_epochs = 200
        learning_rate = 0.02
        embedding_dim = 8
        [baselines]
        kinds = []
        """
        sim = make_config(tmp_path / f"sim{seed}", base)
        run(sim, "simulate")
        accuracy = {}
        for name, no_graph in (("full", False), ("no_graph", True)):
            fit = make_config(tmp_path / f"{name}{seed}", base)
            fit["data"]["interactions"] = str(tmp_path / f"sim{seed}" / "interactions.csv")
            fit["fit"]["ablation"]["no_graph"] = no_graph
            run(fit, "fit")
            fit["IO"]["checkpoint"] = str(tmp_path / f"{name}{seed}" / "checkpoint.json")
            accuracy[name] = run(fit, "predict").metrics.metrics[f"{MODEL_NAME}_accuracy"]
        wins += accuracy["full"] > accuracy["no_graph"]
    assert wins >= 4


@pytest.mark.slow
def test_retention_explains_performance_changes(tmp_path):
    """
    decaying knowledge makes performance drops grow with forgetting,
    more sharply than with the raw interval
    """
    base = """
    [settings]
    seed = 3
    [simulate]
    n_learners = 200
    n_kcs = 1
    n_interactions = 30
    embedding_dim = 2
    gap_mean = 86400.0
    s_bar = [-11.5, -2.0, -5.4, 0.0]
    r1 = [1.0, 0.01, 0.01, 0.01]
    r = [1e-6, 1e-6, 1e-6, 1e-6]
    z_bar = 2.0
    w1 = 0.1
    [protocol]
    min_interactions = 30
    train_len = 10
    test_len = 20
    [fit]
    max_epochs = 150
    learning_rate = 0.02
    embedding_dim = 2
    [baselines]
    kinds = []
    """
    sim = make_config(tmp_path / "sim", base)
    run(sim, "simulate")
    config = make_config(tmp_path / "fit", base)
    config["data"]["interactions"] = str(tmp_path / "sim" / "interactions.csv")
    run(config, "fit")
    config["IO"]["checkpoint"] = str(tmp_path / "fit" / "checkpoint.json")
    metrics = run(config, "eval-traits").metrics.metrics

    assert metrics["retention_slope"] > 0
    assert metrics["retention_p_value"] < 0.01
    assert abs(metrics["interval_slope"]) < abs(metrics["retention_slope"])
