import json
import logging
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import matplotlib
import numpy as np
import pandas as pd
import scipy
import sklearn
import torch
from rich.console import Console
from rich.table import Table
from scipy.stats import spearmanr
from sklearn.metrics import roc_auc_score

from src.KnowledgeTracing.baselines import BaselineConfig, fit_baseline, predict_future, save_model
from src.KnowledgeTracing.data import (
    build_time_balanced_subsets,
    filter_and_split,
    parse_annotations,
    parse_interactions,
    validation_split,
    write_interactions,
)
from src.KnowledgeTracing.dynamics import GenerativeParams, LatentTruth, schedule_factory, simulate_cohort
from src.KnowledgeTracing.graph import (
    PrerequisiteGraph,
    adjacency_matrix,
    draw_strong_edges,
    export_edges,
    similarity_matrix,
    strong_edge_graph,
    structural_mean,
)
from src.KnowledgeTracing.inference import (
    ContinualState,
    FitConfig,
    continual_update,
    fit_variational_em,
    load_checkpoint,
    predict_horizon,
    save_checkpoint,
)
from src.KnowledgeTracing.metrics import (
    MetricReport,
    RepresentationSample,
    causal_support_table,
    classification_metrics,
    consistency_mi,
    disentanglement_kl,
    inferred_edges,
    jaccard_edges,
    mrr_expert,
    rating_nll,
    regress_support_on_edges,
    regress_with_learner_intercepts,
    specificity_mi,
)

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


COMMANDS = ("simulate", "fit", "predict", "continual", "eval-graph", "eval-traits", "report")
MODEL_NAME = "ssm"


def sub_seed(seed, name):
    """Seed of the named random stream derived from the top-level seed."""
    sequence = np.random.SeedSequence([int(seed), zlib.crc32(name.encode())])
    return int(sequence.generate_state(1)[0])


def learner_seeds(seed, n_learners):
    return [int(s.generate_state(1)[0]) for s in np.random.SeedSequence(int(seed)).spawn(n_learners)]


def package_versions():
    return {
        "numpy": np.__version__,
        "pandas": pd.__version__,
        "scipy": scipy.__version__,
        "scikit-learn": sklearn.__version__,
        "torch": torch.__version__,
    }


@dataclass
class RunReport:
    """
    Everything one command produced.

    Wall-clock timings per phase are part of the report but are saved to
    timings.json beside report.json, so that report.json itself is
    byte-identical across reruns of the same config.
    """
    command: str
    config_hash: str
    config: dict
    metrics: MetricReport
    artifacts: dict = field(default_factory=dict)
    traces: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)
    versions: dict = field(default_factory=package_versions)

    def to_dict(self):
        return {
            "command": self.command,
            "config_hash": self.config_hash,
            "versions": self.versions,
            "config": self.config,
            "metrics": self.metrics.to_dict(),
            "artifacts": dict(sorted(self.artifacts.items())),
            "traces": self.traces,
        }

    def save(self, filename):
        with open(filename, "w") as file:
            json.dump(self.to_dict(), file, indent=2, sort_keys=True)
        with open(os.path.join(os.path.dirname(filename), "timings.json"), "w") as file:
            json.dump(self.timings, file, indent=2, sort_keys=True)


class Experiment:
    """
    Runs one command of the knowledge-tracing pipeline from a resolved config.

    Parameters:
        config (dict): Resolved configuration (see main.ConfigProcessor).
        config_hash (str): Hash of the resolved configuration.
    """

    def __init__(self, config, config_hash=""):
        self.config = config
        self.config_hash = config_hash
        self.seed = int(config["settings"]["seed"])
        self.threads = max(1, int(config["settings"]["threads"]))
        self.out = config["IO"]["out"]
        self.artifacts = {}
        self.timings = {}
        self.traces = {}
        os.makedirs(self.out, exist_ok=True)
        torch.set_num_threads(self.threads)
        logging.info(f"Experiment initialised: seed {self.seed}, {self.threads} thread(s), output in {self.out}")

    def run(self, command):
        """
        Executes a command and writes report.json and timings.json.

        Returns:
            RunReport: The report that was written.
        """
        handlers = {
            "simulate": self.simulate,
            "fit": self.fit,
            "predict": self.predict,
            "continual": self.continual,
            "eval-graph": self.eval_graph,
            "eval-traits": self.eval_traits,
            "report": self.report,
        }
        if command not in handlers:
            raise ValueError(f"unknown command {command!r}; known: {', '.join(COMMANDS)}")
        print(f"Running {command}...")
        logging.info(f"Running {command} with config hash {self.config_hash}")
        with self._timed("total"):
            metrics, metadata = handlers[command]()
        metadata.update({"command": command, "seed": self.seed, "config_hash": self.config_hash})
        report = RunReport(
            command, self.config_hash, self.config, MetricReport(metrics, metadata),
            self.artifacts, self.traces, self.timings,
        )
        report.save(self._path("report.json", register=False))
        print(f"{command} completed, report written to {os.path.join(self.out, 'report.json')}")
        logging.info(f"{command} completed")
        return report

    @contextmanager
    def _timed(self, phase):
        start = time.perf_counter()
        yield
        self.timings[phase] = self.timings.get(phase, 0.0) + time.perf_counter() - start

    def _path(self, name, register=True):
        path = os.path.join(self.out, name)
        if register:
            self.artifacts[os.path.splitext(name)[0]] = path
        return path

    def _seed(self, name):
        return sub_seed(self.seed, name)

    def _fit_config(self, **overrides):
        return FitConfig.from_dict(
            self.config["fit"],
            seed=self._seed("fit"),
            min_interval=self.config["data"]["min_interval"],
            **overrides,
        )

    def _baseline_config(self):
        return BaselineConfig.from_dict(dict(self.config["baselines"], seed=self._seed("baselines")))

    def _load_cohort(self, vocabulary=None):
        data = self.config["data"]
        if not data["interactions"]:
            raise FileNotFoundError("data.interactions is not set")
        return parse_interactions(
            data["interactions"],
            schema=data["columns"],
            timestamp_unit=data["timestamp_unit"],
            kc_order=data["kc_order"],
            vocabulary=vocabulary,
        )

    def _split(self, cohort, min_total=0):
        protocol = self.config["protocol"]
        return filter_and_split(
            cohort,
            max(protocol["min_interactions"], min_total),
            protocol["train_len"],
            protocol["test_len"],
        )

    def _load_checkpoint(self):
        path = self.config["IO"]["checkpoint"]
        if not path:
            raise FileNotFoundError("IO.checkpoint is not set")
        return load_checkpoint(path)

    def _checkpoint_states(self, checkpoint, split, fit_config):
        """
        Posterior states of every learner in split; learners missing from the
        checkpoint get posteriors fitted with theta frozen.
        """
        states = dict(checkpoint.states)
        missing = [pos for pos, h in enumerate(split.train) if h.learner_id not in states]
        if missing:
            print(f"Fitting {len(missing)} learner(s) absent from the checkpoint with frozen parameters...")
            frozen = replace(fit_config, fit_params=False, ablation=checkpoint.ablation)
            result = fit_variational_em(split.select(missing), frozen, params=checkpoint.params)
            states.update(result.states)
        return states

    def _continual_states(self, checkpoint, split, states, fit_config):
        seeds = learner_seeds(self._seed("mc"), len(split.train))
        return [
            ContinualState.from_fit(
                checkpoint.params,
                states[history.learner_id],
                history,
                checkpoint.vocabulary,
                checkpoint.ablation,
                seed=seed,
                min_interval=fit_config.min_interval,
            )
            for history, seed in zip(split.train, seeds)
        ]

    def _predict_all(self, states, schedules, n_samples, seed):
        seeds = learner_seeds(seed, len(states))
        with ThreadPoolExecutor(max_workers=self.threads) as pool:
            return list(pool.map(lambda args: predict_horizon(args[0], args[1], n_samples, args[2]), zip(states, schedules, seeds)))

    def simulate(self):
        """Draws a synthetic cohort and writes it with its hidden ground truth."""
        sim = self.config["simulate"]
        seed = self._seed("simulate")
        n_kcs, dim = sim["n_kcs"], sim["embedding_dim"]
        with self._timed("graph"):
            if sim["strong_edges"] > 0:
                edges = draw_strong_edges(n_kcs, sim["strong_edges"], seed)
                graph = strong_edge_graph(n_kcs, edges, dim, seed, steps=sim["graph_steps"])
            else:
                graph = PrerequisiteGraph.random(n_kcs, dim, seed)
        params = GenerativeParams.default(n_kcs, dim, seed, graph=graph)
        for name in ("s_bar", "r1", "h", "r"):
            if sim[name]:
                setattr(params, name, np.asarray(sim[name], dtype=float))
        params.z_bar, params.w1 = float(sim["z_bar"]), float(sim["w1"])
        params = GenerativeParams.from_dict(params.to_dict())

        options = {"n_interactions": sim["n_interactions"], "gap_mean": sim["gap_mean"], "min_gap": sim["min_gap"]}
        if sim["schedule"] == "curriculum":
            options["new_prob"] = sim["new_prob"]
        schedule = schedule_factory(sim["schedule"], **options)

        with self._timed("simulate"):
            cohort, truth = simulate_cohort(params, sim["n_learners"], schedule, seed, threads=self.threads)
        write_interactions(cohort, self._path("interactions.csv"))
        truth.save(self._path("latent.json"))
        export_edges(graph, self._path("graph.csv"), self.config["metrics"]["edge_threshold"], cohort.kc_vocabulary)

        outcomes = np.concatenate([h.outcomes for h in cohort])
        metrics = {
            "n_learners": float(len(cohort)),
            "n_interactions": float(len(outcomes)),
            "mean_outcome": float(outcomes.mean()),
            "n_strong_edges": float(sim["strong_edges"]),
        }
        return metrics, {"schedule": sim["schedule"], "n_kcs": n_kcs}

    def fit(self):
        """Fits theta and per-learner posteriors on the training windows and saves a checkpoint."""
        cohort = self._load_cohort()
        split = self._split(cohort)
        protocol = self.config["protocol"]
        fit_config = self._fit_config()
        fit_split, held_out = split, None
        if protocol["mode"] == "between":
            fit_split, held_out = validation_split(split, protocol["validation_fraction"], self._seed("data"))
            print(f"Between-learner protocol: {len(fit_split.train)} fitting learners, {len(held_out.train)} held out")

        print(f"Fitting {len(fit_split.train)} learners over {split.n_kcs} KCs...")
        with self._timed("fit"):
            result = fit_variational_em(fit_split, fit_config)
        states = dict(result.states)
        if held_out is not None:
            with self._timed("fit_held_out"):
                frozen = fit_variational_em(held_out, replace(fit_config, fit_params=False), params=result.params)
            states.update(frozen.states)

        save_checkpoint(self._path("checkpoint.json"), result.params, states, split.kc_vocabulary, fit_config.ablation, result.elbo_trace)
        self._write_elbo_trace(result.elbo_trace)
        export_edges(result.params.graph, self._path("graph.csv"), self.config["metrics"]["edge_threshold"], split.kc_vocabulary)
        metrics = {
            "final_elbo": float(result.elbo_trace[-1]),
            "n_accepted_epochs": float(len(result.elbo_trace) - 1),
            "n_rejected_epochs": float(result.n_rejected),
            "n_learners": float(len(states)),
            "n_dropped": float(split.n_dropped),
        }
        return metrics, {"mode": protocol["mode"], "ablation": fit_config.ablation.to_dict()}

    def _write_elbo_trace(self, trace):
        frame = pd.DataFrame({"epoch": np.arange(len(trace)), "elbo": trace})
        frame.to_csv(self._path("elbo_trace.csv"), index=False)
        self.traces["elbo"] = [float(v) for v in trace]
        if self.config["IO"]["plots"] and len(trace) > 1:
            plt.figure()
            plt.plot(frame["epoch"], frame["elbo"], color="blue")
            plt.xlabel("Accepted epoch")
            plt.ylabel("ELBO")
            plt.title("ELBO over accepted epochs")
            plt.grid()
            plt.savefig(self._path("elbo_trace.png"))
            plt.close()

    def predict(self):
        """Predicts each learner's test window from the checkpoint and from the baselines."""
        checkpoint = self._load_checkpoint()
        cohort = self._load_cohort(vocabulary=checkpoint.vocabulary)
        split = self._split(cohort)
        fit_config = self._fit_config()
        states = self._checkpoint_states(checkpoint, split, fit_config)
        continual_states = self._continual_states(checkpoint, split, states, fit_config)

        schedules = [list(zip(test.kcs.tolist(), test.times.tolist())) for test in split.test]
        with self._timed("predict"):
            predicted = self._predict_all(continual_states, schedules, fit_config.predict_samples, self._seed("mc"))

        rows = []
        train_len = self.config["protocol"]["train_len"]

        def add_rows(model, probabilities):
            for test, p_learner in zip(split.test, probabilities):
                for offset, (record, p) in enumerate(zip(test.records, p_learner)):
                    rows.append((model, test.learner_id, train_len + offset, record.kc_id, p, record.outcome))

        add_rows(MODEL_NAME, predicted)
        baseline_config = self._baseline_config()
        for kind in self.config["baselines"]["kinds"]:
            print(f"Fitting the {kind} baseline...")
            with self._timed(f"fit_{kind}"):
                model, _ = fit_baseline(kind, split, baseline_config)
            save_model(model, self._path(f"{kind}_model.json"))
            add_rows(kind, [
                predict_future(kind, model, train, test.records, split.kc_index)
                for train, test in zip(split.train, split.test)
            ])

        frame = pd.DataFrame(rows, columns=["model", "learner_id", "step", "kc_id", "p", "y"])
        frame.to_csv(self._path("predictions.csv"), index=False)
        metrics = {}
        for model, group in frame.groupby("model", sort=False):
            accuracy, f1, brier = classification_metrics(list(zip(group["p"], group["y"])))
            metrics.update({f"{model}_accuracy": accuracy, f"{model}_f1": f1, f"{model}_brier": brier})
        if checkpoint.elbo_trace:
            self._write_elbo_trace(checkpoint.elbo_trace)
            metrics["final_elbo"] = float(checkpoint.elbo_trace[-1])
        MetricReport(metrics).save(self._path("metrics.json"))
        return metrics, {"n_learners": len(split.train), "test_len": self.config["protocol"]["test_len"]}

    def continual(self):
        """
        Continual protocol: every step adds one interaction per learner, then
        predicts each learner's next horizon interactions.
        """
        settings = self.config["continual"]
        n_steps, horizon = settings["n_steps"], settings["horizon"]
        train_len = self.config["protocol"]["train_len"]
        checkpoint = self._load_checkpoint()
        cohort = self._load_cohort(vocabulary=checkpoint.vocabulary)
        split = self._split(cohort, min_total=train_len + n_steps + horizon)
        fit_config = self._fit_config()
        states = self._continual_states(checkpoint, split, self._checkpoint_states(checkpoint, split, fit_config), fit_config)
        futures = [split.full_history(pos).records[train_len:] for pos in range(len(split.train))]
        seen = list(split.train)

        baseline_config = self._baseline_config()
        kinds = list(self.config["baselines"]["kinds"]) if settings["baselines"] else []
        baseline_models = {}
        for kind in kinds:
            baseline_models[kind], _ = fit_baseline(kind, seen, baseline_config)

        cumulative = {name: 0.0 for name in [MODEL_NAME] + kinds}
        rows, timing_rows = [], []
        print(f"Continual protocol over {n_steps} steps for {len(states)} learners...")
        for step in range(n_steps):
            start = time.perf_counter()
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                states = list(pool.map(
                    lambda args: continual_update(args[0], args[1][step], fit_config), zip(states, futures)
                ))
            cumulative[MODEL_NAME] += time.perf_counter() - start
            seen = [history.append(future[step]) for history, future in zip(seen, futures)]
            upcoming = [future[step + 1: step + 1 + horizon] for future in futures]
            outcomes = [r.outcome for records in upcoming for r in records]

            schedules = [[(split.kc_index[r.kc_id], r.timestamp) for r in records] for records in upcoming]
            predicted = self._predict_all(states, schedules, fit_config.predict_samples, sub_seed(self._seed("mc"), f"step{step}"))
            predictions = {MODEL_NAME: [p for learner in predicted for p in learner]}
            for kind in kinds:
                start = time.perf_counter()
                baseline_models[kind], _ = fit_baseline(
                    kind, seen, baseline_config, init=baseline_models[kind], max_iter=baseline_config.continual_iter
                )
                cumulative[kind] += time.perf_counter() - start
                predictions[kind] = [
                    p
                    for history, records in zip(seen, upcoming)
                    for p in predict_future(kind, baseline_models[kind], history, records, split.kc_index)
                ]
            for name, p in predictions.items():
                accuracy, f1, brier = classification_metrics(list(zip(p, outcomes)))
                rows.append((step + 1, name, accuracy, f1, brier))
                timing_rows.append((step + 1, name, cumulative[name]))
            logging.info(f"continual step {step + 1}: {MODEL_NAME} accuracy {rows[-len(predictions)][2]:.3f}")

        frame = pd.DataFrame(rows, columns=["step", "model", "accuracy", "f1", "brier"])
        frame.to_csv(self._path("continual.csv"), index=False)
        pd.DataFrame(timing_rows, columns=["step", "model", "cumulative_seconds"]).to_csv(
            os.path.join(self.out, "continual_timing.csv"), index=False
        )
        self.timings.update({f"continual_{name}": seconds for name, seconds in cumulative.items()})
        if self.config["IO"]["plots"]:
            self._plot_continual(frame)

        metrics = {}
        for name, group in frame.groupby("model", sort=False):
            metrics[f"{name}_mean_accuracy"] = float(group["accuracy"].mean())
            metrics[f"{name}_final_accuracy"] = float(group["accuracy"].iloc[-1])
            metrics[f"{name}_mean_brier"] = float(group["brier"].mean())
        MetricReport(metrics).save(self._path("metrics.json"))
        return metrics, {"n_steps": n_steps, "horizon": horizon, "n_learners": len(states)}

    def _plot_continual(self, frame):
        plt.figure()
        for name, group in frame.groupby("model", sort=False):
            plt.plot(group["step"], group["accuracy"], label=name)
        plt.xlabel("Continual step")
        plt.ylabel(f"Accuracy on the next {self.config['continual']['horizon']} interactions")
        plt.title("Continual prediction accuracy")
        plt.legend()
        plt.grid()
        plt.savefig(self._path("continual_accuracy.png"))
        plt.close()

    def eval_graph(self):
        """Graph alignment against annotations, causal support and (for simulated data) edge recovery."""
        settings = self.config["metrics"]
        checkpoint = self._load_checkpoint()
        graph = checkpoint.params.graph
        adjacency = adjacency_matrix(graph)
        cohort = self._load_cohort(vocabulary=checkpoint.vocabulary)
        export_edges(graph, self._path("graph.csv"), settings["edge_threshold"], checkpoint.vocabulary)
        inferred = inferred_edges(adjacency, settings["edge_threshold"])
        metrics = {"n_inferred_edges": float(len(inferred))}

        if self.config["data"]["annotations"]:
            annotations = parse_annotations(self.config["data"]["annotations"], cohort)
            prerequisites = [a for a in annotations if a.relation == "prerequisite"]
            expert = [(cohort.index_of(a.source_kc), cohort.index_of(a.target_kc)) for a in prerequisites if a.expert]
            crowd = [a for a in prerequisites if not a.expert and a.ratings]
            similarity = [a for a in annotations if a.relation == "similarity" and a.ratings]
            if expert:
                metrics["mrr_expert"] = mrr_expert(adjacency, expert)
                metrics["jaccard_expert"] = jaccard_edges(inferred, set(expert))
            if crowd:
                crowd_edges = {
                    (cohort.index_of(a.source_kc), cohort.index_of(a.target_kc))
                    for a in crowd
                    if a.mean_rating > settings["rating_threshold"]
                }
                metrics["jaccard_crowd"] = jaccard_edges(inferred, crowd_edges)
                metrics["rating_nll_prerequisite"] = rating_nll(adjacency, crowd, cohort.kc_index, settings["sigma_floor"])
            if similarity:
                metrics["rating_nll_similarity"] = rating_nll(
                    similarity_matrix(graph), similarity, cohort.kc_index, settings["sigma_floor"]
                )

        with self._timed("causal_support"):
            support = causal_support_table(
                cohort,
                mc_samples=settings["causal_samples"],
                seed=self._seed("metrics"),
                threads=self.threads,
                sampler=settings["causal_sampler"],
            )
        pairs = sorted(support)
        pd.DataFrame({
            "source_kc": [checkpoint.vocabulary[i] for i, _ in pairs],
            "target_kc": [checkpoint.vocabulary[k] for _, k in pairs],
            "support": [support[pair] for pair in pairs],
            "probability": [adjacency[pair] for pair in pairs],
        }).to_csv(self._path("causal_support.csv"), index=False)
        metrics["n_support_pairs"] = float(len(pairs))
        if len(pairs) >= 3:
            regression = regress_support_on_edges(support, adjacency)
            metrics["support_slope"] = regression["slope"]
            metrics["support_p_value"] = regression["p_value"]
        else:
            logging.warning("fewer than three KC pairs with causal support, regression skipped")

        if self.config["data"]["latent"]:
            truth = LatentTruth.load(self.config["data"]["latent"])
            true_adjacency = adjacency_matrix(truth.params.graph)
            off_diagonal = ~np.eye(len(adjacency), dtype=bool)
            labels = true_adjacency[off_diagonal] > settings["edge_threshold"]
            if 0 < labels.sum() < labels.size:
                metrics["edge_auc"] = float(roc_auc_score(labels, adjacency[off_diagonal]))
            metrics["jaccard_truth"] = jaccard_edges(inferred, inferred_edges(true_adjacency, settings["edge_threshold"]))

        MetricReport(metrics).save(self._path("metrics.json"))
        return metrics, {"n_kcs": len(checkpoint.vocabulary)}

    def eval_traits(self):
        """Interpretability of the inferred traits: information metrics and behavioural regressions."""
        settings = self.config["metrics"]
        checkpoint = self._load_checkpoint()
        cohort = self._load_cohort(vocabulary=checkpoint.vocabulary)
        split = self._split(cohort)
        fit_config = self._fit_config()
        states = self._checkpoint_states(checkpoint, split, fit_config)

        learner_ids, vectors = [], []
        for history in split.train:
            s_mean = states[history.learner_id].s_mean
            learner_ids += [history.learner_id] * len(s_mean)
            vectors.append(s_mean)
        sample = RepresentationSample.from_rows(learner_ids, np.vstack(vectors))
        metrics = {
            "specificity_mi": specificity_mi(sample, settings["ridge"]),
            "disentanglement_kl": disentanglement_kl(sample, settings["ridge"]),
        }
        consistency = self._consistency(cohort, checkpoint, fit_config)
        if consistency is not None:
            metrics["consistency_mi"] = consistency

        continual_states = self._continual_states(checkpoint, split, states, fit_config)
        metrics.update(self._behavioural_regressions(split, continual_states, checkpoint))

        if self.config["data"]["latent"]:
            truth = LatentTruth.load(self.config["data"]["latent"])
            train_len = self.config["protocol"]["train_len"]
            true_alpha = [np.mean(np.exp(truth.traits[h.learner_id][:train_len, 0])) for h in split.train]
            inferred_alpha = [np.mean(np.exp(states[h.learner_id].s_mean[:, 0])) for h in split.train]
            metrics["alpha_spearman"] = float(spearmanr(true_alpha, inferred_alpha)[0])

        MetricReport(metrics).save(self._path("metrics.json"))
        return metrics, {"n_learners": len(split.train)}

    def _consistency(self, cohort, checkpoint, fit_config):
        settings = self.config["metrics"]
        n_subsets, subset_len = settings["n_subsets"], settings["subset_len"]
        eligible = [h for h in cohort if len(h) >= n_subsets * subset_len]
        if not eligible:
            logging.warning(f"no learner has {n_subsets * subset_len} interactions, consistency skipped")
            return None
        seeds = learner_seeds(self._seed("metrics"), len(eligible))
        subsets, owners, labels = [], [], []
        for history, seed in zip(eligible, seeds):
            for label, subset in enumerate(build_time_balanced_subsets(history, n_subsets, subset_len, seed)):
                subsets.append(cohort.make_history(f"{history.learner_id}/{label}", subset.records))
                owners.append(history.learner_id)
                labels.append(label)
        print(f"Fitting {len(subsets)} time-balanced subsets of {len(eligible)} learner(s)...")
        frozen = replace(
            fit_config, fit_params=False, ablation=checkpoint.ablation, max_epochs=settings["subset_epochs"]
        )
        with self._timed("fit_subsets"):
            result = fit_variational_em(subsets, frozen, params=checkpoint.params)
        rows_owner, rows_label, vectors = [], [], []
        for subset, owner, label in zip(subsets, owners, labels):
            s_mean = result.states[subset.learner_id].s_mean
            rows_owner += [owner] * len(s_mean)
            rows_label += [label] * len(s_mean)
            vectors.append(s_mean)
        sample = RepresentationSample.from_rows(rows_owner, np.vstack(vectors), rows_label)
        return consistency_mi(sample, settings["ridge"])

    def _behavioural_regressions(self, split, continual_states, checkpoint):
        """
        Within-learner regressions on the test windows: one-step performance
        difference on retention exp(-alpha tau) and on the raw interval, and
        first-attempt performance on novel KCs on the structural mean.
        """
        adjacency = adjacency_matrix(checkpoint.params.graph)
        min_interval = self.config["data"]["min_interval"]
        retention, interval, novel = [], [], []
        for train, test, state in zip(split.train, split.test, continual_states):
            alpha, mu, gamma = np.exp(state.s_mean[0]), state.s_mean[1], state.s_mean[3]
            if checkpoint.ablation.no_graph:
                gamma = 0.0
            previous_y, previous_t = train.outcomes[-1], train.times[-1]
            seen = set(train.kcs.tolist())
            for kc, t, y in zip(test.kcs.tolist(), test.times.tolist(), test.outcomes.tolist()):
                tau = max(t - previous_t, min_interval)
                retention.append((test.learner_id, float(np.exp(-alpha * tau)), float(y - previous_y)))
                interval.append((test.learner_id, float(tau), float(y - previous_y)))
                if kc not in seen:
                    novel.append((test.learner_id, structural_mean(state.z_mean, adjacency, mu, gamma, kc), float(y)))
                    seen.add(kc)
                previous_y, previous_t = y, t

        metrics, bins = {}, []
        for name, rows in (("retention", retention), ("interval", interval), ("initial_performance", novel)):
            result = self._regression(name, rows)
            if result is None:
                continue
            metrics[f"{name}_slope"] = result.slope
            metrics[f"{name}_p_value"] = result.p_value
            bins.append(result.bins.assign(regression=name))
        if bins:
            frame = pd.concat(bins, ignore_index=True)[["regression", "bin_center", "mean", "sem", "count"]]
            frame.to_csv(self._path("regression_bins.csv"), index=False)
            if self.config["IO"]["plots"]:
                self._plot_regression_bins(frame)
        return metrics

    def _regression(self, name, rows):
        frame = pd.DataFrame(rows, columns=["learner", "x", "y"])
        sizes = frame.groupby("learner", sort=False)["x"].transform("size")
        frame = frame[sizes >= 3]
        try:
            return regress_with_learner_intercepts(frame.itertuples(index=False, name=None), decile_bins=True)
        except ValueError as e:
            logging.warning(f"{name} regression skipped: {e}")
            return None

    def _plot_regression_bins(self, frame):
        groups = list(frame.groupby("regression", sort=False))
        fig, axes = plt.subplots(1, len(groups), figsize=(5 * len(groups), 4), squeeze=False)
        for ax, (name, group) in zip(axes[0], groups):
            ax.errorbar(group["bin_center"], group["mean"], yerr=group["sem"], fmt="o", color="blue")
            ax.set_title(name.replace("_", " "))
            ax.set_xlabel("Bin centre")
            ax.set_ylabel("Mean response")
            ax.grid()
        fig.tight_layout()
        fig.savefig(self._path("regression_bins.png"))
        plt.close(fig)

    def report(self):
        """Merges run reports into one comparison table."""
        paths = self.config["IO"]["reports"]
        if not paths:
            raise ValueError("IO.reports lists no run reports to merge")
        rows = []
        for path in paths:
            try:
                with open(path, "r") as file:
                    data = json.load(file)
            except FileNotFoundError:
                raise FileNotFoundError(f"File {path} does not exist")
            row = {"report": path, "command": data["command"], "config_hash": data["config_hash"][:12]}
            row.update(data["metrics"]["metrics"])
            rows.append(row)
        frame = pd.DataFrame(rows)
        frame.to_csv(self._path("report_table.csv"), index=False)

        table = Table(title="Run reports")
        for column in frame.columns:
            table.add_column(str(column), overflow="fold")
        for _, row in frame.iterrows():
            table.add_row(*[f"{v:.4g}" if isinstance(v, float) else str(v) for v in row.tolist()])
        Console().print(table)
        return {"n_reports": float(len(rows))}, {"reports": list(paths)}
