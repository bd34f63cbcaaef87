import json
import logging
from dataclasses import dataclass, field, fields

import numpy as np
from scipy.optimize import minimize
from scipy.special import expit

from src.KnowledgeTracing.data import SplitCohort


SECONDS_PER_DAY = 86400.0
COLD_START = 0.5
PROBABILITY_CLIP = 1e-6


@dataclass
class HlrModel:
    """Half-life regression: h = 2^(theta . (correct, incorrect, total)) days."""
    theta: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=float)
        if self.theta.shape != (3,) or not np.all(np.isfinite(self.theta)):
            raise ValueError("HLR theta must hold 3 finite weights")

    def to_vector(self):
        return self.theta.copy()

    def with_vector(self, vector):
        return HlrModel(vector)

    def to_dict(self):
        return {"kind": "hlr", "theta": self.theta.tolist()}


@dataclass
class PpeModel:
    """
    Predictive performance equation with a separate stability term.
    intercept and slope map the activation to a probability and are not fitted.
    """
    beta: float = 0.1
    eta: float = 0.1
    kappa: float = 0.1
    lam: float = 0.1
    intercept: float = 0.0
    slope: float = 1.0

    def __post_init__(self):
        if not np.all(np.isfinite(self.to_vector())):
            raise ValueError("PPE parameters must be finite")

    def to_vector(self):
        return np.array([self.beta, self.eta, self.kappa, self.lam], dtype=float)

    def with_vector(self, vector):
        beta, eta, kappa, lam = (float(v) for v in vector)
        return PpeModel(beta, eta, kappa, lam, self.intercept, self.slope)

    def to_dict(self):
        return {
            "kind": "ppe",
            "beta": self.beta,
            "eta": self.eta,
            "kappa": self.kappa,
            "lambda": self.lam,
            "intercept": self.intercept,
            "slope": self.slope,
        }


def model_from_dict(data):
    if data["kind"] == "hlr":
        return HlrModel(np.array(data["theta"]))
    if data["kind"] == "ppe":
        return PpeModel(data["beta"], data["eta"], data["kappa"], data["lambda"], data["intercept"], data["slope"])
    raise ValueError(f"unknown baseline kind {data['kind']!r}")


class KcCounters:
    """Per-KC practice counts and exposure times of one learner."""

    def __init__(self):
        self._correct = {}
        self._incorrect = {}
        self._times = {}

    @classmethod
    def from_history(cls, history):
        counters = cls()
        for kc, time, outcome in zip(history.kcs, history.times, history.outcomes):
            counters.update(int(kc), float(time), int(outcome))
        return counters

    def update(self, kc, time, outcome):
        self._times.setdefault(kc, []).append(time)
        if outcome:
            self._correct[kc] = self._correct.get(kc, 0) + 1
        else:
            self._incorrect[kc] = self._incorrect.get(kc, 0) + 1

    def seen(self, kc):
        return kc in self._times

    def counts(self, kc):
        correct, incorrect = self._correct.get(kc, 0), self._incorrect.get(kc, 0)
        return np.array([correct, incorrect, correct + incorrect], dtype=float)

    def last_time(self, kc):
        return self._times[kc][-1]

    def exposure_times(self, kc):
        return np.array(self._times.get(kc, []), dtype=float)


def hlr_probability(theta, counts, delta_seconds):
    """Vectorised 2^(-tau / h) with tau in days and h = 2^(theta . counts)."""
    half_life = np.exp2(counts @ theta)
    return np.exp2(-(delta_seconds / SECONDS_PER_DAY) / half_life)


def hlr_predict(model, counters, kc, now):
    if not counters.seen(kc):
        return COLD_START
    delta = now - counters.last_time(kc)
    return float(hlr_probability(model.theta, counters.counts(kc), delta))


def ppe_weights(eta, ages, mask):
    """Normalised recency weights w_i = age_i^-eta / sum_j age_j^-eta (ages floored at 1 s)."""
    safe_ages = np.where(mask, np.maximum(ages, 1.0), 1.0)
    log_weights = np.where(mask, -eta * np.log(safe_ages), -np.inf)
    log_weights -= log_weights.max(axis=1, keepdims=True)
    weights = np.exp(log_weights)
    return weights / weights.sum(axis=1, keepdims=True)


def ppe_decay_rate(kappa, lam, ages, mask):
    """alpha = kappa + lam * mean_j 1 / ln(age_j + e)."""
    stability = np.where(mask, 1.0 / np.log(np.where(mask, ages, 0.0) + np.e), 0.0).sum(axis=1) / mask.sum(axis=1)
    return kappa + lam * stability


def ppe_activation(beta, eta, kappa, lam, ages, mask):
    """
    PPE activation m = c^beta * T^(-alpha) for padded rows of exposure ages.

    ages (n, C) in seconds with mask (n, C) marking real exposures; T is the
    recency-weighted mean age.
    """
    weights = ppe_weights(eta, ages, mask)
    elapsed = (weights * np.where(mask, np.maximum(ages, 1.0), 1.0)).sum(axis=1)
    alpha = ppe_decay_rate(kappa, lam, ages, mask)
    return mask.sum(axis=1) ** beta * elapsed ** (-alpha)


def ppe_predict(model, counters, kc, now):
    """
    Raises:
        ValueError: If every prior exposure happened at now (undefined weights).
    """
    if not counters.seen(kc):
        return COLD_START
    ages = now - counters.exposure_times(kc)
    if np.all(ages <= 0):
        raise ValueError("PPE weights are undefined when every exposure age is 0")
    m = ppe_activation(model.beta, model.eta, model.kappa, model.lam, ages[None, :], np.ones((1, len(ages)), dtype=bool))
    return float(expit(model.intercept + model.slope * m[0]))


@dataclass
class BaselineConfig:
    max_iter: int = 200
    l2: float = 1e-4
    seed: int = 0
    init_jitter: float = 0.0
    ppe_intercept: float = 0.0
    ppe_slope: float = 1.0
    continual_iter: int = 10

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in dict(data).items() if k in known})


@dataclass
class TrainingRows:
    """Per-interaction features of every non-cold-start training interaction."""
    counts: np.ndarray
    delta: np.ndarray
    ages: np.ndarray
    mask: np.ndarray
    outcomes: np.ndarray


def training_rows(histories):
    counts, delta, ages, outcomes = [], [], [], []
    skipped = 0
    for history in histories:
        counters = KcCounters()
        for kc, time, outcome in zip(history.kcs.tolist(), history.times.tolist(), history.outcomes.tolist()):
            if counters.seen(kc):
                exposure_ages = time - counters.exposure_times(kc)
                if np.all(exposure_ages <= 0):
                    skipped += 1
                else:
                    counts.append(counters.counts(kc))
                    delta.append(time - counters.last_time(kc))
                    ages.append(exposure_ages)
                    outcomes.append(outcome)
            counters.update(kc, time, outcome)
    if skipped:
        logging.info(f"baselines: skipped {skipped} repeats with zero exposure age")
    if not outcomes:
        raise ValueError("no training interaction has a prior exposure of its KC")
    width = max(len(a) for a in ages)
    padded = np.zeros((len(ages), width))
    mask = np.zeros((len(ages), width), dtype=bool)
    for row, a in enumerate(ages):
        padded[row, : len(a)] = a
        mask[row, : len(a)] = True
    return TrainingRows(np.array(counts), np.array(delta), padded, mask, np.array(outcomes, dtype=float))


def _log_loss(p, outcomes):
    p = np.clip(p, PROBABILITY_CLIP, 1.0 - PROBABILITY_CLIP)
    return float(-np.mean(outcomes * np.log(p) + (1.0 - outcomes) * np.log1p(-p)))


def _hlr_loss(model, rows, config):
    def loss(vector):
        return _log_loss(hlr_probability(vector, rows.counts, rows.delta), rows.outcomes) + config.l2 * float(vector @ vector)
    return loss


def _ppe_loss(model, rows, config):
    def loss(vector):
        beta, eta, kappa, lam = vector
        with np.errstate(over="ignore", invalid="ignore"):
            m = ppe_activation(beta, eta, kappa, lam, rows.ages, rows.mask)
        return _log_loss(expit(model.intercept + model.slope * m), rows.outcomes)
    return loss


BASELINE_KINDS = {
    "hlr": (lambda config: HlrModel(), _hlr_loss, hlr_predict),
    "ppe": (lambda config: PpeModel(intercept=config.ppe_intercept, slope=config.ppe_slope), _ppe_loss, ppe_predict),
}


def fit_baseline(kind, data, config, init=None, max_iter=None):
    """
    Fits a baseline by minimising the mean binary log-loss over the training
    interactions with L-BFGS-B and finite-difference gradients.

    Parameters:
        kind (str): "hlr" or "ppe".
        data (SplitCohort or list): Split cohort (train part) or histories.
        config (BaselineConfig): Fit settings.
        init (HlrModel or PpeModel, optional): Warm start.
        max_iter (int, optional): Overrides config.max_iter.

    Returns:
        tuple: (fitted model, list of training losses per iteration)

    Raises:
        ValueError: On an unknown kind, empty data or a diverged fit.
    """
    if kind not in BASELINE_KINDS:
        raise ValueError(f"unknown baseline kind {kind!r}; known: {sorted(BASELINE_KINDS)}")
    histories = data.train if isinstance(data, SplitCohort) else list(data)
    if not histories:
        raise ValueError("cannot fit a baseline on an empty training set")
    make_model, make_loss, _ = BASELINE_KINDS[kind]
    model = init if init is not None else make_model(config)
    rows = training_rows(histories)
    loss = make_loss(model, rows, config)

    x0 = model.to_vector()
    if init is None and config.init_jitter > 0:
        x0 = x0 + np.random.default_rng(config.seed).normal(0.0, config.init_jitter, size=x0.shape)
    trace = [loss(x0)]
    result = minimize(
        loss,
        x0,
        method="L-BFGS-B",
        options={"maxiter": max_iter if max_iter is not None else config.max_iter},
        callback=lambda xk: trace.append(loss(xk)),
    )
    if not np.isfinite(result.fun) or not np.all(np.isfinite(result.x)):
        raise ValueError(f"{kind} fit diverged (loss {result.fun})")
    logging.info(f"fit_baseline {kind}: loss {trace[0]:.4f} -> {result.fun:.4f} in {result.nit} iterations")
    return model.with_vector(result.x), trace


def predict_future(kind, model, prefix, future_records, kc_index):
    """
    Predictions for future records from the counters of the prefix history
    only; outcomes of the predicted records are not fed back.
    """
    predict = BASELINE_KINDS[kind][2]
    counters = KcCounters.from_history(prefix)
    predictions = []
    for record in future_records:
        if record.kc_id not in kc_index:
            raise ValueError(f"unknown kc_id {record.kc_id!r}")
        kc = kc_index[record.kc_id]
        if counters.seen(kc) and np.all(record.timestamp - counters.exposure_times(kc) <= 0) and kind == "ppe":
            predictions.append(COLD_START)
            continue
        predictions.append(predict(model, counters, kc, record.timestamp))
    return predictions


def save_model(model, filename):
    with open(filename, "w") as file:
        json.dump(model.to_dict(), file)
