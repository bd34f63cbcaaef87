import json
import logging
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from src.KnowledgeTracing.data import Cohort, InteractionRecord
from src.KnowledgeTracing.graph import PrerequisiteGraph, adjacency_matrix, structural_means


TRAIT_NAMES = ("alpha", "mu", "sigma", "gamma")
N_TRAITS = len(TRAIT_NAMES)
EMISSION_EPS = 1e-12
TAYLOR_THRESHOLD = 1e-6

DEFAULT_ALPHA = 1e-5
# sigma^2 / (2 alpha) = 1 at the default forgetting rate
DEFAULT_LOG_SIGMA = 0.5 * np.log(2.0 * DEFAULT_ALPHA)


@dataclass(frozen=True)
class TraitVector:
    """Raw trait vector s = (log alpha, mu, log sigma, gamma)."""
    raw: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=float)
        if raw.shape != (N_TRAITS,) or not np.all(np.isfinite(raw)):
            raise ValueError(f"trait vector must hold {N_TRAITS} finite values, got {raw}")
        object.__setattr__(self, "raw", raw)

    @classmethod
    def from_decoded(cls, alpha, mu, sigma, gamma):
        return cls(np.array([np.log(alpha), mu, np.log(sigma), gamma]))

    @property
    def alpha(self):
        return float(np.exp(self.raw[0]))

    @property
    def mu(self):
        return float(self.raw[1])

    @property
    def sigma(self):
        return float(np.exp(self.raw[2]))

    @property
    def gamma(self):
        return float(self.raw[3])


@dataclass(frozen=True)
class KnowledgeState:
    z: np.ndarray

    def __post_init__(self):
        z = np.asarray(self.z, dtype=float)
        if not np.all(np.isfinite(z)):
            raise ValueError("knowledge state must be finite")
        object.__setattr__(self, "z", z)


@dataclass(frozen=True)
class TransitionMoments:
    m: np.ndarray
    w: float
    r: float


@dataclass(frozen=True)
class Gaussian:
    mean: np.ndarray
    var: np.ndarray


@dataclass
class GenerativeParams:
    """
    Global parameters theta of the hierarchical model.

    R1, R and w1 are variances and must be strictly positive; H is the
    diagonal of the trait transition matrix.
    """
    graph: PrerequisiteGraph
    s_bar: np.ndarray
    r1: np.ndarray
    h: np.ndarray
    r: np.ndarray
    z_bar: float = 0.0
    w1: float = 1.0

    def __post_init__(self):
        for name in ("s_bar", "r1", "h", "r"):
            value = np.asarray(getattr(self, name), dtype=float)
            if value.shape != (N_TRAITS,) or not np.all(np.isfinite(value)):
                raise ValueError(f"{name} must hold {N_TRAITS} finite values")
            setattr(self, name, value)
        self.z_bar = float(self.z_bar)
        self.w1 = float(self.w1)
        if np.any(self.r1 <= 0) or np.any(self.r <= 0) or self.w1 <= 0:
            raise ValueError("R1, R and w1 must be strictly positive")

    @property
    def n_kcs(self):
        return self.graph.n_kcs

    @classmethod
    def default(cls, n_kcs, dim=16, seed=0, graph=None):
        if graph is None:
            graph = PrerequisiteGraph.random(n_kcs, dim, seed)
        return cls(
            graph=graph,
            s_bar=np.array([np.log(DEFAULT_ALPHA), 0.0, DEFAULT_LOG_SIGMA, 0.5]),
            r1=np.full(N_TRAITS, 0.25),
            h=np.ones(N_TRAITS),
            r=np.full(N_TRAITS, 1e-4),
            z_bar=0.0,
            w1=1.0,
        )

    def to_dict(self):
        return {
            "graph": self.graph.to_dict(),
            "s_bar": self.s_bar.tolist(),
            "r1": self.r1.tolist(),
            "h": self.h.tolist(),
            "r": self.r.tolist(),
            "z_bar": self.z_bar,
            "w1": self.w1,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            graph=PrerequisiteGraph.from_dict(data["graph"]),
            s_bar=np.array(data["s_bar"]),
            r1=np.array(data["r1"]),
            h=np.array(data["h"]),
            r=np.array(data["r"]),
            z_bar=data["z_bar"],
            w1=data["w1"],
        )


def retention_ratio(alpha, tau):
    """
    r = exp(-alpha * tau).

    Raises:
        ValueError: If alpha <= 0 or tau < 0.
    """
    alpha = np.asarray(alpha, dtype=float)
    tau = np.asarray(tau, dtype=float)
    if np.any(alpha <= 0):
        raise ValueError("forgetting rate alpha must be positive")
    if np.any(tau < 0):
        raise ValueError("interval tau must be non-negative")
    r = np.exp(-alpha * tau)
    return float(r) if r.ndim == 0 else r


def uses_series(alpha, tau):
    """True where alpha tau is below TAYLOR_THRESHOLD."""
    return np.asarray(alpha, dtype=float) * np.asarray(tau, dtype=float) < TAYLOR_THRESHOLD


def transition_variance(alpha, sigma, tau):
    """
    w = sigma^2 (1 - exp(-2 alpha tau)) / (2 alpha).

    For alpha tau below 1e-6 the three-term series
    sigma^2 tau (1 - x/2 + x^2/6), x = 2 alpha tau, is used instead.
    """
    alpha = np.asarray(alpha, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    tau = np.asarray(tau, dtype=float)
    x = 2.0 * alpha * tau
    with np.errstate(divide="ignore", invalid="ignore"):
        exact = sigma**2 * -np.expm1(-x) / (2.0 * alpha)
    series = sigma**2 * tau * (1.0 - x / 2.0 + x**2 / 6.0)
    w = np.where(uses_series(alpha, tau), series, exact)
    return float(w) if w.ndim == 0 else w


def decode_traits(s):
    """Splits raw traits (..., 4) into alpha, mu, sigma, gamma arrays."""
    s = np.asarray(s, dtype=float)
    return np.exp(s[..., 0]), s[..., 1], np.exp(s[..., 2]), s[..., 3]


def transition_batch(z_prev, s, adjacency, tau, use_graph=True):
    """
    Vectorised OU transition moments.

    Parameters:
        z_prev (array): (..., K) previous knowledge states.
        s (array): (..., 4) raw traits at the new step.
        adjacency (array): K x K adjacency.
        tau (float or array): (...) intervals in seconds.
        use_graph (bool): If False, gamma is treated as 0.

    Returns:
        tuple: (m of shape (..., K), w of shape (...), r of shape (...))
    """
    alpha, mu, sigma, gamma = decode_traits(s)
    if not use_graph:
        gamma = np.zeros_like(gamma)
    r = np.asarray(np.exp(-alpha * tau))
    w = np.asarray(transition_variance(alpha, sigma, tau))
    z_prev = np.asarray(z_prev, dtype=float)
    mu_tilde = structural_means(z_prev, adjacency, mu, gamma)
    m = r[..., None] * z_prev + (1.0 - r[..., None]) * mu_tilde
    return m, w, r


def ou_transition_moments(z_prev, traits, adjacency, tau):
    """
    Moments of p(z_n | z_(n-1), s_n) for one learner.

    Parameters:
        z_prev (KnowledgeState or array): Previous knowledge state.
        traits (TraitVector or array): Raw traits at the new step.
        adjacency (array): K x K adjacency.
        tau (float): Interval in seconds.

    Returns:
        TransitionMoments: Per-KC mean m, shared variance w and retention r.

    Raises:
        ValueError: On non-finite inputs or a negative interval.
    """
    z = z_prev.z if isinstance(z_prev, KnowledgeState) else np.asarray(z_prev, dtype=float)
    raw = traits.raw if isinstance(traits, TraitVector) else np.asarray(traits, dtype=float)
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(raw)) and np.isfinite(tau)):
        raise ValueError("ou_transition_moments received non-finite input")
    if tau < 0:
        raise ValueError("interval tau must be non-negative")
    m, w, r = transition_batch(z, raw, adjacency, float(tau))
    return TransitionMoments(m=m, w=float(w), r=float(r))


def trait_transition_step(s_prev, params):
    """p(s_n | s_(n-1)) = N(H * s_(n-1), diag(R))."""
    raw = s_prev.raw if isinstance(s_prev, TraitVector) else np.asarray(s_prev, dtype=float)
    return Gaussian(mean=params.h * raw, var=params.r.copy())


def emission_probability(z_k):
    """sigmoid(z) clamped to [1e-12, 1 - 1e-12]."""
    p = np.clip(expit(np.asarray(z_k, dtype=float)), EMISSION_EPS, 1.0 - EMISSION_EPS)
    return float(p) if p.ndim == 0 else p


class ScheduleFactory:
    """
    Creates practice schedules by name.
    New schedule kinds are added with register().
    """

    def __init__(self):
        self._schedule_types = {}

    def register(self, key, schedule_class):
        self._schedule_types[key] = schedule_class

    def __call__(self, key, **kwargs):
        if key not in self._schedule_types:
            raise ValueError(f"unknown schedule {key!r}; known: {sorted(self._schedule_types)}")
        return self._schedule_types[key](**kwargs)


class Schedule(ABC):
    """
    Per-learner sequence of (kc, time) pairs.

    Parameters:
        n_interactions (int): Interactions per learner.
        gap_mean (float): Mean gap between interactions in seconds.
        min_gap (float): Smallest gap; keeps times strictly increasing.
    """

    def __init__(self, n_interactions, gap_mean=86400.0, min_gap=1.0):
        if n_interactions < 1:
            raise ValueError("a schedule needs at least one interaction")
        self.n_interactions = n_interactions
        self.gap_mean = gap_mean
        self.min_gap = min_gap

    def times(self, rng):
        gaps = self.min_gap + rng.exponential(self.gap_mean, size=self.n_interactions - 1)
        return np.concatenate([[0.0], np.cumsum(gaps)])

    @abstractmethod
    def kcs(self, rng, adjacency):
        pass

    def __call__(self, rng, adjacency):
        kcs = self.kcs(rng, adjacency)
        return kcs, self.times(rng)


class UniformSchedule(Schedule):
    """KCs drawn uniformly at random."""

    def kcs(self, rng, adjacency):
        return rng.integers(0, adjacency.shape[0], size=self.n_interactions)


class CurriculumSchedule(Schedule):
    """
    KCs unlocked in prerequisite order: sources (high out-minus-in edge mass)
    first. Each step practises the newest unlocked KC with probability
    new_prob, otherwise an earlier unlocked one.
    """

    def __init__(self, n_interactions, gap_mean=86400.0, min_gap=1.0, new_prob=0.5):
        super().__init__(n_interactions, gap_mean, min_gap)
        self.new_prob = new_prob

    def kcs(self, rng, adjacency):
        n_kcs = adjacency.shape[0]
        order = np.argsort(-(adjacency.sum(axis=1) - adjacency.sum(axis=0)), kind="stable")
        kcs = np.empty(self.n_interactions, dtype=np.int64)
        for n in range(self.n_interactions):
            unlocked = 1 + (n * n_kcs) // self.n_interactions
            if unlocked == 1 or rng.random() < self.new_prob:
                kcs[n] = order[unlocked - 1]
            else:
                kcs[n] = order[rng.integers(0, unlocked - 1)]
        return kcs


schedule_factory = ScheduleFactory()
schedule_factory.register("uniform", UniformSchedule)
schedule_factory.register("curriculum", CurriculumSchedule)


@dataclass
class LatentTruth:
    """Hidden trajectories behind a simulated cohort."""
    params: GenerativeParams
    traits: dict
    states: dict

    def to_dict(self):
        return {
            "params": self.params.to_dict(),
            "adjacency": adjacency_matrix(self.params.graph).tolist(),
            "learners": {
                learner: {"traits": self.traits[learner].tolist(), "states": self.states[learner].tolist()}
                for learner in self.traits
            },
        }

    def save(self, filename):
        with open(filename, "w") as file:
            json.dump(self.to_dict(), file)

    @classmethod
    def load(cls, filename):
        with open(filename, "r") as file:
            data = json.load(file)
        return cls(
            params=GenerativeParams.from_dict(data["params"]),
            traits={k: np.array(v["traits"]) for k, v in data["learners"].items()},
            states={k: np.array(v["states"]) for k, v in data["learners"].items()},
        )


def _simulate_learner(params, adjacency, schedule, seed_sequence):
    rng = np.random.default_rng(seed_sequence)
    kcs, times = schedule(rng, adjacency)
    n_steps, n_kcs = len(kcs), adjacency.shape[0]
    traits = np.empty((n_steps, N_TRAITS))
    states = np.empty((n_steps, n_kcs))
    outcomes = np.empty(n_steps, dtype=np.int64)

    traits[0] = rng.normal(params.s_bar, np.sqrt(params.r1))
    states[0] = rng.normal(params.z_bar, np.sqrt(params.w1), size=n_kcs)
    for n in range(1, n_steps):
        step = trait_transition_step(traits[n - 1], params)
        traits[n] = rng.normal(step.mean, np.sqrt(step.var))
        moments = ou_transition_moments(states[n - 1], traits[n], adjacency, times[n] - times[n - 1])
        states[n] = rng.normal(moments.m, np.sqrt(moments.w))
    p = emission_probability(states[np.arange(n_steps), kcs])
    outcomes[:] = rng.random(n_steps) < p
    return kcs, times, outcomes, traits, states


def simulate_cohort(params, n_learners, schedule, seed, threads=1, kc_prefix="KC", learner_prefix="L"):
    """
    Draws a cohort from the generative model.

    Each learner gets its own random stream spawned from seed, so results do
    not depend on the number of worker threads.

    Parameters:
        params (GenerativeParams): Ground-truth parameters.
        n_learners (int): Number of learners.
        schedule (Schedule): Produces each learner's (kc, time) sequence.
        seed (int): Top-level seed.
        threads (int): Worker threads.

    Returns:
        tuple: (Cohort, LatentTruth)
    """
    adjacency = adjacency_matrix(params.graph)
    width = max(3, len(str(params.n_kcs - 1)))
    vocabulary = [f"{kc_prefix}{k:0{width}d}" for k in range(params.n_kcs)]
    learner_width = max(4, len(str(n_learners - 1)))
    learner_ids = [f"{learner_prefix}{idx:0{learner_width}d}" for idx in range(n_learners)]
    seeds = np.random.SeedSequence(seed).spawn(n_learners)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(lambda sq: _simulate_learner(params, adjacency, schedule, sq), seeds))

    cohort = Cohort([], vocabulary)
    histories, traits, states = [], {}, {}
    for learner_id, (kcs, times, outcomes, s, z) in zip(learner_ids, results):
        records = [
            InteractionRecord(learner_id, vocabulary[kc], float(t), int(y))
            for kc, t, y in zip(kcs, times, outcomes)
        ]
        histories.append(cohort.make_history(learner_id, records))
        traits[learner_id] = s
        states[learner_id] = z
    logging.info(f"Simulated {n_learners} learners over {params.n_kcs} KCs with {schedule.__class__.__name__}")
    return cohort.with_histories(histories), LatentTruth(params, traits, states)
