import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import stats
from scipy.special import betaln, logsumexp
from scipy.stats import qmc
from sklearn.metrics import accuracy_score, brier_score_loss, f1_score


DEFAULT_RIDGE = 1e-6


def classification_metrics(predictions):
    """
    Accuracy, F1 of the positive class and Brier score of (p, y) pairs.
    p >= 0.5 predicts 1.
    """
    if len(predictions) == 0:
        raise ValueError("classification_metrics needs at least one prediction")
    p = np.array([pair[0] for pair in predictions], dtype=float)
    y = np.array([pair[1] for pair in predictions], dtype=int)
    if np.any((p < 0) | (p > 1)):
        raise ValueError("predicted probabilities must lie in [0, 1]")
    y_hat = (p >= 0.5).astype(int)
    return (
        float(accuracy_score(y, y_hat)),
        float(f1_score(y, y_hat, zero_division=0)),
        float(brier_score_loss(y, p, pos_label=1)) if len(np.unique(y)) > 1 else float(np.mean((p - y) ** 2)),
    )


@dataclass
class RepresentationSample:
    """
    Covariances of trait representations.

    pooled_cov is estimated over all rows, learner_covs per learner and
    subset_covs per (learner, subset) for the consistency metric.
    """
    pooled_cov: np.ndarray
    learner_covs: dict
    subset_covs: dict = field(default_factory=dict)

    @property
    def dim(self):
        return self.pooled_cov.shape[0]

    @classmethod
    def from_rows(cls, learner_ids, vectors, subset_labels=None):
        """
        Maximum-likelihood covariances (divisor n) from representation rows.

        Raises:
            ValueError: If an estimate has fewer than d + 1 rows.
        """
        vectors = np.atleast_2d(np.asarray(vectors, dtype=float))
        learner_ids = np.asarray(learner_ids)
        dim = vectors.shape[1]

        def covariance(rows, label):
            if rows.shape[0] < dim + 1:
                raise ValueError(f"{label} has {rows.shape[0]} rows, needs at least {dim + 1}")
            return np.atleast_2d(np.cov(rows, rowvar=False, bias=True))

        pooled = covariance(vectors, "pooled sample")
        learner_covs, subset_covs = {}, {}
        for learner in pd.unique(learner_ids):
            rows = learner_ids == learner
            learner_covs[learner] = covariance(vectors[rows], f"learner {learner}")
            if subset_labels is not None:
                labels = np.asarray(subset_labels)[rows]
                subset_covs[learner] = [
                    covariance(vectors[rows][labels == label], f"subset {label} of {learner}")
                    for label in pd.unique(labels)
                ]
        return cls(pooled, learner_covs, subset_covs)


def log_determinant(cov, ridge=DEFAULT_RIDGE):
    """
    Raises:
        ValueError: If cov + ridge * I is not positive definite.
    """
    cov = np.atleast_2d(cov)
    sign, logdet = np.linalg.slogdet(cov + ridge * np.eye(cov.shape[0]))
    if sign <= 0:
        raise ValueError("covariance is singular after ridge regularisation")
    return float(logdet)


def specificity_mi(sample, ridge=DEFAULT_RIDGE):
    """Gaussian mutual information between representation and learner identity."""
    pooled = log_determinant(sample.pooled_cov, ridge)
    within = np.mean([log_determinant(cov, ridge) for cov in sample.learner_covs.values()])
    return 0.5 * (pooled - within)


def consistency_mi(sample, ridge=DEFAULT_RIDGE):
    """
    Average over learners of 1/2 (log|S_learner| - mean_sub log|S_sub|).

    Raises:
        ValueError: If a learner has fewer than two subsets.
    """
    if not sample.subset_covs:
        raise ValueError("consistency_mi needs subset covariances")
    values = []
    for learner, subsets in sample.subset_covs.items():
        if len(subsets) < 2:
            raise ValueError(f"learner {learner} has fewer than two subsets")
        learner_logdet = log_determinant(sample.learner_covs[learner], ridge)
        values.append(0.5 * (learner_logdet - np.mean([log_determinant(cov, ridge) for cov in subsets])))
    return float(np.mean(values))


def disentanglement_kl(sample, ridge=DEFAULT_RIDGE):
    """1/2 (log|S_pooled| - mean over learners of sum_i log S_learner[i, i])."""
    pooled = log_determinant(sample.pooled_cov, ridge)
    diagonals = []
    for cov in sample.learner_covs.values():
        diagonal = np.diag(np.atleast_2d(cov)) + ridge
        if np.any(diagonal <= 0):
            raise ValueError("covariance is singular after ridge regularisation")
        diagonals.append(np.sum(np.log(diagonal)))
    return 0.5 * (pooled - float(np.mean(diagonals)))


def mrr_expert(adjacency, expert_edges):
    """
    Mean reciprocal rank of expert edges (i, k): a[i, k] is ranked among
    the candidate prerequisites a[j, k], j != k, descending, ties averaged.
    """
    adjacency = np.asarray(adjacency, dtype=float)
    if len(expert_edges) == 0:
        raise ValueError("mrr_expert needs at least one expert edge")
    n_kcs = adjacency.shape[0]
    reciprocal = []
    for i, k in expert_edges:
        if i == k or not (0 <= i < n_kcs and 0 <= k < n_kcs):
            raise ValueError(f"invalid expert edge ({i}, {k})")
        candidates = [j for j in range(n_kcs) if j != k]
        ranks = stats.rankdata(-adjacency[candidates, k], method="average")
        reciprocal.append(1.0 / ranks[candidates.index(i)])
    return float(np.mean(reciprocal))


def jaccard_edges(set_a, set_b):
    """|A & B| / |A | B|; two empty sets give 1."""
    set_a, set_b = set(set_a), set(set_b)
    union = set_a | set_b
    if not union:
        return 1.0
    return len(set_a & set_b) / len(union)


def inferred_edges(adjacency, threshold=0.5):
    sources, targets = np.nonzero(np.asarray(adjacency) > threshold)
    return set(zip(sources.tolist(), targets.tolist()))


def rescale_rating(rating):
    return (np.asarray(rating, dtype=float) - 1.0) / 8.0


def rating_nll(adjacency, annotations, kc_index, sigma_floor=0.05):
    """
    Mean negative log-likelihood of model probabilities under per-pair
    Gaussians fitted to crowd ratings rescaled to [0, 1].

    Parameters:
        adjacency (array): K x K probabilities compared with the ratings.
        annotations (list): GraphAnnotation objects with ratings.
        kc_index (dict): kc_id -> index.
        sigma_floor (float): Smallest standard deviation.
    """
    adjacency = np.asarray(adjacency, dtype=float)
    nll = []
    for annotation in annotations:
        if not annotation.ratings:
            continue
        ratings = rescale_rating(annotation.ratings)
        scale = np.std(ratings, ddof=1) if len(ratings) > 1 else 0.0
        scale = max(scale, sigma_floor)
        value = adjacency[kc_index[annotation.source_kc], kc_index[annotation.target_kc]]
        nll.append(-stats.norm.logpdf(value, loc=ratings.mean(), scale=scale))
    if not nll:
        raise ValueError("rating_nll needs at least one rated pair")
    return float(np.mean(nll))


@dataclass(frozen=True)
class CausalCounts:
    """Consecutive-transition counts; p/m = correct/incorrect, effect first."""
    n_pp: int = 0
    n_pm: int = 0
    n_mp: int = 0
    n_mm: int = 0

    def __post_init__(self):
        if min(self.n_pp, self.n_pm, self.n_mp, self.n_mm) < 0:
            raise ValueError("causal counts must be non-negative")

    @property
    def total(self):
        return self.n_pp + self.n_pm + self.n_mp + self.n_mm


def _uniform_points(mc_samples, seed, sampler):
    if sampler == "sobol":
        engine = qmc.Sobol(d=2, scramble=True, seed=seed)
        return engine.random_base2(int(np.ceil(np.log2(max(mc_samples, 2)))))
    if sampler == "random":
        return np.random.default_rng(seed).random((mc_samples, 2))
    raise ValueError(f"unknown sampler {sampler!r}")


def causal_support(counts, mc_samples=10000, seed=0, sampler="sobol"):
    """
    Log Bayes factor of a noisy-OR causal link (background w0, strength w1,
    both uniform) against background only.

    The no-link marginal likelihood is a Beta function in closed form; the
    link marginal likelihood is averaged over (w0, w1) points in log space.
    Scrambled Sobol points are used by default, sampler="random" uses plain
    uniform draws.
    """
    log_g0 = betaln(counts.n_pp + counts.n_pm + 1, counts.n_mp + counts.n_mm + 1)
    points = _uniform_points(mc_samples, seed, sampler)
    w0 = np.clip(points[:, 0], 1e-300, 1.0 - 1e-16)
    w1 = np.clip(points[:, 1], 0.0, 1.0 - 1e-16)
    # P(e- | c+) = (1 - w0)(1 - w1)
    log_fail_with_cause = np.log1p(-w0) + np.log1p(-w1)
    terms = (
        (counts.n_pp, np.log1p(-np.exp(log_fail_with_cause))),
        (counts.n_pm, np.log(w0)),
        (counts.n_mm, np.log1p(-w0)),
        (counts.n_mp, log_fail_with_cause),
    )
    # empty cells contribute nothing, even where their log is -inf
    log_likelihood = sum(n * values for n, values in terms if n > 0) + np.zeros(len(w0))
    log_g1 = logsumexp(log_likelihood) - np.log(len(log_likelihood))
    return float(log_g1 - log_g0)


def transition_counts(histories, n_kcs):
    """
    Tallies consecutive (KC i at step n, KC k at step n + 1) pairs by the
    outcome of the cause (i) and the effect (k). Self-transitions are skipped.

    Returns:
        array: (K, K, 4) counts in the order n_pp, n_pm, n_mp, n_mm.
    """
    table = np.zeros((n_kcs, n_kcs, 4), dtype=np.int64)
    for history in histories:
        cause, effect = history.kcs[:-1], history.kcs[1:]
        y_cause, y_effect = history.outcomes[:-1], history.outcomes[1:]
        keep = cause != effect
        cell = np.where(y_effect == 1, np.where(y_cause == 1, 0, 1), np.where(y_cause == 1, 2, 3))
        np.add.at(table, (cause[keep], effect[keep], cell[keep]), 1)
    return table


def causal_support_table(cohort, kc_pairs=None, mc_samples=10000, seed=0, threads=1, sampler="sobol"):
    """
    Causal support of every KC pair with more than one observed transition.

    Returns:
        dict: (i, k) -> support
    """
    if len(cohort) == 0:
        raise ValueError("causal_support_table needs a non-empty cohort")
    table = transition_counts(cohort.histories, cohort.n_kcs)
    if kc_pairs is None:
        kc_pairs = [(i, k) for i in range(cohort.n_kcs) for k in range(cohort.n_kcs) if i != k]
    pairs = [(i, k) for i, k in kc_pairs if table[i, k].sum() > 1]

    def support(pair):
        return causal_support(CausalCounts(*(int(c) for c in table[pair])), mc_samples, seed, sampler)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        values = list(pool.map(support, pairs))
    logging.info(f"causal_support_table: {len(pairs)} pairs with more than one transition")
    return dict(zip(pairs, values))


@dataclass
class RegressionResult:
    slope: float
    p_value: float
    n_rows: int
    n_learners: int
    bins: pd.DataFrame = None

    def to_dict(self):
        return {"slope": self.slope, "p_value": self.p_value, "n_rows": self.n_rows, "n_learners": self.n_learners}


def equal_count_bins(x, y, n_bins=10):
    """Equal-count bins of x with the mean x (bin centre), mean y and SEM of y."""
    order = np.argsort(x, kind="stable")
    rows = []
    for chunk in np.array_split(order, min(n_bins, len(order))):
        if len(chunk) == 0:
            continue
        rows.append({
            "bin_center": float(np.mean(x[chunk])),
            "mean": float(np.mean(y[chunk])),
            "sem": float(stats.sem(y[chunk])) if len(chunk) > 1 else 0.0,
            "count": int(len(chunk)),
        })
    return pd.DataFrame(rows, columns=["bin_center", "mean", "sem", "count"])


def regress_with_learner_intercepts(rows, decile_bins=False):
    """
    Within-learner (fixed intercept) regression of y on x.

    x and y are demeaned per learner; the slope is the pooled OLS slope and
    its two-sided p-value uses a t distribution with N - L - 1 degrees of
    freedom.

    Parameters:
        rows (iterable): (learner, x, y) triples.
        decile_bins (bool): Also return ten equal-count bins of x.

    Returns:
        RegressionResult: Slope, p-value and optional bins.

    Raises:
        ValueError: With fewer than 2 learners, fewer than 3 rows for some
            learner, or constant demeaned x.
    """
    frame = pd.DataFrame(list(rows), columns=["learner", "x", "y"])
    sizes = frame.groupby("learner", sort=False).size()
    if len(sizes) < 2:
        raise ValueError("regression needs at least two learners")
    if sizes.min() < 3:
        raise ValueError("regression needs at least three rows per learner")
    x = (frame["x"] - frame.groupby("learner", sort=False)["x"].transform("mean")).to_numpy()
    y = (frame["y"] - frame.groupby("learner", sort=False)["y"].transform("mean")).to_numpy()
    sxx = float(x @ x)
    if sxx <= 1e-12 * max(1.0, float(np.abs(frame["x"]).max()) ** 2):
        raise ValueError("x is constant within learners")
    slope = float(x @ y) / sxx
    n_rows, n_learners = len(frame), len(sizes)
    dof = n_rows - n_learners - 1
    residuals = y - slope * x
    if dof <= 0:
        p_value = float("nan")
    else:
        sigma2 = float(residuals @ residuals) / dof
        standard_error = np.sqrt(sigma2 / sxx)
        if standard_error == 0:
            p_value = 0.0
        else:
            p_value = float(2.0 * stats.t.sf(abs(slope / standard_error), dof))
    bins = equal_count_bins(frame["x"].to_numpy(), frame["y"].to_numpy()) if decile_bins else None
    return RegressionResult(slope, p_value, n_rows, n_learners, bins)


def regress_support_on_edges(support_table, adjacency):
    """Pooled OLS of causal support on the inferred edge probability."""
    if len(support_table) < 3:
        raise ValueError("need at least three KC pairs with causal support")
    pairs = sorted(support_table)
    x = np.array([adjacency[i, k] for i, k in pairs])
    y = np.array([support_table[pair] for pair in pairs])
    fit = stats.linregress(x, y)
    return {"slope": float(fit.slope), "p_value": float(fit.pvalue), "r": float(fit.rvalue), "n_pairs": len(pairs)}


@dataclass
class MetricReport:
    metrics: dict
    metadata: dict = field(default_factory=dict)

    def all_finite(self):
        return all(np.isfinite(v) for v in self.metrics.values())

    def to_dict(self):
        return {"metrics": dict(sorted(self.metrics.items())), "metadata": dict(sorted(self.metadata.items()))}

    def save(self, filename):
        with open(filename, "w") as file:
            json.dump(self.to_dict(), file, indent=2)
