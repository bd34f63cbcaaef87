import itertools
import json
from math import comb

import numpy as np
import pytest
from scipy import stats
from scipy.integrate import simpson
from scipy.special import betaln
from src.KnowledgeTracing.data import Cohort, GraphAnnotation, InteractionHistory, InteractionRecord
from src.KnowledgeTracing.metrics import (
    CausalCounts,
    MetricReport,
    RepresentationSample,
    causal_support,
    causal_support_table,
    classification_metrics,
    consistency_mi,
    disentanglement_kl,
    equal_count_bins,
    inferred_edges,
    jaccard_edges,
    log_determinant,
    mrr_expert,
    rating_nll,
    regress_support_on_edges,
    regress_with_learner_intercepts,
    specificity_mi,
    transition_counts,
)

E = np.e


def make_history(learner_id, pairs, kc_index):
    records = [InteractionRecord(learner_id, kc, float(t), y) for t, (kc, y) in enumerate(pairs)]
    return InteractionHistory(learner_id, records, kc_index)


def quadrature_support(counts, n_grid=201):
    """
    log Bayes factor with the link marginal from 2-D Simpson quadrature
    """
    grid = np.linspace(0.0, 1.0, n_grid)
    w0, w1 = np.meshgrid(grid, grid, indexing="ij")
    with np.errstate(divide="ignore"):
        factors = (
            (counts.n_pp, np.log(w0 + w1 - w0 * w1)),
            (counts.n_pm, np.log(w0)),
            (counts.n_mm, np.log(1.0 - w0)),
            (counts.n_mp, np.log((1.0 - w0) * (1.0 - w1))),
        )
    log_integrand = sum(n * values for n, values in factors if n > 0) + np.zeros_like(w0)
    peak = log_integrand.max()
    inner = simpson(np.exp(log_integrand - peak), x=grid, axis=1)
    log_g1 = peak + np.log(simpson(inner, x=grid))
    return log_g1 - betaln(counts.n_pp + counts.n_pm + 1, counts.n_mp + counts.n_mm + 1)


@pytest.mark.parametrize("predictions, expected", [
    ([(1.0, 1), (0.0, 0), (1.0, 1)], (1.0, 1.0, 0.0)),  # perfect
    ([(0.5, 1), (0.5, 0), (0.5, 1), (0.5, 0)], (0.5, 2 / 3, 0.25)),  # ties predict 1
    ([(0.9, 1), (0.4, 1), (0.6, 0), (0.2, 0)], (0.5, 0.5, 0.1925)),  # one of each confusion cell
])
def test_classification_metrics(predictions, expected):
    assert classification_metrics(predictions) == pytest.approx(expected, abs=1e-12)


def test_classification_single_class_brier():
    accuracy, f1, brier = classification_metrics([(0.8, 1), (0.6, 1)])

    assert (accuracy, f1) == (1.0, 1.0)
    assert brier == pytest.approx((0.04 + 0.16) / 2, abs=1e-12)


def test_classification_rejects_invalid():
    with pytest.raises(ValueError):
        classification_metrics([])
    with pytest.raises(ValueError):
        classification_metrics([(1.5, 1)])


def test_specificity_cancels_for_equal_covariances():
    cov = np.array([[2.0, 0.3], [0.3, 1.0]])
    sample = RepresentationSample(cov, {"L1": cov, "L2": cov})

    assert specificity_mi(sample) == pytest.approx(0.0, abs=1e-12)


def test_specificity_closed_form():
    sample = RepresentationSample(np.diag([E, E]), {"L1": np.eye(2), "L2": np.eye(2)})

    assert specificity_mi(sample, ridge=0.0) == pytest.approx(1.0, abs=1e-9)


def test_constant_representations_give_zero():
    learners = ["L1"] * 3 + ["L2"] * 3
    sample = RepresentationSample.from_rows(learners, np.ones((6, 2)))

    assert specificity_mi(sample) == pytest.approx(0.0, abs=1e-9)


def test_consistency_closed_form():
    sample = RepresentationSample(np.eye(2), {"L1": np.diag([E, E])}, {"L1": [np.eye(2), np.eye(2)]})

    assert consistency_mi(sample, ridge=0.0) == pytest.approx(1.0, abs=1e-9)


def test_consistency_of_duplicated_subsets():
    cov = np.array([[1.0, 0.2], [0.2, 0.5]])
    sample = RepresentationSample(cov, {"L1": cov}, {"L1": [cov, cov]})

    assert consistency_mi(sample) == pytest.approx(0.0, abs=1e-12)


def test_consistency_needs_two_subsets():
    sample = RepresentationSample(np.eye(2), {"L1": np.eye(2)}, {"L1": [np.eye(2)]})

    with pytest.raises(ValueError):
        consistency_mi(sample)
    with pytest.raises(ValueError):
        consistency_mi(RepresentationSample(np.eye(2), {"L1": np.eye(2)}))


def test_disentanglement_closed_form():
    sample = RepresentationSample(np.eye(2), {"L1": np.diag([1 / E, 1 / E])})

    assert disentanglement_kl(sample, ridge=0.0) == pytest.approx(1.0, abs=1e-9)


def test_disentanglement_of_diagonal_covariances():
    cov = np.diag([0.5, 3.0])
    sample = RepresentationSample(cov, {"L1": cov, "L2": cov})

    assert disentanglement_kl(sample) == pytest.approx(0.0, abs=1e-9)
    assert disentanglement_kl(sample) == pytest.approx(specificity_mi(sample), abs=1e-12)


def test_correlation_separates_specificity_from_disentanglement():
    """
    the determinant of a correlated covariance is below the product of its diagonal
    """
    correlated = np.array([[1.0, 0.9], [0.9, 1.0]])
    sample = RepresentationSample(np.diag([2.0, 2.0]), {"L1": correlated, "L2": correlated})

    assert specificity_mi(sample) > disentanglement_kl(sample)


def test_from_rows_covariances():
    rng = np.random.default_rng(0)
    vectors = rng.normal(size=(12, 2))
    learners = ["A"] * 6 + ["B"] * 6
    subsets = [0, 0, 0, 1, 1, 1] * 2
    sample = RepresentationSample.from_rows(learners, vectors, subsets)

    np.testing.assert_allclose(sample.pooled_cov, np.cov(vectors, rowvar=False, bias=True))
    np.testing.assert_allclose(sample.learner_covs["B"], np.cov(vectors[6:], rowvar=False, bias=True))
    assert len(sample.subset_covs["A"]) == 2


def test_from_rows_needs_enough_rows():
    with pytest.raises(ValueError):
        RepresentationSample.from_rows(["A", "A", "B", "B", "B"], np.zeros((5, 2)))


def test_singular_covariance_is_error():
    with pytest.raises(ValueError):
        log_determinant(np.zeros((2, 2)), ridge=0.0)


@pytest.fixture
def column_adjacency():
    """
    column 0 ranks KC 1 first and KC 2 second
    """
    return np.array([
        [0.0, 0.2, 0.1],
        [0.9, 0.0, 0.3],
        [0.4, 0.6, 0.0],
    ])


def test_mrr_perfect_ranking(column_adjacency):
    assert mrr_expert(column_adjacency, [(1, 0), (2, 1)]) == 1.0


def test_mrr_second_rank(column_adjacency):
    assert mrr_expert(column_adjacency, [(2, 0)]) == 0.5


def test_mrr_ties_are_averaged():
    adjacency = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])

    assert mrr_expert(adjacency, [(0, 1)]) == pytest.approx(1 / 1.5)


def test_mrr_matches_enumeration():
    rng = np.random.default_rng(5)
    adjacency = rng.random((4, 4))
    np.fill_diagonal(adjacency, 0.0)
    edges = [(0, 2), (3, 1)]

    reciprocal = []
    for i, k in edges:
        others = [adjacency[j, k] for j in range(4) if j != k]
        rank = 1 + sum(value > adjacency[i, k] for value in others)
        reciprocal.append(1.0 / rank)
    assert mrr_expert(adjacency, edges) == pytest.approx(np.mean(reciprocal))


def test_mrr_rejects_bad_edges(column_adjacency):
    with pytest.raises(ValueError):
        mrr_expert(column_adjacency, [])
    with pytest.raises(ValueError):
        mrr_expert(column_adjacency, [(1, 1)])


@pytest.mark.parametrize("set_a, set_b, expected", [
    ({(1, 2), (2, 3)}, {(2, 3), (3, 4)}, 1 / 3),  # one shared edge
    ({(1, 2)}, {(1, 2)}, 1.0),  # identical
    ({(1, 2)}, {(2, 1)}, 0.0),  # disjoint
    (set(), set(), 1.0),  # both empty
])
def test_jaccard_edges(set_a, set_b, expected):
    assert jaccard_edges(set_a, set_b) == pytest.approx(expected)


def test_inferred_edges_threshold(column_adjacency):
    assert inferred_edges(column_adjacency, 0.5) == {(1, 0), (2, 1)}


def test_rating_nll_at_mean_uses_floor():
    annotation = GraphAnnotation("A", "B", "prerequisite", (5.0, 5.0), expert=False)
    adjacency = np.array([[0.0, 0.5], [0.0, 0.0]])

    value = rating_nll(adjacency, [annotation], {"A": 0, "B": 1}, sigma_floor=0.05)
    assert value == pytest.approx(-2.0767, abs=1e-4)
    assert value == pytest.approx(np.log(0.05) + 0.5 * np.log(2 * np.pi), abs=1e-12)


def test_rating_nll_grows_away_from_mean():
    annotation = GraphAnnotation("A", "B", "prerequisite", (3.0, 5.0, 7.0), expert=False)
    kc_index = {"A": 0, "B": 1}
    near = rating_nll(np.array([[0.0, 0.5], [0.0, 0.0]]), [annotation], kc_index)
    far = rating_nll(np.array([[0.0, 0.9], [0.0, 0.0]]), [annotation], kc_index)

    assert far > near


def test_rating_nll_needs_ratings():
    with pytest.raises(ValueError):
        rating_nll(np.zeros((2, 2)), [GraphAnnotation("A", "B", "prerequisite", (), expert=True)], {"A": 0, "B": 1})


def test_causal_support_of_empty_counts():
    assert causal_support(CausalCounts()) == pytest.approx(0.0, abs=1e-3)


@pytest.mark.parametrize("n", [1, 5, 20])
def test_causal_support_without_effects(n):
    assert causal_support(CausalCounts(n_mm=n)) == pytest.approx(0.0, abs=1e-3)


def test_causal_support_matches_quadrature():
    counts = CausalCounts(n_pp=5)
    expected = quadrature_support(counts)

    # E[(1 - (1 - w0)(1 - w1))^5] expanded term by term
    closed_form = sum((-1) ** j * comb(5, j) / (j + 1) ** 2 for j in range(6))
    assert expected == pytest.approx(np.log(closed_form) - np.log(1 / 6), abs=1e-6)
    assert causal_support(counts, mc_samples=10**5) == pytest.approx(expected, abs=1e-2)


def test_causal_support_random_tables():
    rng = np.random.default_rng(11)
    for seed in range(20):
        total = int(rng.integers(0, 51))
        cells = rng.multinomial(total, rng.dirichlet(np.ones(4)))
        counts = CausalCounts(*(int(c) for c in cells))
        estimate = causal_support(counts, mc_samples=10**5, seed=seed)

        assert estimate == pytest.approx(quadrature_support(counts), abs=1e-2), f"counts {counts}"


def test_causal_support_prefers_effects_after_causes():
    supportive = causal_support(CausalCounts(n_pp=12, n_pm=1, n_mp=1, n_mm=12))
    opposing = causal_support(CausalCounts(n_pp=1, n_pm=12, n_mp=12, n_mm=1))

    assert supportive > opposing


def test_causal_support_is_deterministic():
    counts = CausalCounts(3, 1, 2, 4)

    assert causal_support(counts, seed=3) == causal_support(counts, seed=3)
    assert np.isfinite(causal_support(counts, mc_samples=500, sampler="random"))
    with pytest.raises(ValueError):
        causal_support(counts, sampler="grid")


def test_negative_counts_are_error():
    with pytest.raises(ValueError):
        CausalCounts(n_pp=-1)


@pytest.fixture
def transition_cohort():
    """
    two learners each showing A (correct) then B (correct) once, one learner
    showing B then C once
    """
    kc_index = {"A": 0, "B": 1, "C": 2}
    histories = [
        make_history("L1", [("A", 1), ("B", 1)], kc_index),
        make_history("L2", [("A", 1), ("B", 1), ("B", 0)], kc_index),
        make_history("L3", [("B", 0), ("C", 1)], kc_index),
    ]
    return Cohort(histories, ["A", "B", "C"])


def test_transition_counts(transition_cohort):
    table = transition_counts(transition_cohort.histories, 3)

    np.testing.assert_array_equal(table[0, 1], [2, 0, 0, 0])
    np.testing.assert_array_equal(table[1, 2], [0, 1, 0, 0])
    assert table[1, 1].sum() == 0, "Self-transitions are skipped."
    assert table.sum() == 3


def test_support_table_omits_single_transitions(transition_cohort):
    table = causal_support_table(transition_cohort, mc_samples=1024)

    assert list(table) == [(0, 1)]
    assert table[(0, 1)] == pytest.approx(causal_support(CausalCounts(n_pp=2), mc_samples=1024))


def test_support_table_threads_agree(transition_cohort):
    assert causal_support_table(transition_cohort, threads=1) == causal_support_table(transition_cohort, threads=3)


def test_regression_exact_line():
    rows = []
    for learner, offset in (("A", 1.0), ("B", -3.0), ("C", 10.0)):
        rows += [(learner, x, 2.0 * x + offset) for x in (0.0, 1.0, 2.5, 4.0)]
    result = regress_with_learner_intercepts(rows)

    assert result.slope == pytest.approx(2.0, abs=1e-12)
    assert result.p_value < 1e-10
    assert (result.n_rows, result.n_learners) == (12, 3)


def test_regression_hand_case():
    rows = [
        ("A", 1.0, 1.0), ("A", 2.0, 3.0), ("A", 3.0, 2.0),
        ("B", 0.0, 1.0), ("B", 2.0, 1.0), ("B", 4.0, 4.0),
    ]
    result = regress_with_learner_intercepts(rows)

    standard_error = np.sqrt(3.1 / 3 / 10.0)
    assert result.slope == pytest.approx(0.7, abs=1e-12)
    assert result.p_value == pytest.approx(2 * stats.t.sf(0.7 / standard_error, 3), abs=1e-12)


def test_regression_of_independent_data():
    significant = 0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        learners = np.repeat(np.arange(10), 20)
        x, y = rng.normal(size=200), rng.normal(size=200) + learners
        significant += regress_with_learner_intercepts(zip(learners, x, y)).p_value <= 0.05
    assert significant <= 7


@pytest.mark.parametrize("rows", [
    [("A", 0.0, 1.0), ("A", 1.0, 2.0), ("A", 2.0, 3.0)],  # one learner
    [("A", 0.0, 1.0), ("A", 1.0, 2.0), ("B", 0.0, 1.0), ("B", 1.0, 2.0), ("B", 2.0, 0.0)],  # two rows for A
    [("A", 1.0, 1.0), ("A", 1.0, 2.0), ("A", 1.0, 0.0), ("B", 3.0, 1.0), ("B", 3.0, 2.0), ("B", 3.0, 0.0)],  # constant x
])
def test_regression_errors(rows):
    with pytest.raises(ValueError):
        regress_with_learner_intercepts(rows)


def test_regression_bins():
    rows = [(learner, float(x), float(x % 7)) for learner in ("A", "B") for x in range(50)]
    result = regress_with_learner_intercepts(rows, decile_bins=True)

    assert list(result.bins.columns) == ["bin_center", "mean", "sem", "count"]
    assert result.bins["count"].tolist() == [10] * 10
    assert result.bins["bin_center"].is_monotonic_increasing


def test_equal_count_bins_with_few_rows():
    bins = equal_count_bins(np.array([3.0, 1.0, 2.0]), np.array([0.0, 1.0, 0.0]))

    assert bins["count"].tolist() == [1, 1, 1]
    assert bins["sem"].tolist() == [0.0, 0.0, 0.0]


def test_support_regressed_on_edges():
    adjacency = np.array([[0.0, 0.1, 0.5], [0.2, 0.0, 0.9], [0.4, 0.3, 0.0]])
    table = {pair: 3.0 * adjacency[pair] - 1.0 for pair in itertools.permutations(range(3), 2)}
    fit = regress_support_on_edges(table, adjacency)

    assert fit["slope"] == pytest.approx(3.0)
    assert fit["n_pairs"] == 6
    with pytest.raises(ValueError):
        regress_support_on_edges({(0, 1): 1.0}, adjacency)


def test_metric_report(tmp_path):
    report = MetricReport({"b": 1.0, "a": 0.5}, {"seed": 3})
    path = tmp_path / "metrics.json"
    report.save(str(path))

    assert report.all_finite()
    assert not MetricReport({"a": float("nan")}).all_finite()
    with open(path) as file:
        assert list(json.load(file)["metrics"]) == ["a", "b"]
