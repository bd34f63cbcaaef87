import numpy as np
import pytest
from src.KnowledgeTracing.data import write_interactions
from src.KnowledgeTracing.dynamics import (
    CurriculumSchedule,
    GenerativeParams,
    KnowledgeState,
    LatentTruth,
    TraitVector,
    UniformSchedule,
    emission_probability,
    ou_transition_moments,
    retention_ratio,
    schedule_factory,
    simulate_cohort,
    trait_transition_step,
    transition_variance,
    uses_series,
)
from src.KnowledgeTracing.graph import PrerequisiteGraph


def single_kc_params(log_sigma=0.5 * np.log(2e-5), w1=1.0, trait_var=1e-12):
    """
    K=1 model whose traits stay at s_bar
    """
    return GenerativeParams(
        graph=PrerequisiteGraph(np.zeros((1, 2)), np.zeros((2, 2))),
        s_bar=np.array([np.log(1e-5), 0.0, log_sigma, 0.0]),
        r1=np.full(4, trait_var),
        h=np.ones(4),
        r=np.full(4, trait_var),
        z_bar=0.0,
        w1=w1,
    )


@pytest.mark.parametrize("alpha, tau, expected", [
    (0.3, 0.0, 1.0),  # no elapsed time
    (np.log(2.0), 1.0, 0.5),  # half-life of one second
    (0.1, 10.0, np.exp(-1.0)),  # 0.367879
])
def test_retention_ratio(alpha, tau, expected):
    assert retention_ratio(alpha, tau) == pytest.approx(expected, abs=1e-15)


@pytest.mark.parametrize("alpha, tau", [
    (0.0, 1.0),  # zero rate
    (-1.0, 1.0),  # negative rate
    (1.0, -1.0),  # negative interval
])
def test_retention_ratio_rejects_invalid(alpha, tau):
    with pytest.raises(ValueError):
        retention_ratio(alpha, tau)


def test_transition_variance_hand_case():
    assert transition_variance(0.5, 1.0, 2.0) == pytest.approx(0.864665, abs=1e-6)
    assert transition_variance(0.5, 1.0, 2.0) == pytest.approx(1.0 - np.exp(-2.0), abs=1e-15)


def test_taylor_branch_for_tiny_rates():
    assert transition_variance(1e-9, 1.0, 1.0) == pytest.approx(1.0, abs=1e-8)
    assert np.isfinite(transition_variance(1e-300, 2.0, 1.0))


def test_series_matches_exact_formula():
    alpha, sigma, tau = 1e-4, 1.0, 1.0
    x = 2.0 * alpha * tau
    series = sigma**2 * tau * (1.0 - x / 2.0 + x**2 / 6.0)

    assert transition_variance(alpha, sigma, tau) == pytest.approx(series, rel=1e-11)


@pytest.mark.parametrize("alpha, tau, expected", [
    (0.99e-6, 1.0, True),  # just below the threshold
    (1.01e-6, 1.0, False),  # just above
    (0.6e-6, 1.0, True),  # 2 alpha tau above, alpha tau below
    (1e-9, 999.0, True),  # small product from a long interval
    (1e-9, 1001.0, False),
])
def test_series_threshold_on_alpha_tau(alpha, tau, expected):
    assert bool(uses_series(alpha, tau)) is expected
    exact = -np.expm1(-2.0 * alpha * tau) / (2.0 * alpha)
    assert transition_variance(alpha, 1.0, tau) == pytest.approx(exact, rel=1e-9)


def test_variance_continuous_across_branches():
    for alpha in (0.49e-6, 0.51e-6):
        exact = 1.3**2 * -np.expm1(-2.0 * alpha) / (2.0 * alpha)
        assert transition_variance(alpha, 1.3, 1.0) == pytest.approx(exact, rel=1e-9)


def test_variance_monotone_and_bounded():
    taus = np.array([0.0, 1.0, 10.0, 100.0, 300.0, 1e4])
    w = transition_variance(np.full(6, 0.01), np.full(6, 2.0), taus)

    assert np.all(np.diff(w[:5]) > 0)
    assert np.all(w <= 4.0 / 0.02 + 1e-12), "Bounded by the stationary variance."
    assert w[-1] == pytest.approx(200.0)


def test_moments_approach_structural_mean_for_large_rate():
    adjacency = np.array([[0.0, 0.4], [0.0, 0.0]])
    traits = TraitVector.from_decoded(alpha=1e4, mu=0.3, sigma=2.0, gamma=1.0)
    moments = ou_transition_moments(KnowledgeState(np.array([2.0, -1.0])), traits, adjacency, tau=1.0)

    np.testing.assert_allclose(moments.m, [0.3, 0.3 + 0.5 * 0.4 * 2.0], atol=1e-12)
    assert moments.w == pytest.approx(4.0 / 2e4)
    assert moments.r == pytest.approx(0.0, abs=1e-300)


def test_moments_are_convex_combination():
    adjacency = np.array([[0.0, 0.2, 0.1], [0.7, 0.0, 0.3], [0.5, 0.1, 0.0]])
    z = np.array([1.0, -0.5, 2.0])
    traits = TraitVector.from_decoded(alpha=0.05, mu=-0.2, sigma=1.0, gamma=0.6)
    moments = ou_transition_moments(z, traits, adjacency, tau=7.0)

    mu_tilde = -0.2 + 0.6 / 3 * (z @ adjacency)
    np.testing.assert_allclose(moments.m, moments.r * z + (1.0 - moments.r) * mu_tilde, atol=1e-14)
    assert 0.0 < moments.r <= 1.0


def test_chapman_kolmogorov():
    """
    two transitions with fixed traits compose into one
    """
    adjacency = np.zeros((2, 2))
    traits = TraitVector.from_decoded(alpha=0.03, mu=0.8, sigma=1.7, gamma=0.0)
    z = np.array([-1.5, 2.5])
    tau1, tau2 = 4.0, 11.0

    first = ou_transition_moments(z, traits, adjacency, tau1)
    second = ou_transition_moments(first.m, traits, adjacency, tau2)
    direct = ou_transition_moments(z, traits, adjacency, tau1 + tau2)

    np.testing.assert_allclose(second.m, direct.m, atol=1e-10)
    assert second.r**2 * first.w + second.w == pytest.approx(direct.w, abs=1e-10)


def test_moments_reject_non_finite():
    traits = TraitVector.from_decoded(alpha=0.1, mu=0.0, sigma=1.0, gamma=0.0)
    with pytest.raises(ValueError):
        ou_transition_moments(np.array([np.nan]), traits, np.zeros((1, 1)), 1.0)
    with pytest.raises(ValueError):
        ou_transition_moments(np.array([0.0]), traits, np.zeros((1, 1)), np.inf)


def test_trait_vector_decoding():
    traits = TraitVector.from_decoded(alpha=2e-5, mu=-0.3, sigma=0.4, gamma=1.2)

    assert traits.alpha == pytest.approx(2e-5)
    assert traits.sigma == pytest.approx(0.4)
    assert (traits.mu, traits.gamma) == (-0.3, 1.2)
    with pytest.raises(ValueError):
        TraitVector(np.array([0.0, 1.0, np.inf, 0.0]))


def test_trait_transition_step():
    params = GenerativeParams.default(3, dim=2, seed=0)
    params.h = np.full(4, 0.5)
    params.r = np.full(4, 0.1)
    step = trait_transition_step(TraitVector(np.array([1.0, 2.0, 3.0, 4.0])), params)

    np.testing.assert_allclose(step.mean, [0.5, 1.0, 1.5, 2.0])
    np.testing.assert_allclose(step.var, [0.1] * 4)


def test_zero_trait_transition():
    params = GenerativeParams.default(3, dim=2, seed=0)
    params.h = np.zeros(4)
    step = trait_transition_step(np.array([1.0, 2.0, 3.0, 4.0]), params)

    np.testing.assert_array_equal(step.mean, np.zeros(4))
    np.testing.assert_array_equal(step.var, params.r)


@pytest.mark.parametrize("z, expected", [
    (0.0, 0.5),  # symmetry
    (1.0, 0.731059),  # sigmoid(1)
    (1e4, 1.0 - 1e-12),  # clamped from above
    (-1e4, 1e-12),  # clamped from below
])
def test_emission_probability(z, expected):
    assert emission_probability(z) == pytest.approx(expected, abs=1e-6)


def test_params_reject_non_positive_variances():
    params = GenerativeParams.default(2, dim=2, seed=0)
    with pytest.raises(ValueError):
        GenerativeParams(params.graph, params.s_bar, np.zeros(4), params.h, params.r)


def test_params_round_trip():
    params = GenerativeParams.default(4, dim=3, seed=2)
    loaded = GenerativeParams.from_dict(params.to_dict())

    np.testing.assert_array_equal(loaded.s_bar, params.s_bar)
    np.testing.assert_array_equal(loaded.graph.U, params.graph.U)
    assert loaded.w1 == params.w1


def test_schedule_factory_rejects_unknown():
    with pytest.raises(ValueError):
        schedule_factory("spaced", n_interactions=5)


def test_uniform_schedule_times_increase():
    schedule = schedule_factory("uniform", n_interactions=50, gap_mean=10.0)
    kcs, times = schedule(np.random.default_rng(0), np.zeros((4, 4)))

    assert isinstance(schedule, UniformSchedule)
    assert len(kcs) == len(times) == 50
    assert times[0] == 0.0
    assert np.all(np.diff(times) >= 1.0)
    assert set(kcs.tolist()) <= {0, 1, 2, 3}


def test_curriculum_follows_prerequisites():
    adjacency = np.array([[0.0, 0.9, 0.0], [0.0, 0.0, 0.9], [0.0, 0.0, 0.0]])
    schedule = schedule_factory("curriculum", n_interactions=6, new_prob=1.0)
    kcs, _ = schedule(np.random.default_rng(0), adjacency)

    assert isinstance(schedule, CurriculumSchedule)
    np.testing.assert_array_equal(kcs, [0, 0, 1, 1, 2, 2])


def test_curriculum_only_practises_unlocked_kcs():
    adjacency = np.array([[0.0, 0.9, 0.0], [0.0, 0.0, 0.9], [0.0, 0.0, 0.0]])
    kcs, _ = CurriculumSchedule(30, new_prob=0.2)(np.random.default_rng(3), adjacency)

    for n, kc in enumerate(kcs):
        assert kc < 1 + (n * 3) // 30


def test_schedule_needs_interactions():
    with pytest.raises(ValueError):
        UniformSchedule(0)


def test_simulation_is_deterministic(tmp_path):
    params = GenerativeParams.default(5, dim=3, seed=1)
    schedule = UniformSchedule(20)
    first, truth = simulate_cohort(params, 8, schedule, seed=11)
    second, _ = simulate_cohort(params, 8, schedule, seed=11, threads=4)

    write_interactions(first, str(tmp_path / "a.csv"))
    write_interactions(second, str(tmp_path / "b.csv"))
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert len(first) == 8
    assert truth.states["L0000"].shape == (20, 5)


def test_different_seeds_differ():
    params = GenerativeParams.default(5, dim=3, seed=1)
    first, _ = simulate_cohort(params, 4, UniformSchedule(20), seed=1)
    second, _ = simulate_cohort(params, 4, UniformSchedule(20), seed=2)

    assert first != second


def test_latent_truth_round_trip(tmp_path):
    params = GenerativeParams.default(3, dim=2, seed=0)
    _, truth = simulate_cohort(params, 3, UniformSchedule(5), seed=0)
    path = str(tmp_path / "latent.json")
    truth.save(path)
    loaded = LatentTruth.load(path)

    assert sorted(loaded.traits) == sorted(truth.traits)
    for learner in truth.traits:
        np.testing.assert_array_equal(loaded.traits[learner], truth.traits[learner])
        np.testing.assert_array_equal(loaded.states[learner], truth.states[learner])


def test_noise_free_trajectory_follows_forgetting_curve():
    """
    with sigma close to 0 the states decay exactly along the retention curve
    """
    params = single_kc_params(log_sigma=-30.0, w1=4.0)
    cohort, truth = simulate_cohort(params, 3, UniformSchedule(15, gap_mean=5e4), seed=4)

    for history in cohort:
        traits, states = truth.traits[history.learner_id], truth.states[history.learner_id]
        for n in range(1, len(history)):
            r = retention_ratio(np.exp(traits[n, 0]), history.times[n] - history.times[n - 1])
            expected = r * states[n - 1, 0] + (1.0 - r) * traits[n, 1]
            assert states[n, 0] == pytest.approx(expected, abs=1e-9)


def test_stationary_variance():
    """
    long gaps push every learner to the stationary law N(mu, sigma^2 / (2 alpha))
    """
    params = single_kc_params(w1=0.01)
    n_learners = 1000
    _, truth = simulate_cohort(params, n_learners, UniformSchedule(10, gap_mean=1e6), seed=7)
    final = np.array([states[-1, 0] for states in truth.states.values()])

    stationary = 2e-5 / (2 * 1e-5)
    assert np.var(final) == pytest.approx(stationary, abs=3 * stationary * np.sqrt(2.0 / n_learners))


def test_emission_at_neutral_state():
    params = single_kc_params(w1=1e-8)
    n_learners = 4000
    cohort, _ = simulate_cohort(params, n_learners, UniformSchedule(1), seed=9)
    outcomes = np.array([h.outcomes[0] for h in cohort])

    assert outcomes.mean() == pytest.approx(0.5, abs=3 * np.sqrt(0.25 / n_learners))
