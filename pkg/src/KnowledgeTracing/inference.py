import copy
import json
import logging
from dataclasses import dataclass, field, fields

import numpy as np
import torch

from src.KnowledgeTracing.data import SplitCohort
from src.KnowledgeTracing.dynamics import N_TRAITS, GenerativeParams, emission_probability, transition_batch
from src.KnowledgeTracing.graph import adjacency_matrix
from src.KnowledgeTracing.variational import (
    DEFAULT_INIT_LOGVAR,
    Ablation,
    HistoryBatch,
    ModelParameters,
    PriorMoments,
    VariationalParameters,
    VariationalState,
    as_tensor,
    draw_noise,
    elbo_per_learner,
    elbo_terms,
    push_forward,
    vcl_elbo,
)


CHECKPOINT_SCHEMA = "kt-checkpoint/1"
GRADIENT_MODES = ("analytic", "finite_difference")


@dataclass
class FitConfig:
    mc_samples: int = 8
    learning_rate: float = 0.005
    grad_clip: float = 10.0
    max_epochs: int = 300
    batch_size: int = 32
    seed: int = 0
    ablation: Ablation = field(default_factory=Ablation)
    gradient_mode: str = "analytic"
    embedding_dim: int = 16
    lr_halving_epochs: int = 200
    min_learning_rate: float = 1e-5
    fit_params: bool = True
    min_interval: float = 1.0
    init_logvar: float = DEFAULT_INIT_LOGVAR
    fd_step: float = 1e-5
    continual_steps: int = 30
    continual_learning_rate: float = 0.05
    prior_samples: int = 256
    predict_samples: int = 1000
    update_graph: bool = False

    def __post_init__(self):
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be at least 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be at least 1")
        if self.gradient_mode not in GRADIENT_MODES:
            raise ValueError(f"gradient_mode must be one of {GRADIENT_MODES}")
        if isinstance(self.ablation, dict):
            self.ablation = Ablation.from_dict(self.ablation)

    @classmethod
    def from_dict(cls, data, **overrides):
        known = {f.name for f in fields(cls)}
        values = {k: v for k, v in dict(data).items() if k in known}
        values.update(overrides)
        return cls(**values)


@dataclass
class FitResult:
    params: GenerativeParams
    states: dict
    elbo_trace: list
    n_rejected: int = 0
    n_updates: int = 0


def finite_difference_gradients(objective, parameters, step=1e-5):
    """
    Central differences of objective() written into p.grad for every
    parameter; objective must be deterministic (fixed noise) and may
    return a float or a scalar tensor.
    """
    with torch.no_grad():
        for p in parameters:
            grad = torch.zeros_like(p)
            flat, grad_flat = p.data.view(-1), grad.view(-1)
            for i in range(flat.numel()):
                original = flat[i].item()
                flat[i] = original + step
                up = float(objective())
                flat[i] = original - step
                down = float(objective())
                flat[i] = original
                grad_flat[i] = (up - down) / (2.0 * step)
            p.grad = grad


def _ascent_step(parameters, optimizer, loss_fn, config, epoch):
    """One clipped optimizer step minimising loss_fn (the negative ELBO)."""
    optimizer.zero_grad()
    if config.gradient_mode == "analytic":
        loss = loss_fn(backward=True)
    else:
        loss = loss_fn(backward=False)
        finite_difference_gradients(lambda: loss_fn(backward=False), parameters, config.fd_step)
    if not np.isfinite(loss):
        raise ValueError(f"non-finite ELBO at epoch {epoch}")
    torch.nn.utils.clip_grad_norm_(parameters, config.grad_clip)
    optimizer.step()


def _set_learning_rate(optimizers, lr):
    for optimizer in optimizers:
        for group in optimizer.param_groups:
            group["lr"] = lr


def fit_variational_em(data, config, params=None, n_kcs=None):
    """
    Variational EM over the training histories.

    Each epoch shuffles the learners (seeded) into minibatches of
    batch_size. Every minibatch takes one adaptive-moment step on its
    learners' posterior parameters and then one step on the shared
    parameters theta, both on the minibatch-mean ELBO. The epoch is
    accepted only if the full ELBO under fixed evaluation noise did not
    decrease; otherwise the previous state is restored and the learning
    rate halved, so the returned trace is non-decreasing.

    Parameters:
        data (SplitCohort or list): Split cohort (its train part is used) or
            a list of InteractionHistory objects.
        config (FitConfig): Optimisation settings.
        params (GenerativeParams, optional): Initial theta; defaults to
            GenerativeParams.default with a random graph.
        n_kcs (int, optional): Number of KCs when data is a plain list.

    Returns:
        FitResult: Final theta, per-learner VariationalState, ELBO trace and
            the number of minibatch updates.

    Raises:
        ValueError: On an empty cohort or a non-finite ELBO.
    """
    histories = data.train if isinstance(data, SplitCohort) else list(data)
    if not histories:
        raise ValueError("cannot fit an empty cohort")
    if isinstance(data, SplitCohort):
        n_kcs = data.n_kcs
    elif n_kcs is None:
        if params is None:
            raise ValueError("n_kcs is required when fitting a plain list of histories")
        n_kcs = params.n_kcs
    if params is None:
        params = GenerativeParams.default(n_kcs, config.embedding_dim, seed=config.seed)

    ablation = config.ablation
    batch = HistoryBatch(histories, n_kcs, config.min_interval)
    model = ModelParameters(params)
    variational = VariationalParameters.from_prior(len(histories), batch.n_steps, params, ablation, config.init_logvar)
    n_learners = len(histories)
    bs = config.batch_size
    eval_chunks = [np.arange(start, min(start + bs, n_learners)) for start in range(0, n_learners, bs)]

    rng = np.random.default_rng(config.seed)
    eval_noise = draw_noise(rng, config.mc_samples, *variational.noise_shape())

    def minibatch_loss(idx, noise, backward):
        loss = -elbo_per_learner(model, variational, batch, noise, ablation, idx).sum() / len(idx)
        if backward:
            loss.backward()
        return loss.item()

    def evaluate(noise):
        with torch.no_grad():
            return sum(elbo_per_learner(model, variational, batch, noise, ablation, idx).sum().item() for idx in eval_chunks)

    lr = config.learning_rate
    phi_optimizer = torch.optim.Adam(variational.parameters(), lr=lr)
    theta_optimizer = torch.optim.Adam(model.parameters(), lr=lr) if config.fit_params else None
    optimizers = [o for o in (phi_optimizer, theta_optimizer) if o is not None]

    current = evaluate(eval_noise)
    if not np.isfinite(current):
        raise ValueError("non-finite ELBO at epoch 0")
    trace = [current]
    n_rejected = n_updates = 0
    logging.info(f"fit: {n_learners} learners, {n_kcs} KCs, initial ELBO {current:.4f}, ablation {ablation.to_dict()}")

    for epoch in range(1, config.max_epochs + 1):
        if config.lr_halving_epochs and epoch % config.lr_halving_epochs == 0:
            lr /= 2.0
            _set_learning_rate(optimizers, lr)
        snapshot = (
            copy.deepcopy(model.state_dict()),
            copy.deepcopy(variational.state_dict()),
            [copy.deepcopy(o.state_dict()) for o in optimizers],
        )

        order = rng.permutation(n_learners)
        phi_noise = draw_noise(rng, config.mc_samples, *variational.noise_shape())
        theta_noise = draw_noise(rng, config.mc_samples, *variational.noise_shape())
        for start in range(0, n_learners, bs):
            idx = np.sort(order[start:start + bs])
            _ascent_step(
                list(variational.parameters()), phi_optimizer,
                lambda backward: minibatch_loss(idx, phi_noise, backward), config, epoch,
            )
            if theta_optimizer is not None:
                model.zero_grad()
                _ascent_step(
                    list(model.parameters()), theta_optimizer,
                    lambda backward: minibatch_loss(idx, theta_noise, backward), config, epoch,
                )
            n_updates += 1

        candidate = evaluate(eval_noise)
        if not np.isfinite(candidate):
            raise ValueError(f"non-finite ELBO at epoch {epoch}")
        if candidate < current:
            model.load_state_dict(snapshot[0])
            variational.load_state_dict(snapshot[1])
            for optimizer, state in zip(optimizers, snapshot[2]):
                optimizer.load_state_dict(state)
            lr /= 2.0
            _set_learning_rate(optimizers, lr)
            n_rejected += 1
            logging.info(f"epoch {epoch}: ELBO fell to {candidate:.4f}, step rejected, learning rate {lr:.2e}")
            if lr < config.min_learning_rate:
                logging.info(f"fit stopped at epoch {epoch}: learning rate below {config.min_learning_rate}")
                break
            continue
        current = candidate
        trace.append(current)
        if epoch % 25 == 0:
            logging.info(f"epoch {epoch}: ELBO {current:.4f}")

    states = {h.learner_id: variational.learner_state(ell, len(h)) for ell, h in enumerate(histories)}
    return FitResult(params=model.to_generative(), states=states, elbo_trace=trace, n_rejected=n_rejected, n_updates=n_updates)


def elbo_full(params, varstate, history, mc_samples=8, seed=0, ablation=None, min_interval=1.0, return_terms=False):
    """
    Monte Carlo estimate of the full-history ELBO of one learner.

    Parameters:
        params (GenerativeParams): Global parameters.
        varstate (VariationalState): Posterior covering every step of history.
        history (InteractionHistory): Observed interactions.
        mc_samples (int): Reparameterised draws.
        seed (int): Seed of the draws.
        ablation (Ablation, optional): Model ablation.
        return_terms (bool): Return the individual terms as a dict.

    Raises:
        ValueError: If the posterior and the history have different lengths.
    """
    ablation = ablation or Ablation()
    if varstate.n_steps != len(history):
        raise ValueError(f"mismatched lengths: posterior covers {varstate.n_steps} steps, history has {len(history)}")
    if varstate.n_kcs != params.n_kcs:
        raise ValueError(f"mismatched KC counts: posterior {varstate.n_kcs}, params {params.n_kcs}")
    model = ModelParameters(params)
    batch = HistoryBatch([history], params.n_kcs, min_interval)
    variational = VariationalParameters.from_states([varstate], len(history), ablation)
    noise = draw_noise(np.random.default_rng(seed), mc_samples, *variational.noise_shape())
    with torch.no_grad():
        terms = elbo_terms(model, *variational.select([0]), batch, noise, ablation)
    terms = {name: float(value[0]) for name, value in terms.items()}
    return terms if return_terms else sum(terms.values())


@dataclass
class NextTimePrior:
    s_mean: np.ndarray
    s_var: np.ndarray
    z_mean: np.ndarray
    z_var: np.ndarray


@dataclass
class ContinualState:
    """Posterior of one learner at its latest step, ready for updates and prediction."""
    params: GenerativeParams
    vocabulary: tuple
    s_mean: np.ndarray
    s_logvar: np.ndarray
    z_mean: np.ndarray
    z_logvar: np.ndarray
    step: int
    last_time: float
    ablation: Ablation = field(default_factory=Ablation)
    seed: int = 0
    min_interval: float = 1.0

    @classmethod
    def from_fit(cls, params, varstate, history, vocabulary, ablation=None, seed=0, min_interval=1.0):
        if varstate.n_steps != len(history):
            raise ValueError(f"mismatched lengths: posterior covers {varstate.n_steps} steps, history has {len(history)}")
        return cls(
            params=params,
            vocabulary=tuple(vocabulary),
            s_mean=varstate.s_mean[-1].copy(),
            s_logvar=varstate.s_logvar[-1].copy(),
            z_mean=varstate.z_mean[-1].copy(),
            z_logvar=varstate.z_logvar[-1].copy(),
            step=len(history),
            last_time=float(history.times[-1]),
            ablation=ablation or Ablation(),
            seed=seed,
            min_interval=min_interval,
        )

    def kc_index(self, kc_id):
        try:
            return self.vocabulary.index(kc_id)
        except ValueError:
            raise ValueError(f"unknown kc_id {kc_id!r}: the KC vocabulary is frozen after ingestion")


def _prior_rng(state):
    return np.random.default_rng(np.random.SeedSequence([int(state.seed), int(state.step)]))


def _prior_noise(rng, n_samples, n_kcs):
    return (
        as_tensor(rng.standard_normal((n_samples, N_TRAITS))),
        as_tensor(rng.standard_normal((n_samples, n_kcs))),
        as_tensor(rng.standard_normal((n_samples, N_TRAITS))),
        as_tensor(rng.standard_normal((n_samples, n_kcs))),
    )


def _posterior_tensors(state):
    return as_tensor(state.s_mean), as_tensor(state.s_logvar), as_tensor(state.z_mean), as_tensor(state.z_logvar)


def next_time_prior(state, tau, kc=None, mc_samples=256):
    """
    Joint prior over (s, z) at the next step: draws from the current
    posterior pushed through the trait and OU kernels, moment-matched to a
    diagonal Gaussian. Draws come from a stream seeded by (state.seed,
    state.step).
    """
    if kc is not None and not 0 <= kc < len(state.vocabulary):
        raise ValueError(f"kc index {kc} outside the vocabulary")
    model = ModelParameters(state.params)
    noise = _prior_noise(_prior_rng(state), mc_samples, state.params.n_kcs)
    with torch.no_grad():
        prior = push_forward(model, *_posterior_tensors(state), max(float(tau), state.min_interval), noise, state.ablation)
    return NextTimePrior(
        s_mean=prior.s_mean.numpy().copy(),
        s_var=prior.s_var.numpy().copy(),
        z_mean=prior.z_mean.numpy().copy(),
        z_var=prior.z_var.numpy().copy(),
    )


def elbo_vcl(varstate_next, new_observation, prior, mc_samples=8, seed=0):
    """
    Continual-learning ELBO of one new observation.

    Parameters:
        varstate_next (VariationalState): One-step posterior.
        new_observation (tuple): (kc index, outcome).
        prior (NextTimePrior): Prior for the same step.
    """
    if varstate_next.n_steps != 1:
        raise ValueError(f"mismatched lengths: continual posterior must cover 1 step, got {varstate_next.n_steps}")
    kc, outcome = new_observation
    if not 0 <= kc < varstate_next.n_kcs:
        raise ValueError(f"kc index {kc} outside [0, {varstate_next.n_kcs})")
    eps_z = as_tensor(np.random.default_rng(seed).standard_normal(mc_samples))
    with torch.no_grad():
        value = vcl_elbo(
            as_tensor(varstate_next.z_mean[0]),
            as_tensor(varstate_next.z_logvar[0]),
            as_tensor(varstate_next.s_mean[0]),
            as_tensor(varstate_next.s_logvar[0]),
            kc,
            outcome,
            _prior_to_torch(prior),
            eps_z,
        )
    return float(value)


def _prior_to_torch(prior):
    return PriorMoments(as_tensor(prior.s_mean), as_tensor(prior.s_var), as_tensor(prior.z_mean), as_tensor(prior.z_var))


def continual_update(state, record, config):
    """
    Advances a learner's posterior by one observed interaction without
    revisiting earlier data.

    The next-time prior is built from the current posterior; the new
    posterior starts at the prior moments and is improved by
    config.continual_steps optimizer steps on the continual ELBO. With
    config.update_graph the graph parameters U and M are optimised as well
    (the prior is then rebuilt at every step with the same draws).

    Raises:
        ValueError: On an unknown KC or a record older than the last one.
    """
    kc = state.kc_index(record.kc_id)
    if record.timestamp < state.last_time:
        raise ValueError(f"record at {record.timestamp} precedes the last observation at {state.last_time}")
    tau = max(record.timestamp - state.last_time, state.min_interval)
    rng = _prior_rng(state)
    prior_noise = _prior_noise(rng, config.prior_samples, state.params.n_kcs)
    eps_z = as_tensor(rng.standard_normal(config.mc_samples))

    model = ModelParameters(state.params)
    posterior = _posterior_tensors(state)
    with torch.no_grad():
        prior = push_forward(model, *posterior, tau, prior_noise, state.ablation)
    z_mean = prior.z_mean.clone().requires_grad_(True)
    z_logvar = torch.log(prior.z_var).clone().requires_grad_(True)
    s_mean = prior.s_mean.clone().requires_grad_(True)
    s_logvar = torch.log(prior.s_var).clone().requires_grad_(True)
    variables = [z_mean, z_logvar, s_mean, s_logvar]
    if config.update_graph:
        variables += model.graph_parameters()

    if config.continual_steps > 0:
        optimizer = torch.optim.Adam(variables, lr=config.continual_learning_rate)
        for _ in range(config.continual_steps):
            optimizer.zero_grad()
            if config.update_graph:
                prior = push_forward(model, *posterior, tau, prior_noise, state.ablation)
            loss = -vcl_elbo(z_mean, z_logvar, s_mean, s_logvar, kc, record.outcome, prior, eps_z)
            if not torch.isfinite(loss):
                raise ValueError(f"non-finite continual ELBO at step {state.step + 1} of {record.learner_id}")
            loss.backward()
            torch.nn.utils.clip_grad_norm_(variables, config.grad_clip)
            optimizer.step()

    detach = lambda t: t.detach().numpy().copy()
    return ContinualState(
        params=model.to_generative() if config.update_graph else state.params,
        vocabulary=state.vocabulary,
        s_mean=detach(s_mean),
        s_logvar=detach(s_logvar),
        z_mean=detach(z_mean),
        z_logvar=detach(z_logvar),
        step=state.step + 1,
        last_time=float(record.timestamp),
        ablation=state.ablation,
        seed=state.seed,
        min_interval=state.min_interval,
    )


def predict_horizon(state, future_schedule, mc_samples=1000, seed=0):
    """
    Multi-step predictions without conditioning on predicted outcomes.

    Posterior draws of (s, z) are propagated through the trait and OU
    kernels along the schedule; each step reports E[sigmoid(z_kc)].

    Parameters:
        state (ContinualState): Current posterior.
        future_schedule (list): (kc index, time in seconds) pairs in
            non-decreasing time order, not before state.last_time.

    Returns:
        list: Predicted probabilities, one per schedule entry.
    """
    if not future_schedule:
        return []
    params = state.params
    adjacency = adjacency_matrix(params.graph)
    rng = np.random.default_rng(seed)
    s = state.s_mean + np.exp(0.5 * state.s_logvar) * rng.standard_normal((mc_samples, N_TRAITS))
    z = state.z_mean + np.exp(0.5 * state.z_logvar) * rng.standard_normal((mc_samples, params.n_kcs))

    predictions = []
    previous = state.last_time
    for kc, time in future_schedule:
        if not 0 <= kc < params.n_kcs:
            raise ValueError(f"kc index {kc} outside [0, {params.n_kcs})")
        if time < previous:
            raise ValueError(f"schedule time {time} precedes {previous}")
        tau = max(time - previous, state.min_interval)
        if not state.ablation.no_dynamics:
            s = params.h * s + np.sqrt(params.r) * rng.standard_normal(s.shape)
        m, w, _ = transition_batch(z, s, adjacency, tau, use_graph=not state.ablation.no_graph)
        z = m + np.sqrt(w)[:, None] * rng.standard_normal(z.shape)
        predictions.append(float(np.mean(emission_probability(z[:, kc]))))
        previous = time
    return predictions


@dataclass
class Checkpoint:
    params: GenerativeParams
    states: dict
    vocabulary: tuple
    ablation: Ablation
    elbo_trace: list = field(default_factory=list)


def save_checkpoint(filename, params, states, vocabulary, ablation, elbo_trace=None):
    data = {
        "schema": CHECKPOINT_SCHEMA,
        "vocabulary": list(vocabulary),
        "ablation": ablation.to_dict(),
        "elbo_trace": [float(v) for v in elbo_trace or []],
        "params": params.to_dict(),
        "learners": {learner: state.to_dict() for learner, state in states.items()},
    }
    with open(filename, "w") as file:
        json.dump(data, file)
    logging.info(f"Saved checkpoint with {len(states)} learners to {filename}")


def load_checkpoint(filename):
    """
    Raises:
        FileNotFoundError: If the file does not exist.
        ValueError: If the schema tag is not recognised.
    """
    try:
        with open(filename, "r") as file:
            data = json.load(file)
    except FileNotFoundError:
        raise FileNotFoundError(f"File {filename} does not exist")
    if data.get("schema") != CHECKPOINT_SCHEMA:
        raise ValueError(f"{filename} is not a {CHECKPOINT_SCHEMA} checkpoint")
    return Checkpoint(
        params=GenerativeParams.from_dict(data["params"]),
        states={learner: VariationalState.from_dict(state) for learner, state in data["learners"].items()},
        vocabulary=tuple(data["vocabulary"]),
        ablation=Ablation.from_dict(data["ablation"]),
        elbo_trace=data.get("elbo_trace", []),
    )
