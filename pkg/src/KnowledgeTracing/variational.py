import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from src.KnowledgeTracing.dynamics import EMISSION_EPS, N_TRAITS, TAYLOR_THRESHOLD, GenerativeParams
from src.KnowledgeTracing.graph import PrerequisiteGraph


DTYPE = torch.float64
LOG_2PI = math.log(2.0 * math.pi)
LOG_EMISSION_LOW = math.log(EMISSION_EPS)
LOG_EMISSION_HIGH = math.log1p(-EMISSION_EPS)
DEFAULT_INIT_LOGVAR = math.log(0.1)


def as_tensor(value):
    return torch.as_tensor(np.asarray(value, dtype=float), dtype=DTYPE)


@dataclass(frozen=True)
class Ablation:
    """
    Model ablations.

    no_graph: transfer ability gamma forced to 0.
    no_individual: one q(s) shared by every learner.
    no_dynamics: traits fixed over time, s_n = s_1.
    """
    no_graph: bool = False
    no_individual: bool = False
    no_dynamics: bool = False

    @classmethod
    def from_dict(cls, data):
        data = data or {}
        return cls(**{name: bool(data.get(name, False)) for name in ("no_graph", "no_individual", "no_dynamics")})

    def to_dict(self):
        return {"no_graph": self.no_graph, "no_individual": self.no_individual, "no_dynamics": self.no_dynamics}


@dataclass
class VariationalState:
    """
    Mean-field Gaussian posterior of one learner: per step n, diagonal
    Gaussians over z_n (K values) and s_n (4 values).
    """
    z_mean: np.ndarray
    z_logvar: np.ndarray
    s_mean: np.ndarray
    s_logvar: np.ndarray

    def __post_init__(self):
        for name in ("z_mean", "z_logvar", "s_mean", "s_logvar"):
            setattr(self, name, np.atleast_2d(np.asarray(getattr(self, name), dtype=float)))
        if self.z_mean.shape != self.z_logvar.shape:
            raise ValueError("z_mean and z_logvar shapes differ")
        if self.s_mean.shape != self.s_logvar.shape or self.s_mean.shape[1] != N_TRAITS:
            raise ValueError(f"s_mean and s_logvar must both be N x {N_TRAITS}")
        if self.s_mean.shape[0] != self.z_mean.shape[0]:
            raise ValueError("q(s) and q(z) cover different numbers of steps")
        if not (np.all(np.isfinite(self.z_logvar)) and np.all(np.isfinite(self.s_logvar))):
            raise ValueError("log-variances must be finite")

    @property
    def n_steps(self):
        return self.z_mean.shape[0]

    @property
    def n_kcs(self):
        return self.z_mean.shape[1]

    @classmethod
    def from_prior(cls, params, n_steps, init_logvar=DEFAULT_INIT_LOGVAR):
        return cls(
            z_mean=np.full((n_steps, params.n_kcs), params.z_bar),
            z_logvar=np.full((n_steps, params.n_kcs), init_logvar),
            s_mean=np.tile(params.s_bar, (n_steps, 1)),
            s_logvar=np.full((n_steps, N_TRAITS), init_logvar),
        )

    def to_dict(self):
        return {name: getattr(self, name).tolist() for name in ("z_mean", "z_logvar", "s_mean", "s_logvar")}

    @classmethod
    def from_dict(cls, data):
        return cls(**{name: np.array(data[name], dtype=float) for name in ("z_mean", "z_logvar", "s_mean", "s_logvar")})


class ModelParameters(torch.nn.Module):
    """
    Trainable copy of GenerativeParams. Variances and the diagonal of H are
    stored as logs so they stay positive.
    """

    def __init__(self, params):
        super().__init__()
        if np.any(params.h <= 0):
            raise ValueError("the diagonal of H must be positive to be learned")
        self.U = torch.nn.Parameter(as_tensor(params.graph.U).clone())
        self.M = torch.nn.Parameter(as_tensor(params.graph.M).clone())
        self.s_bar = torch.nn.Parameter(as_tensor(params.s_bar).clone())
        self.log_r1 = torch.nn.Parameter(torch.log(as_tensor(params.r1)))
        self.log_h = torch.nn.Parameter(torch.log(as_tensor(params.h)))
        self.log_r = torch.nn.Parameter(torch.log(as_tensor(params.r)))
        self.z_bar = torch.nn.Parameter(as_tensor(params.z_bar).clone())
        self.log_w1 = torch.nn.Parameter(torch.log(as_tensor(params.w1)))

    def adjacency(self):
        n_kcs = self.U.shape[0]
        existence = torch.sigmoid(self.U @ self.U.T)
        direction = torch.sigmoid(self.U @ (self.M - self.M.T) @ self.U.T)
        return existence * direction * (1.0 - torch.eye(n_kcs, dtype=DTYPE))

    def graph_parameters(self):
        return [self.U, self.M]

    def to_generative(self):
        detach = lambda t: t.detach().numpy().copy()
        return GenerativeParams(
            graph=PrerequisiteGraph(detach(self.U), detach(self.M)),
            s_bar=detach(self.s_bar),
            r1=np.exp(detach(self.log_r1)),
            h=np.exp(detach(self.log_h)),
            r=np.exp(detach(self.log_r)),
            z_bar=float(self.z_bar.detach()),
            w1=float(torch.exp(self.log_w1.detach())),
        )


class VariationalParameters(torch.nn.Module):
    """
    Posterior parameters of a batch of learners, padded to a common length.

    z tensors are (L, N, K). s tensors are (Ls, Ns, 4) where Ls is 1 when
    q(s) is shared across learners and Ns is 1 when traits are static.
    """

    def __init__(self, z_mean, z_logvar, s_mean, s_logvar):
        super().__init__()
        self.z_mean = torch.nn.Parameter(z_mean)
        self.z_logvar = torch.nn.Parameter(z_logvar)
        self.s_mean = torch.nn.Parameter(s_mean)
        self.s_logvar = torch.nn.Parameter(s_logvar)

    @property
    def n_learners(self):
        return self.z_mean.shape[0]

    @property
    def shared_traits(self):
        return self.s_mean.shape[0] == 1 and self.n_learners > 1

    @classmethod
    def from_prior(cls, n_learners, n_steps, params, ablation, init_logvar=DEFAULT_INIT_LOGVAR):
        trait_learners = 1 if ablation.no_individual else n_learners
        trait_steps = 1 if ablation.no_dynamics else n_steps
        shape_z = (n_learners, n_steps, params.n_kcs)
        shape_s = (trait_learners, trait_steps, N_TRAITS)
        return cls(
            z_mean=torch.full(shape_z, params.z_bar, dtype=DTYPE),
            z_logvar=torch.full(shape_z, init_logvar, dtype=DTYPE),
            s_mean=as_tensor(params.s_bar).expand(shape_s).clone(),
            s_logvar=torch.full(shape_s, init_logvar, dtype=DTYPE),
        )

    @classmethod
    def from_states(cls, states, n_steps, ablation):
        """Stacks per-learner VariationalState objects, zero-padded to n_steps."""
        n_kcs = states[0].n_kcs
        z_mean = np.zeros((len(states), n_steps, n_kcs))
        z_logvar = np.zeros_like(z_mean)
        s_mean = np.zeros((len(states), n_steps, N_TRAITS))
        s_logvar = np.zeros_like(s_mean)
        for ell, state in enumerate(states):
            n = state.n_steps
            z_mean[ell, :n], z_logvar[ell, :n] = state.z_mean, state.z_logvar
            s_mean[ell, :n], s_logvar[ell, :n] = state.s_mean, state.s_logvar
        if ablation.no_dynamics:
            s_mean, s_logvar = s_mean[:, :1], s_logvar[:, :1]
        if ablation.no_individual:
            s_mean, s_logvar = s_mean[:1], s_logvar[:1]
        return cls(as_tensor(z_mean), as_tensor(z_logvar), as_tensor(s_mean), as_tensor(s_logvar))

    def noise_shape(self):
        """(n_learners, n_steps, n_kcs, trait_steps) for draw_noise."""
        n_learners, n_steps, n_kcs = self.z_mean.shape
        return n_learners, n_steps, n_kcs, self.s_mean.shape[1]

    def select(self, idx):
        """Tensors of the learners in idx; gradients flow back to the full batch."""
        idx = torch.as_tensor(idx, dtype=torch.long)
        if self.s_mean.shape[0] == 1:
            s_mean, s_logvar = self.s_mean, self.s_logvar
        else:
            s_mean, s_logvar = self.s_mean[idx], self.s_logvar[idx]
        return self.z_mean[idx], self.z_logvar[idx], s_mean, s_logvar

    def learner_state(self, ell, length):
        detach = lambda t: t.detach().numpy().copy()
        trait_row = 0 if self.s_mean.shape[0] == 1 else ell
        s_mean = detach(self.s_mean[trait_row])
        s_logvar = detach(self.s_logvar[trait_row])
        if s_mean.shape[0] == 1:
            s_mean = np.repeat(s_mean, length, axis=0)
            s_logvar = np.repeat(s_logvar, length, axis=0)
        return VariationalState(
            z_mean=detach(self.z_mean[ell, :length]),
            z_logvar=detach(self.z_logvar[ell, :length]),
            s_mean=s_mean[:length],
            s_logvar=s_logvar[:length],
        )


class HistoryBatch:
    """
    Padded tensors of a list of histories.

    kcs (L, N) long, outcomes (L, N), tau (L, N) and mask (L, N). Padded
    and first-step intervals are set to 1 s so that masked transition terms
    stay finite.
    """

    def __init__(self, histories, n_kcs, min_interval=1.0):
        if not histories:
            raise ValueError("cannot build a batch from no histories")
        n_steps = max(len(h) for h in histories)
        kcs = np.zeros((len(histories), n_steps), dtype=np.int64)
        outcomes = np.zeros((len(histories), n_steps))
        tau = np.ones((len(histories), n_steps))
        mask = np.zeros((len(histories), n_steps))
        for ell, history in enumerate(histories):
            n = len(history)
            if n == 0:
                raise ValueError(f"history of {history.learner_id} is empty")
            if np.any(history.kcs >= n_kcs):
                raise ValueError(f"history of {history.learner_id} uses a KC index >= {n_kcs}")
            kcs[ell, :n] = history.kcs
            outcomes[ell, :n] = history.outcomes
            tau[ell, 1:n] = history.intervals(min_interval)[1:]
            mask[ell, :n] = 1.0
        self.n_kcs = n_kcs
        self.lengths = [len(h) for h in histories]
        self.kcs = torch.as_tensor(kcs)
        self.outcomes = as_tensor(outcomes)
        self.tau = as_tensor(tau)
        self.mask = as_tensor(mask)

    @property
    def n_learners(self):
        return self.kcs.shape[0]

    @property
    def n_steps(self):
        return self.kcs.shape[1]

    def select(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        batch = HistoryBatch.__new__(HistoryBatch)
        batch.n_kcs = self.n_kcs
        batch.lengths = [self.lengths[i] for i in idx.tolist()]
        batch.kcs = self.kcs[idx]
        batch.outcomes = self.outcomes[idx]
        batch.tau = self.tau[idx]
        batch.mask = self.mask[idx]
        return batch


@dataclass
class Noise:
    """Standard normal draws reused across evaluations (common random numbers)."""
    s: torch.Tensor
    z: torch.Tensor

    def select(self, idx):
        idx = torch.as_tensor(idx, dtype=torch.long)
        return Noise(self.s[:, idx], self.z[:, idx])


def draw_noise(rng, n_samples, n_learners, n_steps, n_kcs, trait_steps):
    return Noise(
        s=as_tensor(rng.standard_normal((n_samples, n_learners, trait_steps, N_TRAITS))),
        z=as_tensor(rng.standard_normal((n_samples, n_learners, n_steps, n_kcs))),
    )


def gaussian_entropy(logvar, weight):
    """Entropy of diagonal Gaussians: sum over the last axis, weighted sum over steps."""
    return (0.5 * (1.0 + LOG_2PI + logvar).sum(-1) * weight).sum(-1)


def expected_log_normal(mean_q, var_q, mean_p, var_p):
    """E over x ~ N(mean_q, var_q) of log N(x; mean_p, var_p), elementwise."""
    return -0.5 * (LOG_2PI + torch.log(var_p) + ((mean_q - mean_p) ** 2 + var_q) / var_p)


def transition_variance(alpha, sigma, tau):
    x = 2.0 * alpha * tau
    exact = sigma**2 * -torch.expm1(-x) / (2.0 * alpha)
    series = sigma**2 * tau * (1.0 - x / 2.0 + x**2 / 6.0)
    return torch.where(alpha * tau < TAYLOR_THRESHOLD, series, exact)


def ou_step(model, z_prev, s_next, tau, use_graph, adjacency=None):
    """
    Torch mirror of dynamics.transition_batch.

    z_prev (..., K), s_next (..., 4) and tau broadcastable to (...).
    Returns m (..., K) and w (...).
    """
    n_kcs = z_prev.shape[-1]
    alpha = torch.exp(s_next[..., 0])
    mu = s_next[..., 1]
    sigma = torch.exp(s_next[..., 2])
    r = torch.exp(-alpha * tau)
    w = transition_variance(alpha, sigma, tau).clamp_min(1e-300)
    mu_tilde = mu[..., None]
    if use_graph:
        if adjacency is None:
            adjacency = model.adjacency()
        gamma = s_next[..., 3]
        mu_tilde = mu_tilde + gamma[..., None] / n_kcs * (z_prev @ adjacency)
    m = r[..., None] * z_prev + (1.0 - r[..., None]) * mu_tilde
    return m, w


def emission_log_likelihood(z_obs, outcomes):
    log_p = outcomes * F.logsigmoid(z_obs) + (1.0 - outcomes) * F.logsigmoid(-z_obs)
    return log_p.clamp(LOG_EMISSION_LOW, LOG_EMISSION_HIGH)


def elbo_terms(model, z_mean, z_logvar, s_mean, s_logvar, batch, noise, ablation):
    """
    Per-learner terms of the full-history ELBO.

    Entropies and the Gaussian-linear cross terms (trait prior, trait
    transitions, knowledge prior) are exact expectations. The OU knowledge
    transitions and the Bernoulli emissions are averaged over the
    reparameterised draws in noise.

    Returns:
        dict: name -> tensor of shape (L,)
    """
    n_learners, n_steps, n_kcs = z_mean.shape
    mask = batch.mask
    s_mean = s_mean.expand(n_learners, -1, -1)
    s_logvar = s_logvar.expand(n_learners, -1, -1)
    trait_steps = s_mean.shape[1]
    s_var = torch.exp(s_logvar)
    z_var = torch.exp(z_logvar)
    r1, h, r, w1 = torch.exp(model.log_r1), torch.exp(model.log_h), torch.exp(model.log_r), torch.exp(model.log_w1)
    zeros = torch.zeros(n_learners, dtype=DTYPE)

    terms = {}
    trait_weight = mask if trait_steps == n_steps else torch.ones(n_learners, 1, dtype=DTYPE)
    terms["entropy_s"] = gaussian_entropy(s_logvar, trait_weight)
    terms["prior_s"] = expected_log_normal(s_mean[:, 0], s_var[:, 0], model.s_bar, r1).sum(-1)
    if trait_steps > 1:
        transition = expected_log_normal(
            s_mean[:, 1:], s_var[:, 1:] + h**2 * s_var[:, :-1], h * s_mean[:, :-1], r
        ).sum(-1)
        terms["transition_s"] = (transition * mask[:, 1:]).sum(-1)
    else:
        terms["transition_s"] = zeros
    terms["entropy_z"] = gaussian_entropy(z_logvar, mask)
    terms["prior_z"] = expected_log_normal(z_mean[:, 0], z_var[:, 0], model.z_bar, w1).sum(-1)

    z = z_mean + torch.exp(0.5 * z_logvar) * noise.z
    if n_steps > 1:
        s = s_mean + torch.exp(0.5 * s_logvar) * noise.s
        s_next = s[:, :, 1:] if trait_steps > 1 else s
        m, w = ou_step(model, z[:, :, :-1], s_next, batch.tau[:, 1:], use_graph=not ablation.no_graph)
        log_transition = -0.5 * (LOG_2PI + torch.log(w)[..., None] + (z[:, :, 1:] - m) ** 2 / w[..., None]).sum(-1)
        terms["transition_z"] = (log_transition * mask[:, 1:]).sum(-1).mean(0)
    else:
        terms["transition_z"] = zeros

    n_samples = z.shape[0]
    index = batch.kcs.unsqueeze(0).expand(n_samples, -1, -1).unsqueeze(-1)
    z_obs = z.gather(-1, index).squeeze(-1)
    terms["emission"] = (emission_log_likelihood(z_obs, batch.outcomes) * mask).sum(-1).mean(0)
    return terms


def elbo_per_learner(model, variational, batch, noise, ablation, idx=None):
    if idx is None:
        idx = np.arange(variational.n_learners)
    z_mean, z_logvar, s_mean, s_logvar = variational.select(idx)
    terms = elbo_terms(model, z_mean, z_logvar, s_mean, s_logvar, batch.select(idx), noise.select(idx), ablation)
    return sum(terms.values())


@dataclass
class PriorMoments:
    """Moment-matched diagonal Gaussian over (s, z) at the next step."""
    s_mean: torch.Tensor
    s_var: torch.Tensor
    z_mean: torch.Tensor
    z_var: torch.Tensor


def push_forward(model, s_mean, s_logvar, z_mean, z_logvar, tau, noise, ablation):
    """
    Monte Carlo push of q(s_n) q(z_n) through the trait and OU kernels.

    noise holds four standard normal arrays of shapes (S, 4), (S, K),
    (S, 4) and (S, K): posterior draws of s and z, then kernel noise.
    """
    eps_s, eps_z, eps_s_kernel, eps_z_kernel = noise
    s = s_mean + torch.exp(0.5 * s_logvar) * eps_s
    z = z_mean + torch.exp(0.5 * z_logvar) * eps_z
    if not ablation.no_dynamics:
        s = torch.exp(model.log_h) * s + torch.exp(0.5 * model.log_r) * eps_s_kernel
    tau = torch.as_tensor(tau, dtype=DTYPE)
    m, w = ou_step(model, z, s, tau, use_graph=not ablation.no_graph)
    z_next = m + torch.sqrt(w)[..., None] * eps_z_kernel
    return PriorMoments(
        s_mean=s.mean(0),
        s_var=s.var(0, unbiased=False).clamp_min(1e-12),
        z_mean=z_next.mean(0),
        z_var=z_next.var(0, unbiased=False).clamp_min(1e-12),
    )


def vcl_elbo(z_mean, z_logvar, s_mean, s_logvar, kc, outcome, prior, eps_z):
    """
    Continual-learning ELBO of a single new observation:
    entropy of q + E_q[log p(y | z_kc)] + E_q[log prior(z, s)].

    The prior is a diagonal Gaussian, so its cross term is exact; the
    emission term averages over eps_z of shape (S,).
    """
    entropy = 0.5 * (1.0 + LOG_2PI + z_logvar).sum() + 0.5 * (1.0 + LOG_2PI + s_logvar).sum()
    cross = (
        expected_log_normal(z_mean, torch.exp(z_logvar), prior.z_mean, prior.z_var).sum()
        + expected_log_normal(s_mean, torch.exp(s_logvar), prior.s_mean, prior.s_var).sum()
    )
    z_obs = z_mean[kc] + torch.exp(0.5 * z_logvar[kc]) * eps_z
    emission = emission_log_likelihood(z_obs, torch.as_tensor(float(outcome), dtype=DTYPE)).mean()
    return entropy + cross + emission
