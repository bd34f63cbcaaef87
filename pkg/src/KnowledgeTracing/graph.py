import json
import logging

import numpy as np
import pandas as pd
import torch
from scipy.special import expit


class PrerequisiteGraph:
    """
    Shared prerequisite graph parameterised by KC embeddings.

    The probability of an edge i -> k factorises into a symmetric existence
    term sigmoid(u_i^T u_k) and a direction term sigmoid(u_i^T (M - M^T) u_k).

    Parameters:
        U (array): K x D matrix of KC embeddings.
        M (array): D x D mixing matrix.

    Raises:
        ValueError: If shapes disagree or entries are not finite.
    """

    def __init__(self, U, M):
        U = np.atleast_2d(np.asarray(U, dtype=float))
        M = np.atleast_2d(np.asarray(M, dtype=float))
        if U.ndim != 2 or U.shape[1] < 1:
            raise ValueError(f"U must be a K x D matrix with D >= 1, got shape {U.shape}")
        if M.shape != (U.shape[1], U.shape[1]):
            raise ValueError(f"M must be {U.shape[1]} x {U.shape[1]}, got shape {M.shape}")
        if not (np.all(np.isfinite(U)) and np.all(np.isfinite(M))):
            raise ValueError("graph parameters must be finite")
        self.U = U
        self.M = M

    @property
    def n_kcs(self):
        return self.U.shape[0]

    @property
    def dim(self):
        return self.U.shape[1]

    @classmethod
    def random(cls, n_kcs, dim=16, seed=0):
        """U ~ N(0, 0.1/sqrt(D)), M ~ N(0, 0.1/D) (standard deviations)."""
        rng = np.random.default_rng(seed)
        U = rng.normal(0.0, 0.1 / np.sqrt(dim), size=(n_kcs, dim))
        M = rng.normal(0.0, 0.1 / dim, size=(dim, dim))
        return cls(U, M)

    def to_dict(self):
        return {"U": self.U.tolist(), "M": self.M.tolist()}

    @classmethod
    def from_dict(cls, data):
        return cls(np.array(data["U"], dtype=float), np.array(data["M"], dtype=float))

    def save(self, filename):
        with open(filename, "w") as file:
            json.dump(self.to_dict(), file)


def _check_index(graph, idx):
    if not 0 <= idx < graph.n_kcs:
        raise ValueError(f"kc index {idx} outside [0, {graph.n_kcs})")


def edge_probability(graph, i, k):
    """
    Probability that KC i is a prerequisite of KC k.

    Raises:
        ValueError: If i == k or an index is out of range.
    """
    _check_index(graph, i)
    _check_index(graph, k)
    if i == k:
        raise ValueError("edge_probability is undefined for self-edges")
    u_i, u_k = graph.U[i], graph.U[k]
    skew = graph.M - graph.M.T
    return float(expit(u_i @ u_k) * expit(u_i @ skew @ u_k))


def adjacency_matrix(graph):
    """Full K x K matrix a[i, k] = edge_probability(i, k) with a zero diagonal."""
    existence = expit(graph.U @ graph.U.T)
    direction = expit(graph.U @ (graph.M - graph.M.T) @ graph.U.T)
    adjacency = existence * direction
    np.fill_diagonal(adjacency, 0.0)
    return adjacency


def similarity_matrix(graph):
    """Symmetric existence probabilities sigmoid(u_i^T u_k), zero diagonal."""
    similarity = expit(graph.U @ graph.U.T)
    np.fill_diagonal(similarity, 0.0)
    return similarity


def structural_means(z, adjacency, mu, gamma):
    """
    Vectorised structure-adjusted long-term means.

    Parameters:
        z (array): (..., K) knowledge states.
        adjacency (array): K x K adjacency with zero diagonal.
        mu (array): (...) long-term means.
        gamma (array): (...) transfer abilities.

    Returns:
        array: (..., K) with entry k = mu + gamma / K * sum_{i != k} a[i, k] z[i].
    """
    z = np.asarray(z, dtype=float)
    n_kcs = z.shape[-1]
    mu = np.asarray(mu, dtype=float)[..., None]
    gamma = np.asarray(gamma, dtype=float)[..., None]
    return mu + gamma / n_kcs * (z @ adjacency)


def structural_mean(z, adjacency, mu, gamma, k):
    z = np.asarray(z, dtype=float)
    if not 0 <= k < z.shape[-1]:
        raise ValueError(f"kc index {k} outside [0, {z.shape[-1]})")
    return float(structural_means(z, adjacency, mu, gamma)[k])


def export_edges(graph, filename, threshold=0.5, vocabulary=None):
    """
    Writes source_kc,target_kc,probability for every pair above threshold,
    sorted by decreasing probability.
    """
    adjacency = adjacency_matrix(graph)
    names = list(vocabulary) if vocabulary is not None else [str(k) for k in range(graph.n_kcs)]
    sources, targets = np.nonzero(adjacency > threshold)
    frame = pd.DataFrame({
        "source_kc": [names[i] for i in sources],
        "target_kc": [names[k] for k in targets],
        "probability": adjacency[sources, targets],
    })
    frame = frame.sort_values(["probability", "source_kc", "target_kc"], ascending=[False, True, True], kind="stable")
    frame.to_csv(filename, index=False)
    logging.info(f"Exported {len(frame)} edges above {threshold} to {filename}")
    return frame


def draw_strong_edges(n_kcs, n_edges, seed):
    """Random directed edges without self-loops or mutual pairs."""
    rng = np.random.default_rng(seed)
    candidates = [(i, k) for i in range(n_kcs) for k in range(n_kcs) if i < k]
    if n_edges > len(candidates):
        raise ValueError(f"cannot place {n_edges} edges among {n_kcs} KCs")
    chosen = rng.choice(len(candidates), size=n_edges, replace=False)
    edges = []
    for c in sorted(chosen.tolist()):
        i, k = candidates[c]
        edges.append((i, k) if rng.random() < 0.5 else (k, i))
    return edges


def strong_edge_graph(n_kcs, edges, dim=16, seed=0, steps=3000, edge_target=0.95, background=0.02):
    """
    Fits U, M so that the listed edges carry high probability and all other
    pairs stay near background.

    Used to build ground-truth graphs for simulated cohorts.

    Returns:
        PrerequisiteGraph: Graph whose adjacency approximates the target.
    """
    target = np.full((n_kcs, n_kcs), background)
    for i, k in edges:
        target[i, k] = edge_target
    off_diagonal = torch.tensor(1.0 - np.eye(n_kcs), dtype=torch.float64)
    target = torch.tensor(target, dtype=torch.float64)

    generator = torch.Generator().manual_seed(int(seed))
    U = torch.nn.Parameter(torch.randn(n_kcs, dim, generator=generator, dtype=torch.float64) * 0.5)
    M = torch.nn.Parameter(torch.randn(dim, dim, generator=generator, dtype=torch.float64) * 0.5)
    optimizer = torch.optim.Adam([U, M], lr=0.05)
    for _ in range(steps):
        optimizer.zero_grad()
        adjacency = torch.sigmoid(U @ U.T) * torch.sigmoid(U @ (M - M.T) @ U.T)
        adjacency = adjacency.clamp(1e-9, 1.0 - 1e-9)
        loss = -(off_diagonal * (target * torch.log(adjacency) + (1 - target) * torch.log1p(-adjacency))).sum()
        loss.backward()
        optimizer.step()

    graph = PrerequisiteGraph(U.detach().numpy().copy(), M.detach().numpy().copy())
    adjacency = adjacency_matrix(graph)
    weakest = min(adjacency[i, k] for i, k in edges) if edges else float("nan")
    logging.info(f"strong_edge_graph: {len(edges)} edges, weakest edge probability {weakest:.3f}")
    return graph
