"""Adaptive population-graph assembly: concatenated node features, kernel
similarity, elementwise affinity product, and stochastic edge dropout."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .kernels import correlation_distance


@dataclass
class PopulationGraph:
    x_img: np.ndarray
    x_non: np.ndarray
    x_cat: np.ndarray      # feature concatenation of the two channels
    adjacency: np.ndarray  # symmetric, unit diagonal
    affinity: np.ndarray
    sigma: float

    @property
    def n_subjects(self) -> int:
        return self.adjacency.shape[0]


def correlation_rho(x_i: np.ndarray, x_j: np.ndarray) -> float:
    """1 - Pearson correlation; zero-variance vectors are maximally
    dissimilar (rho = 1) to avoid NaN."""
    x_i = np.asarray(x_i, dtype=np.float64)
    x_j = np.asarray(x_j, dtype=np.float64)
    if x_i.shape != x_j.shape:
        raise ValidationError("vectors must have equal length")
    ci = x_i - x_i.mean()
    cj = x_j - x_j.mean()
    denom = np.sqrt((ci @ ci) * (cj @ cj))
    if denom == 0.0:
        return 1.0
    return float(1.0 - np.clip((ci @ cj) / denom, -1.0, 1.0))


def similarity_kernel(x_i: np.ndarray, x_j: np.ndarray, sigma: float) -> float:
    """Gaussian kernel over the correlation distance, in (0, 1]."""
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    rho = correlation_rho(x_i, x_j)
    return float(np.exp(-(rho * rho) / (2.0 * sigma * sigma)))


def similarity_matrix(x: np.ndarray, sigma: float) -> np.ndarray:
    if sigma <= 0:
        raise ValidationError("sigma must be positive")
    rho = correlation_distance(np.asarray(x, dtype=np.float64))
    return np.exp(-(rho * rho) / (2.0 * sigma * sigma))


def default_sigma(x: np.ndarray, train_idx=None) -> float:
    """Mean pairwise correlation distance over (training) rows."""
    x = np.asarray(x, dtype=np.float64)
    if train_idx is not None:
        x = x[np.asarray(train_idx)]
    if x.shape[0] < 2:
        return 1.0
    rho = correlation_distance(x)
    mean = rho[~np.eye(len(rho), dtype=bool)].mean()
    return float(mean) if mean > 0 else 1.0


def assemble_population_graph(x_img: np.ndarray, x_non: np.ndarray,
                              affinity: np.ndarray, sigma: float) -> PopulationGraph:
    """Concatenate channel features, then A_ij = Sim(x_i, x_j) * C_ij off the
    diagonal with self-loops fixed at 1."""
    x_img = np.asarray(x_img, dtype=np.float64)
    x_non = np.asarray(x_non, dtype=np.float64)
    affinity = np.asarray(affinity, dtype=np.float64)
    if x_img.shape[0] != x_non.shape[0]:
        raise ValidationError("channel row counts differ")
    n = x_img.shape[0]
    if affinity.shape != (n, n):
        raise ValidationError("affinity matrix shape does not match the cohort")
    if not np.allclose(affinity, affinity.T):
        raise ValidationError("affinity matrix must be symmetric")
    x_cat = np.concatenate([x_img, x_non], axis=1)
    sim = similarity_matrix(x_cat, sigma)
    adjacency = sim * affinity
    np.fill_diagonal(adjacency, 1.0)
    return PopulationGraph(x_img=x_img, x_non=x_non, x_cat=x_cat,
                           adjacency=adjacency, affinity=affinity, sigma=sigma)


def adjacency_from_affinity(sim: np.ndarray, affinity: ad.Tensor) -> ad.Tensor:
    """Tensor adjacency Sim (.) C with unit self-loops; gradients flow into
    the affinity matrix only (similarity is data-determined)."""
    n = sim.shape[0]
    off = sim * (1.0 - np.eye(n))
    return ad.Tensor(off) * affinity + ad.Tensor(np.eye(n))


def edge_dropout_mask(n: int, p: float, rng: np.random.Generator) -> np.ndarray:
    """Symmetric 0/1 mask; each unordered off-diagonal pair survives with
    probability 1-p, the diagonal always survives."""
    if not 0 <= p < 1:
        raise ValidationError("edge dropout rate must lie in [0, 1)")
    iu = np.triu_indices(n, k=1)
    keep = rng.random(len(iu[0])) >= p
    mask = np.ones((n, n))
    mask[iu] = keep
    mask.T[iu] = keep
    return mask


def apply_edge_dropout(adjacency: np.ndarray, p: float, seed: int,
                       training: bool = True) -> np.ndarray:
    """Randomly zero symmetric edge pairs during training; identity when not
    training or p = 0. Self-loops are never dropped."""
    adjacency = np.asarray(adjacency, dtype=np.float64)
    if not training or p == 0.0:
        if not 0 <= p < 1:
            raise ValidationError("edge dropout rate must lie in [0, 1)")
        return adjacency.copy()
    mask = edge_dropout_mask(adjacency.shape[0], p, np.random.default_rng(seed))
    return adjacency * mask


def threshold_adjacency(adjacency: np.ndarray, eps: float) -> np.ndarray:
    """Optional sparsification: zero off-diagonal entries below eps."""
    out = np.asarray(adjacency, dtype=np.float64).copy()
    off = ~np.eye(out.shape[0], dtype=bool)
    out[off & (out < eps)] = 0.0
    return out


def export_adjacency_coo(adjacency: np.ndarray, path) -> None:
    """Coordinate-list text dump (i, j, weight) of nonzero entries."""
    adjacency = np.asarray(adjacency)
    rows, cols = np.nonzero(adjacency)
    with Path(path).open("w") as fh:
        fh.write("i\tj\tweight\n")
        for i, j in zip(rows, cols):
            fh.write(f"{i}\t{j}\t{adjacency[i, j]:.10g}\n")
