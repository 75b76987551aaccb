"""Per-pair numeric kernels, numba-compiled with pure-numpy fallbacks.

Set POPFUSION_DISABLE_NUMBA=1 to force the numpy path everywhere. Both
implementations of every kernel stay importable; tests pin their agreement
and benchmarks/bench_kernels.py compares throughput. The branchy pairwise
match-table kernel is where jit pays off (>30x at cohort scale); the two
correlation kernels reduce to BLAS matmuls, so their default stays numpy
and the jit variants exist for the comparison and as alternatives.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only on bare installs
    _HAVE_NUMBA = False

USE_NUMBA = _HAVE_NUMBA and os.environ.get("POPFUSION_DISABLE_NUMBA", "") != "1"


# ---- Pearson upper-triangle vector ------------------------------------


def pearson_upper_numpy(ts: np.ndarray) -> np.ndarray:
    """Pairwise Pearson correlations of the rows of ts, strict upper
    triangle in row-major order. Pairs involving a constant row get 0."""
    ts = np.asarray(ts, dtype=np.float64)
    centered = ts - ts.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = (centered @ centered.T) / np.outer(norms, norms)
    corr[~np.isfinite(corr)] = 0.0
    np.clip(corr, -1.0, 1.0, out=corr)
    iu = np.triu_indices(ts.shape[0], k=1)
    return corr[iu]


if _HAVE_NUMBA:

    @njit(cache=True)
    def _pearson_upper_numba(ts):
        n, t = ts.shape
        out = np.empty(n * (n - 1) // 2, dtype=np.float64)
        means = np.empty(n, dtype=np.float64)
        for i in range(n):
            means[i] = ts[i].mean()
        k = 0
        for i in range(n):
            for j in range(i + 1, n):
                num = 0.0
                ssi = 0.0
                ssj = 0.0
                for s in range(t):
                    a = ts[i, s] - means[i]
                    b = ts[j, s] - means[j]
                    num += a * b
                    ssi += a * a
                    ssj += b * b
                denom = np.sqrt(ssi * ssj)
                r = num / denom if denom > 0.0 else 0.0
                out[k] = min(1.0, max(-1.0, r))
                k += 1
        return out


def pearson_upper(ts: np.ndarray) -> np.ndarray:
    # BLAS-bound: the numpy path is the fast one (see benchmarks)
    return pearson_upper_numpy(ts)


# ---- pairwise correlation distance ------------------------------------


def correlation_distance_numpy(x: np.ndarray) -> np.ndarray:
    """rho[i, j] = 1 - Pearson(x_i, x_j); 1 whenever a row has zero
    variance (maximal dissimilarity, avoids NaN)."""
    x = np.asarray(x, dtype=np.float64)
    centered = x - x.mean(axis=1, keepdims=True)
    norms = np.sqrt((centered * centered).sum(axis=1))
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = (centered @ centered.T) / np.outer(norms, norms)
    rho = 1.0 - np.clip(corr, -1.0, 1.0)
    degenerate = norms == 0.0
    rho[degenerate, :] = 1.0
    rho[:, degenerate] = 1.0
    np.fill_diagonal(rho, np.where(degenerate, 1.0, 0.0))
    return rho


if _HAVE_NUMBA:

    @njit(cache=True)
    def _correlation_distance_numba(x):
        n, d = x.shape
        rho = np.empty((n, n), dtype=np.float64)
        centered = np.empty_like(x)
        norms = np.empty(n, dtype=np.float64)
        for i in range(n):
            m = x[i].mean()
            ss = 0.0
            for s in range(d):
                c = x[i, s] - m
                centered[i, s] = c
                ss += c * c
            norms[i] = np.sqrt(ss)
        for i in range(n):
            rho[i, i] = 1.0 if norms[i] == 0.0 else 0.0
            for j in range(i + 1, n):
                if norms[i] == 0.0 or norms[j] == 0.0:
                    r = 1.0
                else:
                    num = 0.0
                    for s in range(d):
                        num += centered[i, s] * centered[j, s]
                    c = num / (norms[i] * norms[j])
                    r = 1.0 - min(1.0, max(-1.0, c))
                rho[i, j] = r
                rho[j, i] = r
        return rho


def correlation_distance(x: np.ndarray) -> np.ndarray:
    # BLAS-bound: the numpy path is the fast one (see benchmarks)
    return correlation_distance_numpy(x)


# ---- pairwise attribute match tables ----------------------------------


def match_tables_numpy(values: np.ndarray, tolerances: np.ndarray,
                       labels: np.ndarray, is_test: np.ndarray):
    """Per-attribute reward/penalty/motivation indicator stacks (v, N, N).

    A pair matches on attribute u when |values[i,u] - values[j,u]| <= tol_u
    (tolerance 0 = exact ordinal match). Reward: match + both non-test +
    same label. Penalty: match + both non-test + different label.
    Motivation: match + both test; test labels are never consulted.
    """
    values = np.asarray(values, dtype=np.float64)
    n, v = values.shape
    is_test = np.asarray(is_test, dtype=bool)
    labels = np.asarray(labels, dtype=np.int64)
    both_test = is_test[:, None] & is_test[None, :]
    both_nontest = ~is_test[:, None] & ~is_test[None, :]
    same = labels[:, None] == labels[None, :]
    reward = np.zeros((v, n, n), dtype=np.uint8)
    penalty = np.zeros((v, n, n), dtype=np.uint8)
    motivation = np.zeros((v, n, n), dtype=np.uint8)
    for u in range(v):
        col = values[:, u]
        match = np.abs(col[:, None] - col[None, :]) <= tolerances[u]
        np.fill_diagonal(match, False)
        reward[u] = match & both_nontest & same
        penalty[u] = match & both_nontest & ~same
        motivation[u] = match & both_test
    return reward, penalty, motivation


if _HAVE_NUMBA:

    @njit(cache=True)
    def _match_tables_numba(values, tolerances, labels, is_test):
        n, v = values.shape
        reward = np.zeros((v, n, n), dtype=np.uint8)
        penalty = np.zeros((v, n, n), dtype=np.uint8)
        motivation = np.zeros((v, n, n), dtype=np.uint8)
        for u in range(v):
            tol = tolerances[u]
            for i in range(n):
                for j in range(i + 1, n):
                    if abs(values[i, u] - values[j, u]) <= tol:
                        if is_test[i] and is_test[j]:
                            motivation[u, i, j] = 1
                            motivation[u, j, i] = 1
                        elif (not is_test[i]) and (not is_test[j]):
                            if labels[i] == labels[j]:
                                reward[u, i, j] = 1
                                reward[u, j, i] = 1
                            else:
                                penalty[u, i, j] = 1
                                penalty[u, j, i] = 1
        return reward, penalty, motivation


def match_tables(values: np.ndarray, tolerances: np.ndarray,
                 labels: np.ndarray, is_test: np.ndarray):
    if USE_NUMBA:
        return _match_tables_numba(
            np.ascontiguousarray(values, dtype=np.float64),
            np.ascontiguousarray(tolerances, dtype=np.float64),
            np.ascontiguousarray(labels, dtype=np.int64),
            np.ascontiguousarray(is_test, dtype=np.bool_),
        )
    return match_tables_numpy(values, np.asarray(tolerances, dtype=np.float64),
                              labels, is_test)


def warmup() -> None:
    """Trigger jit compilation on tiny inputs (no-op on the numpy path)."""
    if USE_NUMBA:
        ts = np.arange(12.0).reshape(3, 4)
        _pearson_upper_numba(ts)
        _correlation_distance_numba(ts)
    match_tables(np.zeros((3, 2)), np.zeros(2), np.zeros(3, dtype=np.int64),
                 np.zeros(3, dtype=bool))
