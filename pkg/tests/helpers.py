"""Shared test utilities: finite differences, brute-force oracles, and small
cohort builders."""

import numpy as np

from popfusion import autodiff as ad
from popfusion.data import AttributeSpec, generate_synthetic_cohort


def fd_gradient(fn, param: ad.Parameter, indices, step: float = 1e-5):
    """Central finite differences of the scalar fn() wrt param coordinates."""
    flat = param.data.ravel()
    grads = []
    for i in indices:
        orig = flat[i]
        flat[i] = orig + step
        hi = fn()
        flat[i] = orig - step
        lo = fn()
        flat[i] = orig
        grads.append((hi - lo) / (2.0 * step))
    return np.array(grads)


def check_gradients(loss_fn, params, rng, n_samples=12, step=1e-5, tol=1e-4,
                    atol=1e-7):
    """Backward pass vs FD on randomly sampled coordinates; returns the worst
    relative error observed. Differences below atol are FD truncation noise
    on negligible gradients and pass outright."""
    total = loss_fn()
    for p in params:
        p.grad = None
    total.backward()
    worst = 0.0
    for _ in range(n_samples):
        p = params[rng.integers(len(params))]
        i = int(rng.integers(p.data.size))
        fd = fd_gradient(lambda: loss_fn().item(), p, [i], step)[0]
        an = p.grad.ravel()[i] if p.grad is not None else 0.0
        if abs(fd - an) <= atol:
            continue
        rel = abs(fd - an) / max(abs(fd), abs(an))
        worst = max(worst, rel)
        assert rel <= tol, f"gradient mismatch: fd={fd} analytic={an} rel={rel}"
    return worst


def pairwise_pearson_oracle(ts: np.ndarray) -> np.ndarray:
    """Direct per-pair Pearson formula, row-major strict upper triangle."""
    n = ts.shape[0]
    out = []
    for i in range(n):
        for j in range(i + 1, n):
            a = ts[i] - ts[i].mean()
            b = ts[j] - ts[j].mean()
            denom = np.sqrt((a @ a) * (b @ b))
            out.append(0.0 if denom == 0 else float(np.clip((a @ b) / denom, -1, 1)))
    return np.array(out)


def affinity_oracle(phenotypes, labels, split_codes, tolerances, alpha, beta_r,
                    beta_p, beta_m):
    """Independent per-pair re-evaluation of the reward affinity: rebuild the
    three indicator cases from raw values and push through the sigmoid."""
    n, v = phenotypes.shape
    c = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                c[i, j] = 0.5
                continue
            total = 0.0
            for u in range(v):
                match = abs(phenotypes[i, u] - phenotypes[j, u]) <= tolerances[u]
                r = p = m = 0
                if match:
                    if split_codes[i] == 2 and split_codes[j] == 2:
                        m = 1
                    elif split_codes[i] != 2 and split_codes[j] != 2:
                        if labels[i] == labels[j]:
                            r = 1
                        else:
                            p = 1
                total += alpha[u] * (beta_r[u] * r + beta_p[u] * p + beta_m[u] * m)
            c[i, j] = 1.0 / (1.0 + np.exp(-total))
    return c


def small_cohort(seed=0, n=24, n_roi=6, informativeness=(0.7, 0.2)):
    attrs = [
        AttributeSpec(name="site", kind="categorical", vocabulary=("a", "b", "c")),
        AttributeSpec(name="age", kind="continuous", tolerance=2.0),
    ]
    return generate_synthetic_cohort(n, n_roi, attrs, informativeness, seed)


def random_graph(rng, n, d, self_loops=True):
    """Random symmetric weighted adjacency with unit diagonal plus features."""
    h = rng.normal(size=(n, d))
    a = rng.random((n, n))
    a = (a + a.T) / 2.0
    a[a < 0.3] = 0.0
    if self_loops:
        np.fill_diagonal(a, 1.0)
    return h, a
