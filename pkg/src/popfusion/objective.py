"""Composite training objective: masked cross-entropy readout, per-modality
graph smoothness/degree regularization, and the reward regularizer."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import TrainingError, ValidationError

DEGREE_LOG_GUARD = 1e-12


@dataclass
class HeadParams:
    w1: ad.Parameter
    b1: ad.Parameter
    w2: ad.Parameter
    b2: ad.Parameter

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]


def init_head_params(d_hidden: int, rng, n_classes: int = 2) -> HeadParams:
    mid = max(8, d_hidden // 2)

    def xavier(fan_out, fan_in):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return ad.Parameter(rng.uniform(-bound, bound, size=(fan_out, fan_in)))

    return HeadParams(w1=xavier(mid, d_hidden), b1=ad.Parameter(np.zeros(mid)),
                      w2=xavier(n_classes, mid), b2=ad.Parameter(np.zeros(n_classes)))


def classification_head(z, head: HeadParams, train_mask, labels):
    """Two-layer perceptron readout over all nodes; cross-entropy averaged
    over the training mask only (transductive)."""
    z = ad.as_tensor(z)
    train_mask = np.asarray(train_mask)
    mask_idx = np.flatnonzero(train_mask) if train_mask.dtype == bool else train_mask
    if len(mask_idx) == 0:
        raise ValidationError("training mask is empty")
    labels = np.asarray(labels, dtype=np.int64)
    logits = ad.linear(ad.relu(ad.linear(z, head.w1, head.b1)), head.w2, head.b2)
    logp = ad.log_softmax(logits, axis=1)
    picked = logp[(mask_idx, labels[mask_idx])]
    l_ce = -ad.reduce_mean(picked)
    return logits, l_ce


def graph_regularization(z_sp, adjacency):
    """Smoothness (1/2N^2) sum_ij A_ij ||z_i - z_j||^2 and degree penalty
    -(1/N) sum_i log(row_sum_i), guarded inside the log."""
    z = ad.as_tensor(z_sp)
    a = ad.as_tensor(adjacency)
    n = z.shape[0]
    if a.shape != (n, n):
        raise ValidationError("adjacency shape does not match the embeddings")
    sq = ad.reduce_sum(z * z, axis=1, keepdims=True)      # (n, 1)
    pair_sq = sq + ad.transpose(sq) - 2.0 * ad.matmul(z, ad.transpose(z))
    l_smh = ad.reduce_sum(a * pair_sq) * (1.0 / (2.0 * n * n))
    degrees = ad.reduce_sum(a, axis=1)
    l_deg = -ad.reduce_mean(ad.log(degrees + DEGREE_LOG_GUARD))
    return l_smh, l_deg


@dataclass
class LossBreakdown:
    l_ce: float
    l_smh_img: float
    l_smh_non: float
    l_deg: float
    l_r: float
    l_total: float
    omega_img: float
    omega_non: float
    lambda_smooth: float
    mu_degree: float
    eta_reward: float

    def as_row(self):
        return (self.l_ce, self.l_smh_img, self.l_smh_non, self.l_deg,
                self.l_r, self.l_total)


def total_objective(l_ce, l_smh_img, l_smh_non, l_deg, l_r, omega_img, omega_non,
                    lambda_smooth: float, mu_degree: float, eta_reward: float):
    """Combine the components: l_ce + w_img*(lam*smh_img + mu*deg)
    + w_non*(lam*smh_non + mu*deg + eta*l_r). Returns the total tensor and a
    float breakdown; aborts on any non-finite component."""
    parts = {"l_ce": l_ce, "l_smh_img": l_smh_img, "l_smh_non": l_smh_non,
             "l_deg": l_deg, "l_r": l_r, "omega_img": omega_img,
             "omega_non": omega_non}
    values = {}
    for name, part in parts.items():
        val = part.item() if isinstance(part, ad.Tensor) else float(part)
        if not np.isfinite(val):
            raise TrainingError(f"non-finite objective component: {name} = {val}")
        values[name] = val
    total = (l_ce
             + omega_img * (lambda_smooth * l_smh_img + mu_degree * l_deg)
             + omega_non * (lambda_smooth * l_smh_non + mu_degree * l_deg
                            + eta_reward * l_r))
    total_val = total.item() if isinstance(total, ad.Tensor) else float(total)
    if not np.isfinite(total_val):
        raise TrainingError("non-finite objective component: l_total")
    breakdown = LossBreakdown(
        l_ce=values["l_ce"], l_smh_img=values["l_smh_img"],
        l_smh_non=values["l_smh_non"], l_deg=values["l_deg"], l_r=values["l_r"],
        l_total=total_val, omega_img=values["omega_img"],
        omega_non=values["omega_non"], lambda_smooth=lambda_smooth,
        mu_degree=mu_degree, eta_reward=eta_reward)
    return total, breakdown
