"""Reward/penalty/motivation tables over subject pairs, simplex attribute
weights, the derived pairwise affinity matrix, and its value function."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ValidationError
from .kernels import match_tables

EPS_GUARD = 1e-8


@dataclass(frozen=True)
class BetaCoefficients:
    """Fixed per-attribute coefficients: reward > 0, penalty < 0,
    motivation > 0, with reward + motivation < |penalty|."""

    reward: np.ndarray
    penalty: np.ndarray
    motivation: np.ndarray

    def __post_init__(self):
        r = np.atleast_1d(np.asarray(self.reward, dtype=np.float64))
        p = np.atleast_1d(np.asarray(self.penalty, dtype=np.float64))
        m = np.atleast_1d(np.asarray(self.motivation, dtype=np.float64))
        if not (len(r) == len(p) == len(m)):
            raise ValidationError("beta coefficient arrays must share one length")
        if np.any(r <= 0) or np.any(m <= 0) or np.any(p >= 0):
            raise ValidationError(
                "beta constraint violated: need beta_reward > 0, beta_motivation > 0, "
                "beta_penalty < 0")
        if np.any(r + m >= np.abs(p)):
            raise ValidationError(
                "beta constraint violated: beta_reward + beta_motivation must be "
                "< |beta_penalty| for every attribute")
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "penalty", p)
        object.__setattr__(self, "motivation", m)

    @classmethod
    def uniform(cls, v: int, reward: float = 1.0, penalty: float = -2.0,
                motivation: float = 0.5) -> "BetaCoefficients":
        return cls(np.full(v, reward), np.full(v, penalty), np.full(v, motivation))

    @property
    def n_attributes(self) -> int:
        return len(self.reward)


@dataclass
class RewardTables:
    """Per-attribute indicator stacks (v, N, N); aggregated tables are the
    sums over attributes."""

    reward_u: np.ndarray
    penalty_u: np.ndarray
    motivation_u: np.ndarray

    def __post_init__(self):
        for name in ("reward_u", "penalty_u", "motivation_u"):
            stack = getattr(self, name)
            if stack.ndim != 3 or stack.shape[1] != stack.shape[2]:
                raise ValidationError(f"{name} must be a (v, N, N) stack")
            if not np.array_equal(stack, stack.transpose(0, 2, 1)):
                raise ValidationError(f"{name} must be symmetric")
            if np.any(np.diagonal(stack, axis1=1, axis2=2)):
                raise ValidationError(f"{name} must have zero diagonals")
        if np.any(self.reward_u.astype(bool) & self.penalty_u.astype(bool)):
            raise ValidationError("a pair cannot be both rewarded and penalized "
                                  "for the same attribute")

    @property
    def n_attributes(self) -> int:
        return self.reward_u.shape[0]

    @property
    def n_subjects(self) -> int:
        return self.reward_u.shape[1]

    @property
    def reward(self) -> np.ndarray:
        return self.reward_u.sum(axis=0, dtype=np.int64)

    @property
    def penalty(self) -> np.ndarray:
        return self.penalty_u.sum(axis=0, dtype=np.int64)

    @property
    def motivation(self) -> np.ndarray:
        return self.motivation_u.sum(axis=0, dtype=np.int64)


def build_reward_tables(cohort, split_codes) -> RewardTables:
    """Pairwise agreement tables for one fold split (codes: 0 train, 1 val,
    2 test). Reward/penalty pairs are restricted to non-test subjects, so
    test labels never enter; motivation marks matching test-test pairs."""
    split_codes = np.asarray(split_codes, dtype=np.int64)
    if len(split_codes) != cohort.n_subjects:
        raise ValidationError("split codes must cover every subject")
    values = cohort.phenotype_matrix()
    tolerances = cohort.schema.match_tolerances()
    r, p, m = match_tables(values, tolerances, cohort.labels(), split_codes == 2)
    return RewardTables(reward_u=r, penalty_u=p, motivation_u=m)


@dataclass
class AlphaWeights:
    """Simplex weights over attributes, parameterized by softmax logits."""

    logits: ad.Parameter

    @classmethod
    def uniform(cls, v: int) -> "AlphaWeights":
        return cls(logits=ad.Parameter(np.zeros(v)))

    def tensor(self) -> ad.Tensor:
        return ad.softmax(self.logits, axis=0)

    def values(self) -> np.ndarray:
        with ad.no_grad():
            return self.tensor().data.copy()


def score_stack(tables: RewardTables, beta: BetaCoefficients) -> np.ndarray:
    """Per-attribute pairwise scores beta_r*R_u + beta_p*P_u + beta_m*M_u."""
    if beta.n_attributes != tables.n_attributes:
        raise ValidationError("beta coefficients do not match the attribute count")
    shape = (-1, 1, 1)
    return (beta.reward.reshape(shape) * tables.reward_u
            + beta.penalty.reshape(shape) * tables.penalty_u
            + beta.motivation.reshape(shape) * tables.motivation_u).astype(np.float64)


def affinity_from_alpha(alpha, stack: np.ndarray) -> ad.Tensor:
    """Affinity matrix sigmoid(sum_u alpha_u * stack_u); differentiable in
    alpha when it is a tensor."""
    alpha = ad.as_tensor(alpha)
    weighted = ad.reduce_sum(ad.reshape(alpha, (-1, 1, 1)) * ad.Tensor(stack), axis=0)
    return ad.sigmoid(weighted)


def compute_affinity_matrix(tables: RewardTables, alpha, beta: BetaCoefficients) -> np.ndarray:
    """Numpy affinity matrix C in (0, 1); symmetric with 0.5 diagonal (graph
    assembly overrides the diagonal with the self-loop policy)."""
    alpha_arr = np.asarray(alpha.values() if isinstance(alpha, AlphaWeights) else alpha,
                           dtype=np.float64)
    if len(alpha_arr) != tables.n_attributes:
        raise ValidationError("alpha length does not match the attribute count")
    with ad.no_grad():
        return affinity_from_alpha(alpha_arr, score_stack(tables, beta)).data


def relu_gain_sums(tables: RewardTables, beta: BetaCoefficients) -> np.ndarray:
    """Per-attribute (1/N^2) * sum_ij ReLU(beta_r*R_u + beta_p*P_u); the
    motivation table is excluded from the value function."""
    n = tables.n_subjects
    shape = (-1, 1, 1)
    gain = (beta.reward.reshape(shape) * tables.reward_u
            + beta.penalty.reshape(shape) * tables.penalty_u)
    return np.maximum(gain, 0.0).sum(axis=(1, 2)) / float(n * n)


def q_from_gains(alpha, gains: np.ndarray):
    """Weighted gain Q = sum_u alpha_u * gains_u; stays a tensor when alpha
    is one (gradient flows into the attribute weights)."""
    if isinstance(alpha, AlphaWeights):
        alpha = alpha.tensor()
    if isinstance(alpha, ad.Tensor):
        return ad.reduce_sum(alpha * ad.Tensor(gains))
    return float(np.dot(np.asarray(alpha, dtype=np.float64), gains))


def compute_q_value(tables: RewardTables, alpha, beta: BetaCoefficients):
    """Value function over the tables at the given attribute weights."""
    return q_from_gains(alpha, relu_gain_sums(tables, beta))


def reward_loss(q_value, epsilon_guard: float = EPS_GUARD):
    """Reciprocal of the value function (minimizing it maximizes Q)."""
    if isinstance(q_value, ad.Tensor):
        return 1.0 / (q_value + epsilon_guard)
    if q_value < 0:
        raise ValidationError("q_value must be nonnegative")
    return 1.0 / (q_value + epsilon_guard)


# ---- exports -------------------------------------------------------------


def export_tables(tables: RewardTables, alpha_values: np.ndarray, out_dir) -> None:
    """Dump aggregated tables and alpha as numeric text matrices."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "reward_table.txt", tables.reward, fmt="%d")
    np.savetxt(out / "penalty_table.txt", tables.penalty, fmt="%d")
    np.savetxt(out / "motivation_table.txt", tables.motivation, fmt="%d")
    np.savetxt(out / "alpha.txt", np.atleast_1d(alpha_values), fmt="%.10f")
