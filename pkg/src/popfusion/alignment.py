"""Bring both modalities to a common width d: recursive feature elimination
for imaging features, pretrained reconstructors lifting the tabular ones."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .errors import TrainingError, ValidationError

CHECKPOINT_VERSION = 1
RECONSTRUCTOR_KINDS = ("vae", "mlp", "ae", "none")


# ---- recursive feature elimination -------------------------------------


def _ridge_weights(x: np.ndarray, y_pm: np.ndarray, alpha: float = 1.0) -> np.ndarray:
    """L2-regularized linear scorer; solved in the cheaper of primal or dual
    space (feature count routinely exceeds sample count here)."""
    n, d = x.shape
    if d <= n:
        gram = x.T @ x
        gram[np.diag_indices(d)] += alpha
        return np.linalg.solve(gram, x.T @ y_pm)
    outer = x @ x.T
    outer[np.diag_indices(n)] += alpha
    return x.T @ np.linalg.solve(outer, y_pm)


@dataclass
class RfeReducer:
    selected_mask: np.ndarray  # bool, length d1
    target_dim: int
    elimination_step: float
    fit_seed: int

    @property
    def input_dim(self) -> int:
        return len(self.selected_mask)


def fit_rfe(train_features: np.ndarray, train_labels, target_dim: int,
            step: float = 0.1, seed: int = 0) -> RfeReducer:
    """Iteratively drop the lowest-|weight| `step` fraction of surviving
    features under a ridge scorer until `target_dim` remain."""
    x = np.asarray(train_features, dtype=np.float64)
    y = np.asarray(train_labels, dtype=np.int64)
    if x.ndim != 2:
        raise ValidationError("train_features must be a 2-D matrix")
    d1 = x.shape[1]
    if not 0 < target_dim < d1:
        raise ValidationError(f"target dim {target_dim} must lie in (0, {d1})")
    if len(np.unique(y)) < 2:
        raise ValidationError("RFE needs both classes in the training set")
    if not 0 < step < 1:
        raise ValidationError("elimination step must lie in (0, 1)")

    y_pm = 2.0 * y - 1.0
    surviving = np.arange(d1)
    while len(surviving) > target_dim:
        w = _ridge_weights(x[:, surviving], y_pm)
        n_drop = min(max(1, int(step * len(surviving))), len(surviving) - target_dim)
        order = np.argsort(np.abs(w), kind="stable")
        surviving = np.delete(surviving, order[:n_drop])
    mask = np.zeros(d1, dtype=bool)
    mask[surviving] = True
    return RfeReducer(selected_mask=mask, target_dim=target_dim,
                      elimination_step=step, fit_seed=seed)


def apply_rfe(reducer: RfeReducer, features: np.ndarray) -> np.ndarray:
    """Column subset in original column order."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape[1] != reducer.input_dim:
        raise ValidationError(
            f"feature width {x.shape[1]} does not match the fitted width "
            f"{reducer.input_dim}")
    return x[:, reducer.selected_mask]


# ---- tabular feature reconstructors -------------------------------------


@dataclass
class PretrainConfig:
    learning_rate: float = 1e-3
    weight_decay: float = 5e-4
    epochs: int = 3000
    seed: int = 0


@dataclass
class Reconstructor:
    """Frozen lift from tabular width d_in to latent width d_latent."""

    kind: str
    d_in: int
    d_latent: int
    weights: dict = field(default_factory=dict)  # name -> ndarray
    frozen: bool = False
    loss_trace: list = field(default_factory=list)
    pretrain_cohort: str = ""
    config: PretrainConfig = field(default_factory=PretrainConfig)

    def encode(self, x: np.ndarray) -> np.ndarray:
        """Deterministic latent representation (posterior mean for the
        variational kind; no sampling)."""
        if not self.frozen:
            raise ValidationError("reconstructor must be frozen before encoding")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValidationError(f"expected input width {self.d_in}, got {x.shape}")
        w = self.weights
        if self.kind == "none":
            out = np.zeros((x.shape[0], self.d_latent))
            k = min(self.d_in, self.d_latent)
            out[:, :k] = x[:, :k]
            return out
        if self.kind == "ae":
            return x @ w["enc_w"].T + w["enc_b"]
        hidden = np.maximum(x @ w["enc_w"].T + w["enc_b"], 0.0)
        return hidden @ w["mu_w"].T + w["mu_b"]


def hidden_width(d_in: int) -> int:
    return max(16, 2 * d_in)


def gaussian_kl(mu: ad.Tensor, logvar: ad.Tensor) -> ad.Tensor:
    """KL(N(mu, exp(logvar)) || N(0, I)), averaged over rows."""
    term = ad.exp(logvar) + mu * mu - logvar - 1.0
    return ad.reduce_sum(term) * (0.5 / mu.shape[0])


def _xavier(rng, fan_out, fan_in):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return ad.Parameter(rng.uniform(-bound, bound, size=(fan_out, fan_in)))


def pretrain_reconstructor(nonimaging: np.ndarray, d_latent: int,
                           config: PretrainConfig | None = None,
                           kind: str = "vae",
                           cohort_id: str = "") -> Reconstructor:
    """Fit the chosen reconstructor on the tabular rows and freeze it.

    vae: nonlinear encoder/decoder trained on reconstruction + KL.
    mlp: same encoder/decoder without the variational term.
    ae:  linear autoencoder, reconstruction only.
    none: untrained zero-pad lift.
    """
    if kind not in RECONSTRUCTOR_KINDS:
        raise ValidationError(f"unknown reconstructor kind {kind!r}")
    config = config or PretrainConfig()
    x = np.asarray(nonimaging, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValidationError("non-imaging matrix must be 2-D with >= 1 column")
    d_in = x.shape[1]
    model = Reconstructor(kind=kind, d_in=d_in, d_latent=d_latent,
                          pretrain_cohort=cohort_id, config=config)
    if kind == "none":
        model.frozen = True
        return model
    if config.epochs < 1:
        raise ValidationError("pretraining needs at least 1 epoch")

    rng = np.random.default_rng(config.seed)
    h = hidden_width(d_in)
    if kind == "ae":
        params = {
            "enc_w": _xavier(rng, d_latent, d_in),
            "enc_b": ad.Parameter(np.zeros(d_latent)),
            "dec_w": _xavier(rng, d_in, d_latent),
            "dec_b": ad.Parameter(np.zeros(d_in)),
        }
    else:
        params = {
            "enc_w": _xavier(rng, h, d_in),
            "enc_b": ad.Parameter(np.zeros(h)),
            "mu_w": _xavier(rng, d_latent, h),
            "mu_b": ad.Parameter(np.zeros(d_latent)),
            "dec_w": _xavier(rng, h, d_latent),
            "dec_b": ad.Parameter(np.zeros(h)),
            "out_w": _xavier(rng, d_in, h),
            "out_b": ad.Parameter(np.zeros(d_in)),
        }
        if kind == "vae":
            params["lv_w"] = _xavier(rng, d_latent, h)
            params["lv_b"] = ad.Parameter(np.zeros(d_latent))

    opt = ad.Adam(params.values(), lr=config.learning_rate,
                  weight_decay=config.weight_decay)
    data = ad.Tensor(x)
    for epoch in range(config.epochs):
        kl_val = 0.0
        if kind == "ae":
            z = ad.linear(data, params["enc_w"], params["enc_b"])
            recon = ad.linear(z, params["dec_w"], params["dec_b"])
        else:
            hidden = ad.relu(ad.linear(data, params["enc_w"], params["enc_b"]))
            mu = ad.linear(hidden, params["mu_w"], params["mu_b"])
            z = mu
            if kind == "vae":
                logvar = ad.linear(hidden, params["lv_w"], params["lv_b"])
                noise = ad.Tensor(rng.standard_normal(mu.shape))
                z = mu + ad.exp(logvar * 0.5) * noise
            dec_h = ad.relu(ad.linear(z, params["dec_w"], params["dec_b"]))
            recon = ad.linear(dec_h, params["out_w"], params["out_b"])
        diff = recon - data
        recon_loss = ad.reduce_sum(diff * diff) * (1.0 / x.shape[0])
        if kind == "vae":
            kl = gaussian_kl(mu, logvar)
            loss = recon_loss + kl
            kl_val = kl.item()
        else:
            loss = recon_loss
        if not np.isfinite(loss.item()):
            raise TrainingError(
                f"non-finite pretraining loss at epoch {epoch} "
                f"(recon={recon_loss.item():.4g}, kl={kl_val:.4g})")
        model.loss_trace.append((epoch, recon_loss.item(), float(kl_val), loss.item()))
        opt.zero_grad()
        loss.backward()
        opt.step()

    model.weights = {name: p.data.copy() for name, p in params.items()}
    model.frozen = True
    return model


def pretrain_vae(nonimaging: np.ndarray, d_latent: int,
                 config: PretrainConfig | None = None,
                 cohort_id: str = "") -> Reconstructor:
    return pretrain_reconstructor(nonimaging, d_latent, config, kind="vae",
                                  cohort_id=cohort_id)


def encode_nonimaging(model: Reconstructor, nonimaging: np.ndarray) -> np.ndarray:
    return model.encode(nonimaging)


# ---- checkpoint serialization -------------------------------------------


def save_reconstructor(model: Reconstructor, path) -> None:
    if not model.frozen:
        raise ValidationError("only frozen reconstructors are saved")
    payload = {
        "checkpoint_version": np.array(CHECKPOINT_VERSION),
        "kind": np.array(model.kind),
        "d_in": np.array(model.d_in),
        "d_latent": np.array(model.d_latent),
        "pretrain_cohort": np.array(model.pretrain_cohort),
        "loss_trace": np.array(model.loss_trace, dtype=np.float64).reshape(-1, 4),
        "cfg": np.array([model.config.learning_rate, model.config.weight_decay,
                         model.config.epochs, model.config.seed]),
    }
    for name, arr in model.weights.items():
        payload[f"w_{name}"] = arr
    np.savez(path, **payload)


def load_reconstructor(path) -> Reconstructor:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    with np.load(path, allow_pickle=False) as blob:
        version = int(blob["checkpoint_version"])
        if version != CHECKPOINT_VERSION:
            raise ValidationError(f"unsupported checkpoint version {version}")
        cfg = blob["cfg"]
        model = Reconstructor(
            kind=str(blob["kind"]),
            d_in=int(blob["d_in"]),
            d_latent=int(blob["d_latent"]),
            pretrain_cohort=str(blob["pretrain_cohort"]),
            config=PretrainConfig(learning_rate=float(cfg[0]), weight_decay=float(cfg[1]),
                                  epochs=int(cfg[2]), seed=int(cfg[3])),
            loss_trace=[tuple(row) for row in blob["loss_trace"]],
        )
        model.weights = {key[2:]: blob[key].copy() for key in blob.files
                         if key.startswith("w_")}
    model.frozen = True
    return model
