"""Attention fusion of the two modality encoders into shared and joint
embeddings, plus the modality contribution weights."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import ValidationError

TRACE_GUARD = 1e-12


@dataclass
class FusionParams:
    w_shared: ad.Parameter
    b_shared: ad.Parameter
    w_img: ad.Parameter
    b_img: ad.Parameter
    w_non: ad.Parameter
    b_non: ad.Parameter

    def parameters(self):
        return [self.w_shared, self.b_shared, self.w_img, self.b_img,
                self.w_non, self.b_non]


def init_fusion_params(d_hidden: int, rng) -> FusionParams:
    bound = math.sqrt(6.0 / (2 * d_hidden))

    def w():
        return ad.Parameter(rng.uniform(-bound, bound, size=(d_hidden, d_hidden)))

    return FusionParams(w_shared=w(), b_shared=ad.Parameter(np.zeros(d_hidden)),
                        w_img=w(), b_img=ad.Parameter(np.zeros(d_hidden)),
                        w_non=w(), b_non=ad.Parameter(np.zeros(d_hidden)))


@dataclass
class JointEmbedding:
    z_sp_img: ad.Tensor
    z_sp_non: ad.Tensor
    z_shared: ad.Tensor   # elementwise mean of the two specific embeddings
    z_joint: ad.Tensor
    tau_shared: ad.Tensor
    tau_img: ad.Tensor
    tau_non: ad.Tensor


def fuse_modalities(z_sp_img, z_sp_non, params: FusionParams) -> JointEmbedding:
    """Shared embedding is the average of the two channels; tanh attention
    maps gate each stream elementwise into the joint representation."""
    z_img = ad.as_tensor(z_sp_img)
    z_non = ad.as_tensor(z_sp_non)
    if z_img.shape != z_non.shape:
        raise ValidationError("modality embeddings must share a shape")
    z_shared = (z_img + z_non) * 0.5
    tau_shared = ad.tanh(ad.linear(z_shared, params.w_shared, params.b_shared))
    tau_img = ad.tanh(ad.linear(z_img, params.w_img, params.b_img))
    tau_non = ad.tanh(ad.linear(z_non, params.w_non, params.b_non))
    z_joint = tau_shared * z_shared + tau_img * z_img + tau_non * z_non
    return JointEmbedding(z_sp_img=z_img, z_sp_non=z_non, z_shared=z_shared,
                          z_joint=z_joint, tau_shared=tau_shared,
                          tau_img=tau_img, tau_non=tau_non)


def contribution_weights(tau_img, tau_non, tau_shared, guard: float = TRACE_GUARD):
    """Softmax over the squared-Frobenius trace ratios of each specific
    attention map against the shared one; sums to 1 and stays differentiable
    through the attention maps."""
    tau_img = ad.as_tensor(tau_img)
    tau_non = ad.as_tensor(tau_non)
    tau_shared = ad.as_tensor(tau_shared)
    if tau_img.shape != tau_non.shape or tau_img.shape != tau_shared.shape:
        raise ValidationError("attention maps must share a shape")
    denom = ad.reduce_sum(tau_shared * tau_shared) + guard
    f_img = ad.reduce_sum(tau_img * tau_img) / denom
    f_non = ad.reduce_sum(tau_non * tau_non) / denom
    scores = ad.concat([ad.reshape(f_img, (1,)), ad.reshape(f_non, (1,))], axis=0)
    weights = ad.softmax(scores, axis=0)
    return weights[0], weights[1]
