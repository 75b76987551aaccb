"""Attention fusion and modality contribution weights."""

import numpy as np
import pytest

from popfusion import autodiff as ad
from popfusion.errors import ValidationError
from popfusion.fusion import (FusionParams, contribution_weights, fuse_modalities,
                              init_fusion_params)
from helpers import check_gradients


def _params(d, seed=0):
    return init_fusion_params(d, np.random.default_rng(seed))


def _zero_params(d):
    z = lambda *shape: ad.Parameter(np.zeros(shape))
    return FusionParams(w_shared=z(d, d), b_shared=z(d), w_img=z(d, d),
                        b_img=z(d), w_non=z(d, d), b_non=z(d))


def test_shared_embedding_of_equal_inputs_is_identity():
    rng = np.random.default_rng(0)
    z0 = rng.normal(size=(6, 4))
    emb = fuse_modalities(z0, z0.copy(), _params(4))
    np.testing.assert_array_equal(emb.z_shared.data, z0)


def test_zero_parameters_zero_joint_embedding():
    rng = np.random.default_rng(1)
    emb = fuse_modalities(rng.normal(size=(5, 3)), rng.normal(size=(5, 3)),
                          _zero_params(3))
    np.testing.assert_array_equal(emb.tau_shared.data, 0.0)
    np.testing.assert_array_equal(emb.z_joint.data, 0.0)


def test_fusion_matches_elementwise_reevaluation():
    rng = np.random.default_rng(2)
    z_img, z_non = rng.normal(size=(7, 5)), rng.normal(size=(7, 5))
    params = _params(5, seed=3)
    emb = fuse_modalities(z_img, z_non, params)
    z_sh = (z_img + z_non) / 2.0
    tau_sh = np.tanh(z_sh @ params.w_shared.data.T + params.b_shared.data)
    tau_i = np.tanh(z_img @ params.w_img.data.T + params.b_img.data)
    tau_n = np.tanh(z_non @ params.w_non.data.T + params.b_non.data)
    expected = tau_sh * z_sh + tau_i * z_img + tau_n * z_non
    np.testing.assert_allclose(emb.z_joint.data, expected, atol=1e-12)
    np.testing.assert_allclose(emb.z_shared.data, z_sh, atol=1e-12)


def test_fusion_shape_mismatch():
    with pytest.raises(ValidationError):
        fuse_modalities(np.zeros((3, 4)), np.zeros((4, 4)), _params(4))


def test_contribution_equal_scores_give_half():
    rng = np.random.default_rng(4)
    tau = rng.normal(size=(5, 3))
    w_img, w_non = contribution_weights(tau, tau.copy(), rng.normal(size=(5, 3)))
    assert w_img.item() == pytest.approx(0.5, abs=1e-12)
    assert w_non.item() == pytest.approx(0.5, abs=1e-12)


def test_contribution_softmax_of_trace_ratios():
    # engineered so f_img = 2 and f_non = 1 exactly
    tau_sh = np.zeros((1, 2))
    tau_sh[0, 0] = 1.0
    tau_img = np.zeros((1, 2))
    tau_img[0, 0] = np.sqrt(2.0)
    tau_non = np.zeros((1, 2))
    tau_non[0, 0] = 1.0
    w_img, w_non = contribution_weights(tau_img, tau_non, tau_sh, guard=0.0)
    expected = np.exp(2.0) / (np.exp(2.0) + np.exp(1.0))
    assert w_img.item() == pytest.approx(expected, abs=1e-9)
    assert w_img.item() == pytest.approx(0.731059, abs=1e-5)
    assert w_non.item() == pytest.approx(0.268941, abs=1e-5)


def test_contribution_weights_sum_to_one():
    rng = np.random.default_rng(5)
    for _ in range(5):
        w_img, w_non = contribution_weights(rng.normal(size=(4, 4)),
                                            rng.normal(size=(4, 4)),
                                            rng.normal(size=(4, 4)))
        assert w_img.item() + w_non.item() == pytest.approx(1.0, abs=1e-12)


def test_contribution_zero_shared_guarded():
    rng = np.random.default_rng(6)
    w_img, w_non = contribution_weights(rng.normal(size=(3, 3)),
                                        rng.normal(size=(3, 3)),
                                        np.zeros((3, 3)))
    assert np.isfinite(w_img.item()) and np.isfinite(w_non.item())


def test_contribution_scale_consistency():
    rng = np.random.default_rng(7)
    tau_img, tau_non = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    tau_sh = rng.normal(size=(4, 4))
    base, _ = contribution_weights(tau_img, tau_non, tau_sh)
    for c in (1.5, 2.0, 4.0):
        scaled, _ = contribution_weights(c * tau_img, tau_non, tau_sh)
        assert scaled.item() >= base.item()


def test_fusion_gradients_match_fd():
    rng = np.random.default_rng(8)
    z_img, z_non = rng.normal(size=(5, 4)), rng.normal(size=(5, 4))
    params = _params(4, seed=9)
    probe = ad.Tensor(rng.normal(size=(5, 4)))

    def loss():
        emb = fuse_modalities(z_img, z_non, params)
        w_img, w_non = contribution_weights(emb.tau_img, emb.tau_non,
                                            emb.tau_shared)
        return ad.reduce_sum(emb.z_joint * probe) + w_img * 2.0 + w_non

    check_gradients(loss, params.parameters(), rng, n_samples=12)
