"""Graph-transformer layer, pooling/unpooling, and encoder assembly."""

import numpy as np
import pytest

from popfusion import autodiff as ad
from popfusion.encoder import (ARCHITECTURES, EncoderConfig, gpool, gt_layer_forward,
                               gtunet_forward, gunpool, init_encoder_params,
                               init_gt_layer)
from popfusion.errors import TrainingError, ValidationError
from helpers import check_gradients, random_graph

CFG = EncoderConfig(depth=2, ratio=0.8, d_hidden=8, n_heads=2)


def _layer(d_in, seed=0, cfg=CFG):
    return init_gt_layer(d_in, cfg, np.random.default_rng(seed))


# ---- gt layer -----------------------------------------------------------------


def test_isolated_node_attends_to_itself():
    rng = np.random.default_rng(0)
    h = rng.normal(size=(4, 5))
    a = np.eye(4)
    a[1, 2] = a[2, 1] = 0.7  # nodes 0 and 3 keep only their self-loop
    attn = []
    gt_layer_forward(h, a, _layer(5), CFG, attn_out=attn)
    for head_attn in attn:
        assert head_attn[0, 0] == pytest.approx(1.0)
        assert head_attn[3, 3] == pytest.approx(1.0)


def test_identical_neighbors_get_equal_attention():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(3, 4))
    h[1] = h[2]  # identical keys/values for the two neighbors of node 0
    a = np.zeros((3, 3))
    a[0, 1] = a[1, 0] = 0.5
    a[0, 2] = a[2, 0] = 0.5  # identical edge weights as well
    np.fill_diagonal(a, 0.0)
    a[0, 0] = 0.0  # node 0 has exactly two neighbors
    a[1, 1] = a[2, 2] = 1.0
    attn = []
    gt_layer_forward(h, a, _layer(4), CFG, attn_out=attn)
    for head_attn in attn:
        assert head_attn[0, 1] == pytest.approx(0.5, abs=1e-12)
        assert head_attn[0, 2] == pytest.approx(0.5, abs=1e-12)


def test_attention_rows_sum_to_one_per_head():
    rng = np.random.default_rng(2)
    h, a = random_graph(rng, 9, 6)
    attn = []
    gt_layer_forward(h, a, _layer(6), CFG, attn_out=attn)
    assert len(attn) == CFG.n_heads
    for head_attn in attn:
        np.testing.assert_allclose(head_attn.sum(axis=1), 1.0, atol=1e-6)
        assert np.all(head_attn[a == 0] == 0.0)


def test_layer_permutation_equivariance():
    rng = np.random.default_rng(3)
    h, a = random_graph(rng, 8, 5)
    params = _layer(5)
    out = gt_layer_forward(h, a, params, CFG).data
    perm = rng.permutation(8)
    out_p = gt_layer_forward(h[perm], a[np.ix_(perm, perm)], params, CFG).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-10)


def test_empty_neighborhood_rejected():
    h = np.ones((3, 4))
    a = np.eye(3)
    a[1, 1] = 0.0  # node 1 has no edges at all
    with pytest.raises(TrainingError):
        gt_layer_forward(h, a, _layer(4), CFG)


def test_edge_weight_changes_attention():
    rng = np.random.default_rng(4)
    h, a = random_graph(rng, 6, 5)
    params = _layer(5)
    attn_a, attn_b = [], []
    gt_layer_forward(h, a, params, CFG, attn_out=attn_a)
    b = a.copy()
    b[0, 1] = b[1, 0] = b[0, 1] * 0.2 + 0.001
    gt_layer_forward(h, b, params, CFG, attn_out=attn_b)
    assert not np.allclose(attn_a[0], attn_b[0])


# ---- pooling -------------------------------------------------------------------


def test_gpool_topk_selection_example():
    # engineered so the score projection produces delta = [0.9, 0.1, 0.5]
    h = ad.Tensor(np.array([[0.9], [0.1], [0.5]]))
    a = np.eye(3)
    p = ad.Parameter(np.array([[1.0]]))
    pooled, sub, record = gpool(h, a, ratio=0.6, score_vector=p)
    np.testing.assert_array_equal(record.idx, [0, 2])
    np.testing.assert_allclose(record.delta, [0.9, 0.1, 0.5])
    assert pooled.shape == (2, 1) and sub.data.shape == (2, 2)


def test_gpool_keeps_ceil_ratio_count():
    rng = np.random.default_rng(5)
    h, a = random_graph(rng, 10, 8)
    p = ad.Parameter(rng.normal(size=(8, 1)))
    pooled, _, record = gpool(ad.Tensor(h), a, 0.8, p)
    assert len(record.idx) == 8 and pooled.shape == (8, 8)


def test_gpool_tie_break_by_lower_index():
    h = ad.Tensor(np.array([[1.0], [1.0], [2.0], [1.0]]))
    p = ad.Parameter(np.array([[1.0]]))
    _, _, record = gpool(h, np.eye(4), 0.75, p)
    np.testing.assert_array_equal(record.idx, [2, 0, 1])


def test_gpool_full_ratio_gates_all_rows():
    rng = np.random.default_rng(6)
    h = rng.normal(size=(5, 4))
    p = ad.Parameter(rng.normal(size=(4, 1)))
    pooled, _, record = gpool(ad.Tensor(h), np.eye(5), 1.0, p)
    assert len(record.idx) == 5
    delta = record.delta
    expected = h[record.idx] / (1.0 + np.exp(-delta[record.idx]))[:, None] \
        * (1.0 + np.exp(-delta[record.idx]))[:, None]
    # direct check: rows are h[idx] * sigmoid(delta[idx])
    gate = 1.0 / (1.0 + np.exp(-delta[record.idx]))
    np.testing.assert_allclose(pooled.data, h[record.idx] * gate[:, None], atol=1e-12)


def test_gunpool_restores_shape_and_skip_rows():
    rng = np.random.default_rng(7)
    h, a = random_graph(rng, 7, 4)
    p = ad.Parameter(rng.normal(size=(4, 1)))
    pooled, _, record = gpool(ad.Tensor(h), a, 0.6, p)
    refined = ad.Tensor(rng.normal(size=pooled.shape))
    restored = gunpool(refined, record)
    assert restored.shape == (7, 4)
    kept = set(record.idx.tolist())
    for i in range(7):
        if i in kept:
            pos = record.idx.tolist().index(i)
            np.testing.assert_array_equal(restored.data[i], refined.data[pos])
        else:
            np.testing.assert_array_equal(restored.data[i], h[i])


def test_gunpool_full_ratio_overwrites_everything():
    rng = np.random.default_rng(8)
    h = rng.normal(size=(5, 3))
    p = ad.Parameter(rng.normal(size=(3, 1)))
    pooled, _, record = gpool(ad.Tensor(h), np.eye(5), 1.0, p)
    refined = ad.Tensor(rng.normal(size=(5, 3)))
    restored = gunpool(refined, record)
    for pos, node in enumerate(record.idx):
        np.testing.assert_array_equal(restored.data[node], refined.data[pos])
    assert not np.allclose(restored.data, h)


def test_gunpool_shape_mismatch():
    rng = np.random.default_rng(9)
    h = rng.normal(size=(6, 3))
    p = ad.Parameter(rng.normal(size=(3, 1)))
    _, _, record = gpool(ad.Tensor(h), np.eye(6), 0.5, p)
    with pytest.raises(ValidationError):
        gunpool(ad.Tensor(np.zeros((4, 3))), record)


# ---- encoder assembly ------------------------------------------------------------


def test_gtunet_layer_count_is_2l_plus_1():
    rng = np.random.default_rng(10)
    h, a = random_graph(rng, 12, 5)
    for depth in (1, 2, 3):
        cfg = EncoderConfig(depth=depth, ratio=0.8, d_hidden=8, n_heads=2)
        params = init_encoder_params(5, cfg, np.random.default_rng(0))
        trace = {}
        out = gtunet_forward(h, a, cfg, params, trace=trace)
        assert trace["gt_layers"] == 2 * depth + 1
        assert len(trace["pool_idx"]) == depth
        assert out.shape == (12, 8)


def test_all_architectures_same_output_shape():
    rng = np.random.default_rng(11)
    h, a = random_graph(rng, 9, 6)
    for arch in ARCHITECTURES:
        cfg = EncoderConfig(depth=2, ratio=0.8, d_hidden=8, n_heads=2,
                            architecture=arch)
        params = init_encoder_params(6, cfg, np.random.default_rng(1))
        out = gtunet_forward(h, a, cfg, params)
        assert out.shape == (9, 8), arch


def test_stacking_variant_permutation_equivariance():
    rng = np.random.default_rng(12)
    h, a = random_graph(rng, 7, 5)
    cfg = EncoderConfig(depth=1, ratio=1.0, d_hidden=8, n_heads=2,
                        architecture="stacking")
    params = init_encoder_params(5, cfg, np.random.default_rng(2))
    out = gtunet_forward(h, a, cfg, params).data
    perm = rng.permutation(7)
    out_p = gtunet_forward(h[perm], a[np.ix_(perm, perm)], cfg, params).data
    np.testing.assert_allclose(out_p, out[perm], atol=1e-10)


def test_gtunet_gradients_match_fd():
    rng = np.random.default_rng(13)
    h, a = random_graph(rng, 8, 4)
    cfg = EncoderConfig(depth=1, ratio=0.7, d_hidden=8, n_heads=2)
    params = init_encoder_params(4, cfg, np.random.default_rng(3))
    readout = ad.Tensor(rng.normal(size=(8, 1)))

    def loss():
        out = gtunet_forward(h, a, cfg, params)
        return ad.reduce_sum(ad.matmul(ad.transpose(out), readout) ** 2)

    check_gradients(loss, params.parameters(), rng, n_samples=14)


def test_feature_dropout_only_when_training():
    rng = np.random.default_rng(14)
    h, a = random_graph(rng, 6, 5)
    cfg = EncoderConfig(depth=1, ratio=1.0, d_hidden=8, n_heads=2, dropout=0.5)
    params = init_encoder_params(5, cfg, np.random.default_rng(4))
    clean = gtunet_forward(h, a, cfg, params, training=False).data
    clean2 = gtunet_forward(h, a, cfg, params, training=False).data
    noisy = gtunet_forward(h, a, cfg, params, training=True,
                           rng=np.random.default_rng(5)).data
    np.testing.assert_array_equal(clean, clean2)
    assert not np.allclose(clean, noisy)
