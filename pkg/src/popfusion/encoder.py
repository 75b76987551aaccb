"""Graph-transformer layer with scalar edge-weight embeddings and gated
residuals, top-k pooling/unpooling, and the U-shaped encoder assembly plus
its flat ablation variants."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import TrainingError, ValidationError

ARCHITECTURES = ("gtunet", "stacking", "residual", "cascade")


@dataclass
class EncoderConfig:
    depth: int = 2
    ratio: float = 0.8
    d_hidden: int = 64
    n_heads: int = 4
    architecture: str = "gtunet"
    dropout: float = 0.0
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.depth < 1:
            raise ValidationError("encoder depth must be >= 1")
        if not 0 < self.ratio <= 1:
            raise ValidationError("pooling ratio must lie in (0, 1]")
        if self.architecture not in ARCHITECTURES:
            raise ValidationError(f"unknown architecture {self.architecture!r}; "
                                  f"expected one of {ARCHITECTURES}")
        if self.d_hidden % self.n_heads != 0:
            raise ValidationError("hidden width must be divisible by the head count")
        if not 0 <= self.dropout < 1:
            raise ValidationError("dropout rate must lie in [0, 1)")

    @property
    def n_gt_layers(self) -> int:
        return 2 * self.depth + 1

    @property
    def d_head(self) -> int:
        return self.d_hidden // self.n_heads


@dataclass
class GtLayerParams:
    w_query: ad.Parameter
    b_query: ad.Parameter
    w_key: ad.Parameter
    b_key: ad.Parameter
    w_value: ad.Parameter
    b_value: ad.Parameter
    w_edge: ad.Parameter   # (n_heads, d_head) scalar-weight embedding
    b_edge: ad.Parameter
    w_res: ad.Parameter
    b_res: ad.Parameter
    w_gate: ad.Parameter   # (3*d_h, 1) scalar gate over [agg; res; agg-res]
    ln_gain: ad.Parameter
    ln_bias: ad.Parameter

    def parameters(self):
        return [self.w_query, self.b_query, self.w_key, self.b_key, self.w_value,
                self.b_value, self.w_edge, self.b_edge, self.w_res, self.b_res,
                self.w_gate, self.ln_gain, self.ln_bias]


@dataclass
class EncoderParams:
    layers: list
    pool_scores: list = field(default_factory=list)

    def parameters(self):
        out = []
        for layer in self.layers:
            out.extend(layer.parameters())
        out.extend(self.pool_scores)
        return out


def _xavier(rng, fan_out, fan_in):
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return ad.Parameter(rng.uniform(-bound, bound, size=(fan_out, fan_in)))


def init_gt_layer(d_in: int, config: EncoderConfig, rng) -> GtLayerParams:
    dh = config.d_hidden
    return GtLayerParams(
        w_query=_xavier(rng, dh, d_in), b_query=ad.Parameter(np.zeros(dh)),
        w_key=_xavier(rng, dh, d_in), b_key=ad.Parameter(np.zeros(dh)),
        w_value=_xavier(rng, dh, d_in), b_value=ad.Parameter(np.zeros(dh)),
        w_edge=_xavier(rng, config.n_heads, config.d_head),
        b_edge=ad.Parameter(np.zeros((config.n_heads, config.d_head))),
        w_res=_xavier(rng, dh, d_in), b_res=ad.Parameter(np.zeros(dh)),
        w_gate=_xavier(rng, 3 * dh, 1),
        ln_gain=ad.Parameter(np.ones(dh)), ln_bias=ad.Parameter(np.zeros(dh)),
    )


def layer_input_widths(d_in: int, config: EncoderConfig) -> list:
    if config.architecture == "cascade":
        return [d_in + t * config.d_hidden for t in range(config.n_gt_layers)]
    return [d_in] + [config.d_hidden] * (config.n_gt_layers - 1)


def init_encoder_params(d_in: int, config: EncoderConfig, rng) -> EncoderParams:
    layers = [init_gt_layer(w, config, rng) for w in layer_input_widths(d_in, config)]
    pools = []
    if config.architecture == "gtunet":
        pools = [ad.Parameter(rng.normal(0.0, 1.0, size=(config.d_hidden, 1)))
                 for _ in range(config.depth)]
    return EncoderParams(layers=layers, pool_scores=pools)


# ---- graph transformer layer --------------------------------------------


def _feature_dropout(h: ad.Tensor, rate: float, rng) -> ad.Tensor:
    if rate <= 0 or rng is None:
        return h
    keep = (rng.random(h.shape) >= rate) / (1.0 - rate)
    return h * ad.Tensor(keep)


def gt_layer_forward(h, adjacency, params: GtLayerParams, config: EncoderConfig,
                     training: bool = False, rng=None, attn_out=None) -> ad.Tensor:
    """One attention layer over the weighted graph.

    Neighborhoods are the nonzero entries of `adjacency` (self-loops keep
    every row nonempty); the scalar edge weight enters both the attention
    logits and the aggregated values through a per-head embedding.
    """
    h = ad.as_tensor(h)
    a = ad.as_tensor(adjacency)
    n = h.shape[0]
    mask = a.data > 0
    if not mask.any(axis=1).all():
        raise TrainingError("a node has an empty neighborhood; self-loops are required")

    if training:
        h = _feature_dropout(h, config.dropout, rng)

    q = ad.linear(h, params.w_query, params.b_query)
    k = ad.linear(h, params.w_key, params.b_key)
    v = ad.linear(h, params.w_value, params.b_value)
    res = ad.linear(h, params.w_res, params.b_res)

    inv_scale = 1.0 / math.sqrt(config.d_head)
    mask_f = ad.Tensor(mask.astype(np.float64))
    head_outputs = []
    for head in range(config.n_heads):
        cols = (slice(None), slice(head * config.d_head, (head + 1) * config.d_head))
        qh, kh, vh = q[cols], k[cols], v[cols]
        we = ad.reshape(params.w_edge[head], (config.d_head, 1))
        be = ad.reshape(params.b_edge[head], (config.d_head, 1))
        # e_ij = A_ij * we + be, folded analytically into logits and values
        edge_gain = ad.matmul(qh, we)                      # (n, 1)
        edge_bias = ad.matmul(qh, be)                      # (n, 1)
        logits = (ad.matmul(qh, ad.transpose(kh)) + edge_gain * a + edge_bias) * inv_scale
        shift = np.where(mask, logits.data, -np.inf).max(axis=1, keepdims=True)
        weights = ad.exp(logits - ad.Tensor(shift)) * mask_f
        attn = weights / ad.reduce_sum(weights, axis=1, keepdims=True)
        if attn_out is not None:
            attn_out.append(attn.data.copy())
        agg = (ad.matmul(attn, vh)
               + ad.matmul(ad.reduce_sum(attn * a, axis=1, keepdims=True),
                           ad.transpose(we))
               + ad.transpose(be))  # attention rows sum to 1, so be passes through
        head_outputs.append(agg)

    merged = ad.concat(head_outputs, axis=1)
    gate_in = ad.concat([merged, res, merged - res], axis=1)
    gate = ad.sigmoid(ad.matmul(gate_in, params.w_gate))  # (n, 1) scalar per node
    mixed = (1.0 - gate) * merged + gate * res
    return ad.relu(ad.layer_norm(mixed, params.ln_gain, params.ln_bias, config.ln_eps))


# ---- top-k pooling -------------------------------------------------------


@dataclass
class PoolRecord:
    idx: np.ndarray          # retained node indices, descending score order
    delta: np.ndarray        # projection scores before selection
    pre_features: ad.Tensor  # snapshot feeding the unpool skip connection
    pre_adjacency: object    # Tensor or ndarray adjacency before pooling


def gpool(h, adjacency, ratio: float, score_vector: ad.Parameter):
    """Keep the ceil(ratio*N) highest-scoring nodes (ties broken by lower
    index), gating kept rows by sigmoid of their score."""
    h = ad.as_tensor(h)
    if not 0 < ratio <= 1:
        raise ValidationError("pooling ratio must lie in (0, 1]")
    n = h.shape[0]
    keep = math.ceil(ratio * n)
    if keep < 1:
        raise ValidationError("pooling would empty the graph")
    norm = ad.sqrt(ad.reduce_sum(score_vector * score_vector))
    delta = ad.matmul(h, score_vector) / norm  # (n, 1)
    order = np.argsort(-delta.data.ravel(), kind="stable")
    idx = order[:keep]
    record = PoolRecord(idx=idx, delta=delta.data.ravel().copy(),
                        pre_features=h, pre_adjacency=adjacency)
    pooled = h[idx] * ad.sigmoid(delta[idx])
    a = ad.as_tensor(adjacency)
    sub = a[np.ix_(idx, idx)]
    return pooled, sub, record


def gunpool(h_small, record: PoolRecord) -> ad.Tensor:
    """Restore the pre-pooling node count: rows at record.idx come from
    h_small, all other rows keep the skip snapshot."""
    h_small = ad.as_tensor(h_small)
    if h_small.shape[0] != len(record.idx):
        raise ValidationError(
            f"unpool got {h_small.shape[0]} rows for {len(record.idx)} kept indices")
    return ad.row_scatter(record.pre_features, record.idx, h_small)


# ---- encoder assembly ----------------------------------------------------


def gtunet_forward(features, adjacency, config: EncoderConfig, params: EncoderParams,
                   training: bool = False, rng=None, trace=None) -> ad.Tensor:
    """Run the configured 2*depth+1 layer encoder; always returns N x d_h at
    the original node count."""
    h = ad.as_tensor(features)
    a = ad.as_tensor(adjacency)
    if trace is not None:
        trace.setdefault("gt_layers", 0)
        trace.setdefault("pool_idx", [])

    def layer(x, adj, i):
        if trace is not None:
            trace["gt_layers"] += 1
        return gt_layer_forward(x, adj, params.layers[i], config,
                                training=training, rng=rng)

    arch = config.architecture
    if arch == "gtunet":
        records = []
        li = 0
        for level in range(config.depth):
            h = layer(h, a, li)
            li += 1
            h, a, rec = gpool(h, a, config.ratio, params.pool_scores[level])
            records.append(rec)
            if trace is not None:
                trace["pool_idx"].append(rec.idx.copy())
        h = layer(h, a, li)
        li += 1
        for rec in reversed(records):
            h = gunpool(h, rec)
            a = ad.as_tensor(rec.pre_adjacency)
            h = layer(h, a, li)
            li += 1
        return h

    if arch == "stacking":
        for i in range(config.n_gt_layers):
            h = layer(h, a, i)
        return h

    if arch == "residual":
        for i in range(config.n_gt_layers):
            out = layer(h, a, i)
            # identity skip wherever widths line up (all but the first layer)
            h = out + h if out.shape == h.shape else out
        return h

    # cascade: each layer consumes the input plus every previous output
    streams = [h]
    out = h
    for i in range(config.n_gt_layers):
        stacked = streams[0] if len(streams) == 1 else ad.concat(streams, axis=1)
        out = layer(stacked, a, i)
        streams.append(out)
    return out
