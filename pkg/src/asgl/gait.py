"""Gait branch: spatio-temporal graph attention (STA) blocks.

Each block runs S masked self-attention heads over the T*k nodes of the
spatio-temporal graph (attention restricted to the D-hop neighbourhoods),
averages the heads, mixes channels with 1x1 layers whose cross-node term
only sees group members, applies a depthwise temporal convolution and adds
a residual. The video-wise gait embedding is the mean over all nodes of the
final block.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import DimensionError
from .nn import uniform, zeros

LEAKY_SLOPE = 0.2


@dataclass(frozen=True)
class StaSpec:
    c_in: int
    c_out: int
    heads: int = 4
    key_dim: int | None = None
    kernel: int = 3

    @property
    def dk(self):
        return self.key_dim or self.c_out


def init_sta_block(rng, spec, prefix):
    S, ci, co, dk = spec.heads, spec.c_in, spec.c_out, spec.dk
    p = {
        f"{prefix}.wq": uniform(rng, ci, (S, ci, dk)),
        f"{prefix}.wk": uniform(rng, ci, (S, ci, dk)),
        f"{prefix}.wv": uniform(rng, ci, (S, ci, co)),
        f"{prefix}.mix_self": uniform(rng, 2 * co, (co, co)),
        f"{prefix}.mix_group": uniform(rng, 2 * co, (co, co)),
        f"{prefix}.mix_bias": zeros((co,)),
        f"{prefix}.tconv": uniform(rng, spec.kernel, (co, spec.kernel)),
        f"{prefix}.tconv_bias": zeros((co,)),
    }
    if ci != co:
        p[f"{prefix}.res"] = uniform(rng, ci, (ci, co))
    for name, t in p.items():
        t.name = name
    return p


def group_mean_matrix(mask):
    """Row-normalised group membership: row i averages over N(i)."""
    mask = np.asarray(mask, dtype=np.float64)
    return mask / mask.sum(axis=1, keepdims=True)


def sta_attention(x, wq, wk, wv, mask, slope=LEAKY_SLOPE, return_attention=False):
    """Multi-head masked attention over flattened nodes ``x[N, n, c_in]``.

    Returns ``leaky(mean_s softmax_mask(Q_s K_s^T / sqrt(dk)) V_s)`` of shape
    (N, n, c_out).
    """
    x = tn.as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    n = mask.shape[0]
    if x.ndim != 3 or x.shape[1] != n or x.shape[2] != wq.shape[1]:
        raise DimensionError(f"features {x.shape} do not match partition of {n} nodes / weights {wq.shape}")
    xs = tn.reshape(x, (x.shape[0], 1, n, x.shape[2]))
    q = tn.matmul(xs, wq)
    k = tn.matmul(xs, wk)
    v = tn.matmul(xs, wv)
    scores = tn.matmul(q, tn.swapaxes(k, -1, -2)) * (1.0 / np.sqrt(wq.shape[-1]))
    attn = tn.softmax_rows(scores, mask=mask)
    heads = tn.matmul(attn, v)             # (N, S, n, c_out)
    out = tn.leaky_relu(tn.mean(heads, axis=1), slope)
    return (out, attn) if return_attention else out


def multi_head_learning(x, w_self, w_group, bias, group_matrix):
    """1x1 channel mixing with a group-restricted cross-node term.

    ``out_i = x_i W_self + (mean_{j in N(i)} x_j) W_group + b``.
    """
    x = tn.as_tensor(x)
    grouped = tn.matmul(tn.Tensor(group_matrix), x)
    out = tn.matmul(x, w_self) + tn.matmul(grouped, w_group)
    return out if bias is None else tn.broadcast_add_bias(out, bias)


def temporal_aggregate(x, kernel, bias=None, padding="replicate"):
    """Depthwise temporal convolution along the frame axis of ``x[N, T, k, c]``."""
    out = tn.conv1d_temporal(x, kernel, axis=1, padding=padding)
    return out if bias is None else tn.broadcast_add_bias(out, bias)


def sta_block(x, params, prefix, mask, group_matrix, padding="replicate", slope=LEAKY_SLOPE,
              return_attention=False):
    """x: (N, T, k, c_in) -> (N, T, k, c_out)."""
    x = tn.as_tensor(x)
    N, T, k, c_in = x.shape
    flat = tn.reshape(x, (N, T * k, c_in))
    att, attn = sta_attention(flat, params[f"{prefix}.wq"], params[f"{prefix}.wk"], params[f"{prefix}.wv"],
                              mask, slope, return_attention=True)
    mixed = multi_head_learning(att, params[f"{prefix}.mix_self"], params[f"{prefix}.mix_group"],
                                params[f"{prefix}.mix_bias"], group_matrix)
    c_out = mixed.shape[-1]
    mixed = tn.reshape(mixed, (N, T, k, c_out))
    tconv = temporal_aggregate(mixed, params[f"{prefix}.tconv"], params[f"{prefix}.tconv_bias"], padding)
    res = x if f"{prefix}.res" not in params else tn.matmul(x, params[f"{prefix}.res"])
    out = tn.leaky_relu(tconv + res, slope)
    return (out, attn) if return_attention else out


def init_gait(rng, in_dim, channels, heads=4, kernel=3, prefix="gait"):
    params = {}
    for b, c_out in enumerate(channels):
        params.update(init_sta_block(rng, StaSpec(in_dim, c_out, heads, kernel=kernel), f"{prefix}.{b}"))
        in_dim = c_out
    return params


def gait_embedding(x, params, num_blocks, mask, padding="replicate", prefix="gait"):
    """Refined clip features (N, T, k, d) -> gait embedding (N, c_last)."""
    x = tn.as_tensor(x)
    if x.ndim != 4:
        raise DimensionError(f"gait branch expects (N, T, k, d) features, got {x.shape}")
    gm = group_mean_matrix(mask)
    h = x
    for b in range(num_blocks):
        h = sta_block(h, params, f"{prefix}.{b}", mask, gm, padding)
    N, T, k, c = h.shape
    return tn.mean(tn.reshape(h, (N, T * k, c)), axis=1)
