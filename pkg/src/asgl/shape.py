"""Shape branch: per-keypoint refinement MLP and a graph attention network.

Frame-wise shape embeddings are the channel-wise max over joints after the
last GAT layer; the video-wise embedding is their mean over frames.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tn
from .errors import DimensionError
from .nn import linear_params, uniform

LEAKY_SLOPE = 0.2


def init_refine(rng, dims, in_dim=3, prefix="refine"):
    params = {}
    for i, d_out in enumerate(dims):
        params.update(linear_params(rng, f"{prefix}.{i}", in_dim, d_out))
        in_dim = d_out
    return params


def refine(x, params, num_layers, prefix="refine", slope=LEAKY_SLOPE):
    """Apply the same fully connected stack to every keypoint of ``x[..., 3]``."""
    h = tn.as_tensor(x)
    for i in range(num_layers):
        h = tn.conv_1x1(h, params[f"{prefix}.{i}.weight"], params[f"{prefix}.{i}.bias"])
        h = tn.leaky_relu(h, slope)
    return h


def init_gat(rng, in_dim, dims, prefix="gat"):
    params = {}
    for i, d_out in enumerate(dims):
        params[f"{prefix}.{i}.theta"] = uniform(rng, in_dim, (in_dim, d_out), f"{prefix}.{i}.theta")
        params[f"{prefix}.{i}.att_src"] = uniform(rng, 2 * d_out, (d_out, 1), f"{prefix}.{i}.att_src")
        params[f"{prefix}.{i}.att_dst"] = uniform(rng, 2 * d_out, (d_out, 1), f"{prefix}.{i}.att_dst")
        in_dim = d_out
    return params


def gat_layer_forward(h, theta, att_src, att_dst, neighbor_mask, slope=LEAKY_SLOPE,
                      activation=tn.leaky_relu, return_attention=False):
    """One graph attention layer over node features ``h[..., k, d]``.

    Scores are ``leaky(att_src . theta h_i + att_dst . theta h_j)`` over the
    neighbourhood Q_i (self included), softmax-normalised per row; the new
    node state is ``activation(sum_j a_ij theta h_j)``.
    """
    h = tn.as_tensor(h)
    mask = np.asarray(neighbor_mask, dtype=bool)
    k = mask.shape[0]
    if h.ndim < 2 or h.shape[-2] != k:
        raise DimensionError(f"features of shape {h.shape} do not match a {k}-node skeleton")
    z = tn.matmul(h, theta)
    src = tn.matmul(z, att_src)                     # (..., k, 1)
    dst = tn.swapaxes(tn.matmul(z, att_dst), -1, -2)  # (..., 1, k)
    # non-edges are dropped by the masked softmax; pin them away from the kink
    scores = tn.leaky_relu(tn.where(mask, src + dst, 1.0), slope)
    attn = tn.softmax_rows(scores, mask=mask)
    out = tn.matmul(attn, z)
    if activation is not None:
        out = activation(out)
    return (out, attn) if return_attention else out


def gat_forward(h, params, num_layers, neighbor_mask, prefix="gat", check=False):
    for i in range(num_layers):
        h, attn = gat_layer_forward(
            h, params[f"{prefix}.{i}.theta"], params[f"{prefix}.{i}.att_src"],
            params[f"{prefix}.{i}.att_dst"], neighbor_mask, return_attention=True,
        )
        if check:
            np.testing.assert_allclose(attn.data.sum(axis=-1), 1.0, atol=1e-6)
    return h


def frame_shape_embedding(refined, params, num_layers, neighbor_mask, prefix="gat", check=False):
    """Global max pooling over joints: (..., k, d) -> (..., d')."""
    return tn.max_(gat_forward(refined, params, num_layers, neighbor_mask, prefix, check), axis=-2)


def video_shape_embedding(frame_embeddings):
    """Temporal average pooling: (..., T, c) -> (..., c)."""
    frame_embeddings = tn.as_tensor(frame_embeddings)
    if frame_embeddings.ndim < 2 or frame_embeddings.shape[-2] < 1:
        raise DimensionError(f"need at least one frame, got shape {frame_embeddings.shape}")
    return tn.mean(frame_embeddings, axis=-2)
