"""Adaptive fusion of appearance/shape/gait embeddings, and the training losses."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import DataError, DimensionError, NumericError, SamplerError
from .nn import linear_params

MODALITIES = ("appearance", "shape", "gait")


@dataclass(frozen=True)
class LossConfig:
    lambda1: float = 0.7
    lambda2: float = 0.3
    margin: float = 0.3

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError(f"loss weights must be non-negative, got {self.lambda1}, {self.lambda2}")


@dataclass
class FusedEmbedding:
    f: tn.Tensor             # (N, c)
    weights: tn.Tensor       # (N, 3), order = MODALITIES
    projections: tuple       # three (N, c) tensors


def init_fusion(rng, dims, c, prefix="afm"):
    """``dims`` maps each modality to its input width."""
    params = {}
    for m in MODALITIES:
        params.update(linear_params(rng, f"{prefix}.proj_{m}", dims[m], c))
    params.update(linear_params(rng, f"{prefix}.mix", 3 * c, 3))
    for name, t in params.items():
        t.name = name
    return params


def init_norm_stats(dims):
    return {m: {"mean": np.zeros(dims[m]), "var": np.ones(dims[m])} for m in MODALITIES}


def standardize(x, stats=None, training=True, momentum=0.1, eps=1e-5):
    """Non-affine batch standardisation of ``x[N, c]`` per channel.

    In training mode batch statistics are used and ``stats`` (running mean
    and variance) are updated in place; otherwise the running values are
    applied as constants.
    """
    x = tn.as_tensor(x)
    if training:
        mu = tn.mean(x, axis=0, keepdims=True)
        centered = x - mu
        var = tn.mean(centered * centered, axis=0, keepdims=True)
        if stats is not None:
            n = x.shape[0]
            unbiased = var.data[0] * (n / max(n - 1, 1))
            stats["mean"][...] = (1 - momentum) * stats["mean"] + momentum * mu.data[0]
            stats["var"][...] = (1 - momentum) * stats["var"] + momentum * unbiased
        return centered * tn.power(var + eps, -0.5)
    return (x - stats["mean"]) * (1.0 / np.sqrt(stats["var"] + eps))


def adaptive_fuse(fa, fs, fg, params, prefix="afm", norm_stats=None, training=True):
    """Project each embedding to the common width, score them jointly, and
    return the softmax-weighted sum.

    With ``norm_stats`` each embedding is batch-standardised before its
    projection so that no modality dominates by scale alone.
    """
    projs = []
    for m, x in zip(MODALITIES, (fa, fs, fg)):
        if norm_stats is not None:
            x = standardize(x, norm_stats[m], training)
        projs.append(tn.conv_1x1(x, params[f"{prefix}.proj_{m}.weight"], params[f"{prefix}.proj_{m}.bias"]))
    if len({p.shape for p in projs}) != 1:
        raise DimensionError(f"projected embeddings disagree in shape: {[p.shape for p in projs]}")
    logits = tn.conv_1x1(tn.concat(projs, axis=-1), params[f"{prefix}.mix.weight"], params[f"{prefix}.mix.bias"])
    weights = tn.softmax_rows(logits)
    stacked = tn.stack(projs, axis=-2)                     # (N, 3, c)
    w = tn.reshape(weights, weights.shape + (1,))
    f = tn.sum_(stacked * w, axis=-2)
    return FusedEmbedding(f=f, weights=weights, projections=tuple(projs))


def fuse_with_weights(projections, weights):
    """Weighted sum with externally fixed modality weights (no learning)."""
    w = np.asarray(weights, dtype=np.float64)
    return tn.sum_(tn.stack(projections, axis=-2) * w.reshape(w.shape + (1,)), axis=-2)


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood of integer ``labels`` under ``logits[N, C]``."""
    logits = tn.as_tensor(logits)
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise DimensionError(f"labels of shape {labels.shape} for logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"label outside the identity vocabulary of size {n_classes}")
    onehot = np.zeros(logits.shape)
    onehot[np.arange(len(labels)), labels] = 1.0
    return tn.mean(tn.sum_(tn.log_softmax(logits) * onehot, axis=-1)) * -1.0


def pairwise_sq_dists(f):
    f = tn.as_tensor(f)
    n, c = f.shape
    diff = tn.reshape(f, (n, 1, c)) - tn.reshape(f, (1, n, c))
    return tn.sum_(diff * diff, axis=-1)


def batch_hard_indices(dist, labels):
    """Hardest positive / negative column per anchor row of a distance matrix."""
    dist = np.asarray(dist)
    labels = np.asarray(labels)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    pos_idx = np.argmax(np.where(pos, dist, -np.inf), axis=1)
    neg_idx = np.argmin(np.where(~same, dist, np.inf), axis=1)
    return pos_idx, neg_idx


def triplet_loss(f, labels, margin=0.3, return_indices=False):
    """Batch-hard triplet loss with euclidean distances."""
    labels = np.asarray(labels)
    _, counts = np.unique(labels, return_counts=True)
    if (counts < 2).any():
        raise SamplerError("every identity in a triplet batch needs at least two clips")
    if len(counts) < 2:
        raise SamplerError("a triplet batch needs at least two identities")
    d2 = pairwise_sq_dists(f)
    same = labels[:, None] == labels[None, :]
    pos = same & ~np.eye(len(labels), dtype=bool)
    hardest_pos = tn.max_(tn.where(pos, d2, -np.inf), axis=1)
    hardest_neg = tn.min_(tn.where(~same, d2, np.inf), axis=1)
    loss = tn.mean(tn.relu(tn.sqrt(hardest_pos) - tn.sqrt(hardest_neg) + margin))
    if return_indices:
        return loss, batch_hard_indices(d2.data, labels)
    return loss


def total_loss(ce, tri, cfg=LossConfig()):
    for name, value in (("cross-entropy", ce), ("triplet", tri)):
        v = value.data if isinstance(value, tn.Tensor) else np.asarray(value)
        if not np.isfinite(v).all():
            raise NumericError(f"{name} loss is not finite")
    return tn.as_tensor(ce) * cfg.lambda1 + tn.as_tensor(tri) * cfg.lambda2
