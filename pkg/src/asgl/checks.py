"""Self-checks run by ``asgl check``: finite-difference gradients and model invariants.

All checks use float64 and the tiny configuration (refinement [4, 8, 16],
GAT [8, 8], STA [8, 16], two heads, four frames).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .errors import NumericError
from .fusion import LossConfig, cross_entropy_loss, total_loss, triplet_loss
from .gait import gait_embedding, group_mean_matrix, init_gait, sta_attention, sta_block
from .graph import build_skeleton, partition_mask
from .model import ASGLModel, ModelConfig
from .shape import frame_shape_embedding, gat_layer_forward, init_gat, init_refine, refine, video_shape_embedding

GRAD_TOL = 1e-4
GRAD_EPS = 1e-5
MAX_COORDS = 48         # probed coordinates per tensor in the composite checks
TINY = dict(refine=(4, 8, 16), gat=(8, 8), sta=(8, 16), heads=2, T=4)


@dataclass
class CheckResult:
    name: str
    value: float
    tol: float
    passed: bool

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<28} {self.value:.3e} (tol {self.tol:.0e})"


def _gc(name, f, inputs, tol=GRAD_TOL, max_coords=None):
    err = tn.grad_check(f, inputs, eps=GRAD_EPS, max_coords=max_coords)
    return CheckResult(name, err, tol, err < tol)


def smooth_gc(name, f, draw, rng, tol=GRAD_TOL, max_coords=None, tries=50):
    """Finite-difference check at the first drawn point where no probe of
    width ``GRAD_EPS`` moves a relu/leaky/max across its kink (the check is
    only meaningful where the function is differentiable)."""
    for _ in range(tries):
        inputs = draw(rng)
        try:
            err = tn.grad_check(f, inputs, eps=GRAD_EPS, max_coords=max_coords, require_smooth=True)
        except NumericError as exc:
            if "crosses a kink" in str(exc):
                continue
            raise
        return CheckResult(name, err, tol, err < tol)
    raise NumericError(f"{name}: no kink-free check point in {tries} draws")


def _params_list(params):
    names = list(params)
    return names, [tn.Tensor(params[n].data.copy()) for n in names]


def _with_bias(params, rng):
    # zero biases put whole layers at the same distance from the leaky kink
    for n, t in params.items():
        if n.endswith("bias"):
            t.data[...] = rng.normal(scale=0.1, size=t.shape)
    return params


def gradient_suite(seed=0):
    with tn.precision("f64"):
        return _gradient_suite(seed)


def _gradient_suite(seed):
    rng = np.random.default_rng(seed)
    sk = build_skeleton()
    nm = sk.neighbor_mask
    T, S = TINY["T"], TINY["heads"]
    d = TINY["refine"][-1]
    n_ref, n_gat, n_sta = len(TINY["refine"]), len(TINY["gat"]), len(TINY["sta"])
    mask = partition_mask(sk, T, 3)
    gm = group_mean_matrix(mask)
    out = []

    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    out.append(_gc("matmul", lambda t: tn.sum_(tn.matmul(t[0], t[1])), [a, b]))
    w = rng.normal(size=(3, 5))
    out.append(_gc("softmax_rows", lambda t: tn.sum_(tn.softmax_rows(t[0]) * w), [rng.normal(size=(3, 5))]))
    out.append(_gc("log_softmax", lambda t: tn.sum_(tn.log_softmax(t[0]) * w), [rng.normal(size=(3, 5))]))

    def leaky_f(t):
        return tn.sum_(tn.sigmoid(tn.leaky_relu(t[0], 0.2)) * w)

    out.append(smooth_gc("leaky_relu/sigmoid", leaky_f, lambda r: [r.normal(size=(3, 5))], rng))

    def pool_f(t):
        return tn.sum_(tn.max_(tn.concat([t[0], t[1]], axis=1), axis=1) * tn.mean(t[0], axis=1))

    out.append(smooth_gc("max/mean/concat", pool_f, lambda r: [r.normal(size=(3, 5)), r.normal(size=(3, 2))], rng))
    x = rng.normal(size=(2, 6, 3, 4))
    wx = rng.normal(size=x.shape)
    for pad in ("zero", "replicate", "circular"):
        out.append(_gc(f"conv1d_temporal[{pad}]",
                       lambda t, pad=pad: tn.sum_(tn.conv1d_temporal(t[0], t[1], axis=1, padding=pad) * wx),
                       [x, rng.normal(size=(4, 3))]))

    names = list(init_refine(np.random.default_rng(0), TINY["refine"]))
    gnames = list(init_gat(np.random.default_rng(0), d, TINY["gat"]))
    anames = list(init_gait(np.random.default_rng(0), d, TINY["sta"], heads=S))
    blk = [n for n in anames if n.startswith("gait.0.")]

    def clip(r):
        return r.normal(scale=0.3, size=(1, T, 14, 3))

    def refine_f(t):
        return tn.sum_(refine(t[0], dict(zip(names, t[1:])), n_ref) * 0.1)

    def draw_refine(r):
        return [clip(r)] + _params_list(_with_bias(init_refine(r, TINY["refine"]), r))[1]

    out.append(smooth_gc("refinement", refine_f, draw_refine, rng))

    def gat_f(t):
        return tn.sum_(gat_layer_forward(t[0], t[1], t[2], t[3], nm))

    def draw_gat(r):
        return [r.normal(size=(1, T, 14, d))] + _params_list(init_gat(r, d, TINY["gat"]))[1][:3]

    out.append(smooth_gc("gat_layer", gat_f, draw_gat, rng))

    def shape_f(t):
        p = dict(zip(names + gnames, t[1:]))
        h = refine(t[0], p, n_ref)
        return tn.sum_(video_shape_embedding(frame_shape_embedding(h, p, n_gat, nm)))

    def draw_shape(r):
        return draw_refine(r) + _params_list(init_gat(r, d, TINY["gat"]))[1]

    out.append(smooth_gc("shape_branch", shape_f, draw_shape, rng, max_coords=MAX_COORDS))

    def attn_f(t):
        return tn.sum_(sta_attention(t[0], t[1], t[2], t[3], mask))

    def draw_attn(r):
        p = init_gait(r, d, TINY["sta"], heads=S)
        return [r.normal(size=(1, T * 14, d))] + [p[f"gait.0.{k}"] for k in ("wq", "wk", "wv")]

    out.append(smooth_gc("sta_attention", attn_f, draw_attn, rng))

    def block_f(t):
        return tn.sum_(sta_block(t[0], dict(zip(blk, t[1:])), "gait.0", mask, gm))

    def draw_block(r):
        p = _with_bias(init_gait(r, d, TINY["sta"], heads=S), r)
        return [r.normal(size=(1, T, 14, d))] + [p[n] for n in blk]

    out.append(smooth_gc("sta_block", block_f, draw_block, rng, max_coords=MAX_COORDS))

    def gait_f(t):
        p = dict(zip(names + anames, t[1:]))
        h = refine(t[0], p, n_ref)
        return tn.sum_(gait_embedding(h, p, n_sta, mask))

    def draw_gait(r):
        return draw_refine(r) + _params_list(_with_bias(init_gait(r, d, TINY["sta"], heads=S), r))[1]

    out.append(smooth_gc("gait_branch", gait_f, draw_gait, rng, max_coords=MAX_COORDS))

    out.append(_total_loss_check(rng))
    return out


def tiny_model(seed=0, **kw):
    cfg = ModelConfig.tiny(num_classes=2, appearance_dim=6, **kw)
    return ASGLModel(cfg, seed=seed)


def _total_loss_check(rng):
    model = tiny_model()
    names = list(model.params)
    labels = np.array([0, 0, 1, 1])
    data = {}

    def f(t):
        for n, v in zip(names, t):
            model.params[n] = v
        o = model.forward(data["clips"], data["app"])
        return total_loss(cross_entropy_loss(o["logits"], labels), triplet_loss(o["f"], labels, 0.3), LossConfig())

    def draw(r):
        m = tiny_model(seed=int(r.integers(1 << 31)))
        data["clips"] = r.normal(scale=0.3, size=(4, TINY["T"], 14, 3))
        data["app"] = r.normal(size=(4, 6))
        return _params_list(_with_bias(m.params, r))[1]

    return smooth_gc("total_loss(all params)", f, draw, rng, max_coords=MAX_COORDS)


def invariant_suite(seed=0):
    """Cheap invariants; each check returns its worst deviation."""
    with tn.precision("f64"):
        rng = np.random.default_rng(seed)
        out = []
        x = rng.normal(size=(6, 7)) * 50
        s = tn.softmax_rows(x).data
        out.append(CheckResult("softmax rows sum to 1", float(np.abs(s.sum(1) - 1).max()), 1e-9,
                               bool(np.abs(s.sum(1) - 1).max() <= 1e-9)))
        model = tiny_model(seed)
        clips = rng.normal(scale=0.3, size=(5, TINY["T"], 14, 3))
        o = model.forward(clips, rng.normal(size=(5, 6)))
        dev = float(np.abs(o["weights"].data.sum(1) - 1).max())
        out.append(CheckResult("fusion weights sum to 1", dev, 1e-6, dev <= 1e-6))
        sk = build_skeleton()
        mask = partition_mask(sk, TINY["T"], 3)
        p = model.params
        _, attn = sta_attention(tn.Tensor(rng.normal(size=(2, TINY["T"] * 14, 16))), p["gait.0.wq"],
                                p["gait.0.wk"], p["gait.0.wv"], mask, return_attention=True)
        leak = float(np.abs(attn.data[..., ~mask]).max())
        out.append(CheckResult("attention outside N_D", leak, 0.0, leak == 0.0))
        perm = rng.permutation(TINY["T"])
        with tn.no_grad():
            a = model.forward(clips, np.zeros((5, 6)))["shape"].data
            b = model.forward(clips[:, perm], np.zeros((5, 6)))["shape"].data
        dev = float(np.abs(a - b).max())
        out.append(CheckResult("shape embedding frame order", dev, 1e-12, dev <= 1e-12))
        return out


def run_all(seed=0):
    return gradient_suite(seed) + invariant_suite(seed)
