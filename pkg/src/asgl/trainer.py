"""P x K sampling, Adam with step decay, checkpoints and the training loop."""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import struct
from decimal import Decimal
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as tn
from .errors import CheckpointFileError, ConfigError, DataError, NumericError
from .fusion import LossConfig, cross_entropy_loss, total_loss, triplet_loss
from .model import ASGLModel, ModelConfig
from .pose import clip_plan

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    # batch / schedule
    P: int = 8
    K: int = 4
    epochs: int = 120
    max_steps: int = 0               # 0 -> no cap
    lr: float = 5e-3
    decay_factor: float = 0.1
    decay_every: int = 40
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_clip: float = 0.0           # 0 -> disabled
    appearance_jitter: float = 0.0   # std of gaussian noise added to appearance vectors while training
    appearance_dropout: float = 0.0  # probability of zeroing a clip's appearance vector while training
    # loss
    lambda1: float = 0.7
    lambda2: float = 0.3
    margin: float = 0.3
    # clips
    clip_len: int = 8
    stride: int = 2
    # model
    refine_dims: tuple = (128, 512, 2048)
    gat_dims: tuple = (256, 256)
    sta_channels: tuple = (128, 256)
    heads: int = 4
    partition_d: int = 3
    temporal_kernel: int = 3
    padding: str = "replicate"
    embed_dim: int = 256
    appearance_hidden: int = 32
    use_appearance: bool = True
    use_shape: bool = True
    use_gait: bool = True
    fusion_norm: bool = True
    # run
    seed: int = 0
    mode: str = "f64"

    def __post_init__(self):
        for name in ("refine_dims", "gat_dims", "sta_channels"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        if self.P < 1 or self.K < 1:
            raise ConfigError(f"P and K must be positive, got P={self.P}, K={self.K}")
        if self.lr <= 0:
            raise ConfigError(f"learning rate must be positive, got {self.lr}")
        if self.mode not in ("f32", "f64"):
            raise ConfigError(f"mode must be f32 or f64, got {self.mode!r}")

    @property
    def batch_size(self):
        return self.P * self.K

    @property
    def loss(self):
        return LossConfig(self.lambda1, self.lambda2, self.margin)

    def model_config(self, num_classes, appearance_dim=0):
        return ModelConfig(
            refine_dims=self.refine_dims, gat_dims=self.gat_dims, sta_channels=self.sta_channels,
            heads=self.heads, partition_d=self.partition_d, temporal_kernel=self.temporal_kernel,
            padding=self.padding, embed_dim=self.embed_dim, appearance_dim=appearance_dim,
            appearance_hidden=self.appearance_hidden, num_classes=num_classes, clip_len=self.clip_len,
            use_appearance=self.use_appearance, use_shape=self.use_shape, use_gait=self.use_gait,
            fusion_norm=self.fusion_norm,
        )

    def to_dict(self):
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d


def lr_schedule(epoch, lr0=5e-3, factor=0.1, every=40):
    """``lr0 * factor ** (epoch // every)``, evaluated in decimal so that
    e.g. 5e-3 * 0.1**2 is exactly 5e-5 rather than 5.000000000000001e-05."""
    if epoch < 0:
        raise ValueError(f"epoch must be >= 0, got {epoch}")
    return float(Decimal(repr(lr0)) * Decimal(repr(factor)) ** (epoch // every))


# ---------------------------------------------------------------- sampling

@dataclass
class Batch:
    clips: np.ndarray            # (P*K, T, 14, 3)
    labels: np.ndarray           # (P*K,) class indices
    tracklet_ids: list
    starts: list
    appearance: np.ndarray | None = None


def group_by_person(tracklets):
    groups = {}
    for tr in tracklets:
        groups.setdefault(tr.person_id, []).append(tr)
    return groups


def pk_sample(tracklets, P, K, rng, clip_len=8, stride=2, class_index=None):
    """Draw P identities and K clips per identity.

    Identities with fewer than K tracklets reuse them; repeated draws from
    one tracklet take distinct start offsets while enough offsets exist.
    """
    groups = group_by_person(tracklets)
    people = sorted(groups)
    if len(people) < P:
        raise DataError(f"need at least P={P} identities, found {len(people)}")
    if class_index is None:
        class_index = {p: i for i, p in enumerate(people)}
    chosen = [people[i] for i in rng.choice(len(people), size=P, replace=False)]
    clips, labels, ids, starts, apps = [], [], [], [], []
    for person in chosen:
        pool = groups[person]
        if len(pool) >= K:
            picks = [pool[i] for i in rng.choice(len(pool), size=K, replace=False)]
        else:
            picks = list(pool) + [pool[i] for i in rng.integers(len(pool), size=K - len(pool))]
        used = {}
        for tr in picks:
            _, n_starts = clip_plan(len(tr.joints), clip_len, stride)
            taken = used.setdefault(tr.tracklet_id, set())
            free = [s for s in range(n_starts) if s not in taken]
            start = int(free[rng.integers(len(free))]) if free else int(rng.integers(n_starts))
            taken.add(start)
            clips.append(tr.clip(clip_len, stride, start=start))
            labels.append(class_index[person])
            ids.append(tr.tracklet_id)
            starts.append(start)
            apps.append(tr.appearance)
    appearance = None if any(a is None for a in apps) else np.stack(apps)
    return Batch(np.stack(clips), np.asarray(labels), ids, starts, appearance)


# ---------------------------------------------------------------- optimiser

def init_adam_state(params):
    return {
        "t": 0,
        "m": {k: np.zeros_like(p.data) for k, p in params.items()},
        "v": {k: np.zeros_like(p.data) for k, p in params.items()},
    }


def adam_step(params, grads, state, lr, betas=(0.9, 0.999), eps=1e-8):
    """In-place Adam update with bias correction. ``grads`` maps name -> array or None."""
    b1, b2 = betas
    state["t"] += 1
    t = state["t"]
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter has {p.data.shape}")
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for parameter {name}")
        m = state["m"][name] = b1 * state["m"][name] + (1 - b1) * g
        v = state["v"][name] = b2 * state["v"][name] + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
    return params, state


# ---------------------------------------------------------------- checkpoints

MAGIC = b"ASGLCKPT"


@dataclass
class Checkpoint:
    params: dict                 # name -> ndarray
    adam: dict                   # {"t", "m", "v"}
    epoch: int
    rng_state: dict
    meta: dict = field(default_factory=dict)
    buffers: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt):
    """JSON header (names, shapes, dtypes, offsets) followed by raw little-endian tensors."""
    entries, blobs, offset = [], [], 0
    tensors = [("param", k, v) for k, v in ckpt.params.items()]
    tensors += [("adam_m", k, v) for k, v in ckpt.adam["m"].items()]
    tensors += [("adam_v", k, v) for k, v in ckpt.adam["v"].items()]
    tensors += [("buffer", k, v) for k, v in ckpt.buffers.items()]
    for kind, name, arr in tensors:
        arr = np.asarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = np.ascontiguousarray(le).tobytes()
        entries.append(dict(kind=kind, name=name, shape=list(arr.shape), dtype=le.dtype.str, offset=offset,
                            nbytes=len(raw)))
        blobs.append(raw)
        offset += len(raw)
    header = dict(tensors=entries, adam_t=int(ckpt.adam["t"]), epoch=int(ckpt.epoch),
                  rng_state=ckpt.rng_state, meta=ckpt.meta)
    hbytes = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            blob = fh.read()
    except OSError as exc:
        raise CheckpointFileError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    if blob[:8] != MAGIC:
        raise CheckpointFileError(f"{path} is not a checkpoint file")
    (hlen,) = struct.unpack("<Q", blob[8:16])
    header = json.loads(blob[16:16 + hlen])
    base = 16 + hlen
    params, m, v, buffers = {}, {}, {}, {}
    target = {"param": params, "adam_m": m, "adam_v": v, "buffer": buffers}
    for e in header["tensors"]:
        start = base + e["offset"]
        arr = np.frombuffer(blob[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"])).reshape(e["shape"])
        target[e["kind"]][e["name"]] = arr.copy()
    return Checkpoint(params=params, adam={"t": header["adam_t"], "m": m, "v": v}, epoch=header["epoch"],
                      rng_state=header["rng_state"], meta=header["meta"], buffers=buffers)


def model_from_checkpoint(ckpt):
    cfg = ModelConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                         for k, v in ckpt.meta["model_config"].items()})
    with tn.precision(ckpt.meta.get("mode", "f64")):
        model = ASGLModel(cfg)
        for name, arr in ckpt.params.items():
            model.params[name].data = arr.copy()
        model.load_buffers(ckpt.buffers)
    return model


# ---------------------------------------------------------------- training

@dataclass
class TrainResult:
    model: ASGLModel
    checkpoint: Checkpoint
    epoch_losses: list
    step_losses: list
    class_index: dict


def _rng_state(rng):
    return rng.bit_generator.state


def train(config, tracklets, out_dir=None, callback=None):
    """Run the epoch loop on normalized train ``tracklets``.

    Returns per-epoch mean losses and per-step losses. When ``out_dir`` is
    given a checkpoint and a loss log are written there.
    """
    if not tracklets:
        raise DataError("no training tracklets")
    with tn.precision(config.mode):
        seeds = np.random.SeedSequence(config.seed).spawn(2)
        rng = np.random.default_rng(seeds[1])
        people = sorted({tr.person_id for tr in tracklets})
        class_index = {p: i for i, p in enumerate(people)}
        apps = [tr.appearance for tr in tracklets]
        app_dim = 0 if any(a is None for a in apps) else int(len(apps[0]))
        mcfg = config.model_config(len(people), app_dim)
        model = ASGLModel(mcfg, seed=int(seeds[0].generate_state(1)[0]))
        params = model.params
        state = init_adam_state(params)
        steps_per_epoch = math.ceil(len(tracklets) / config.batch_size)
        epoch_losses, step_losses = [], []
        step = 0
        epoch = 0
        for epoch in range(config.epochs):
            lr = lr_schedule(epoch, config.lr, config.decay_factor, config.decay_every)
            losses = []
            for _ in range(steps_per_epoch):
                if config.max_steps and step >= config.max_steps:
                    break
                batch = pk_sample(tracklets, config.P, config.K, rng, config.clip_len, config.stride,
                                  class_index)
                if batch.appearance is not None and (config.appearance_jitter or config.appearance_dropout):
                    batch.appearance = augment_appearance(batch.appearance, rng, config.appearance_jitter,
                                                          config.appearance_dropout)
                loss = training_loss(model, batch, config.loss)
                for p in params.values():
                    p.zero_grad()
                loss.backward()
                grads = {k: p.grad for k, p in params.items()}
                if config.grad_clip > 0:
                    grads = _clip(grads, config.grad_clip)
                adam_step(params, grads, state, lr, (config.beta1, config.beta2), config.adam_eps)
                losses.append(float(loss.data))
                step += 1
                if callback is not None:
                    callback(step, float(loss.data))
            if not losses:
                break
            step_losses.extend(losses)
            epoch_losses.append(float(np.mean(losses)))
            log.info("epoch %d lr %.3g loss %.6f", epoch, lr, epoch_losses[-1])
        for p in params.values():
            p.zero_grad()
        meta = dict(model_config=mcfg.to_dict(), train_config=config.to_dict(), class_index=class_index,
                    mode=config.mode, steps=step)
        ckpt = Checkpoint(params={k: p.data.copy() for k, p in params.items()},
                          adam={"t": state["t"], "m": state["m"], "v": state["v"]},
                          epoch=len(epoch_losses), rng_state=_rng_state(rng), meta=meta,
                          buffers={k: v.copy() for k, v in model.buffers().items()})
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out_dir / "checkpoint.bin", ckpt)
        with open(out_dir / "loss.log", "w") as fh:
            for i, l in enumerate(epoch_losses):
                fh.write(f"epoch={i} loss={l!r}\n")
    return TrainResult(model, ckpt, epoch_losses, step_losses, class_index)


def augment_appearance(appearance, rng, jitter=0.0, dropout=0.0):
    out = appearance + rng.normal(scale=jitter, size=appearance.shape) if jitter else appearance.copy()
    if dropout:
        out[rng.random(len(out)) < dropout] = 0.0
    return out


def training_loss(model, batch, loss_cfg, appearance=None):
    out = model.forward(batch.clips, batch.appearance if appearance is None else appearance)
    ce = cross_entropy_loss(out["logits"], batch.labels)
    tri = triplet_loss(out["f"], batch.labels, loss_cfg.margin)
    return total_loss(ce, tri, loss_cfg)


def _clip(grads, max_norm):
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values() if g is not None))
    if norm <= max_norm:
        return grads
    scale = max_norm / norm
    return {k: (None if g is None else g * scale) for k, g in grads.items()}
