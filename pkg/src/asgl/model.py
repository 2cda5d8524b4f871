"""Full model: refinement -> (shape GAT, gait ST-GAT) + appearance -> fusion -> classifier."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as tn
from .errors import DataError
from .fusion import MODALITIES, adaptive_fuse, init_fusion, init_norm_stats
from .gait import gait_embedding, init_gait
from .graph import DEFAULT_BONES, build_skeleton, partition_mask
from .nn import linear_params
from .pose import NUM_JOINTS
from .shape import frame_shape_embedding, init_gat, init_refine, refine, video_shape_embedding


@dataclass
class ModelConfig:
    refine_dims: tuple = (128, 512, 2048)
    gat_dims: tuple = (256, 256)
    sta_channels: tuple = (128, 256)
    heads: int = 4
    partition_d: int = 3
    temporal_kernel: int = 3
    padding: str = "replicate"
    embed_dim: int = 256
    appearance_dim: int = 0          # 0 -> built-in appearance encoder
    appearance_hidden: int = 32
    num_classes: int = 1
    clip_len: int = 8
    use_appearance: bool = True
    use_shape: bool = True
    use_gait: bool = True
    fusion_norm: bool = True
    bones: tuple = DEFAULT_BONES

    def __post_init__(self):
        for name in ("refine_dims", "gat_dims", "sta_channels"):
            setattr(self, name, tuple(int(v) for v in getattr(self, name)))
        self.bones = tuple(tuple(int(v) for v in b) for b in self.bones)

    @classmethod
    def tiny(cls, **overrides):
        base = dict(refine_dims=(4, 8, 16), gat_dims=(8, 8), sta_channels=(8, 16), heads=2,
                    embed_dim=8, clip_len=4, appearance_hidden=8)
        base.update(overrides)
        return cls(**base)

    def to_dict(self):
        d = asdict(self)
        d["bones"] = [list(b) for b in self.bones]
        for k in ("refine_dims", "gat_dims", "sta_channels"):
            d[k] = list(d[k])
        return d


APPEARANCE_STATS_DIM = 2 * NUM_JOINTS * 3


def appearance_stats(clips):
    """Per-clip joint mean and std over time, flattened: (N, T, 14, 3) -> (N, 84)."""
    clips = np.asarray(clips)
    n = clips.shape[0]
    return np.concatenate([clips.mean(axis=1).reshape(n, -1), clips.std(axis=1).reshape(n, -1)], axis=1)


class ASGLModel:
    def __init__(self, config, seed=0):
        self.config = config
        self.skeleton = build_skeleton(config.bones, NUM_JOINTS)
        rng = np.random.default_rng(seed)
        c = config
        p = {}
        p.update(init_refine(rng, c.refine_dims))
        d = c.refine_dims[-1]
        p.update(init_gat(rng, d, c.gat_dims))
        p.update(init_gait(rng, d, c.sta_channels, heads=c.heads, kernel=c.temporal_kernel))
        if c.appearance_dim == 0:
            p.update(linear_params(rng, "app_enc.0", APPEARANCE_STATS_DIM, c.appearance_hidden))
            p.update(linear_params(rng, "app_enc.1", c.appearance_hidden, c.appearance_hidden))
            a_dim = c.appearance_hidden
        else:
            a_dim = c.appearance_dim
        dims = {"appearance": a_dim, "shape": c.gat_dims[-1], "gait": c.sta_channels[-1]}
        p.update(init_fusion(rng, dims, c.embed_dim))
        self.norm_stats = init_norm_stats(dims) if c.fusion_norm else None
        p.update(linear_params(rng, "classifier", c.embed_dim, c.num_classes))
        for name, t in p.items():
            t.name = name
        self.params = p

    @property
    def appearance_width(self):
        c = self.config
        return c.appearance_hidden if c.appearance_dim == 0 else c.appearance_dim

    def parameters(self):
        return self.params

    def buffers(self):
        """Non-trainable state (fusion running statistics) as flat name -> array."""
        if self.norm_stats is None:
            return {}
        return {f"afm.norm.{m}.{k}": self.norm_stats[m][k] for m in MODALITIES for k in ("mean", "var")}

    def load_buffers(self, arrays):
        for name, arr in arrays.items():
            _, _, m, k = name.split(".")
            self.norm_stats[m][k] = np.array(arr, dtype=np.float64)

    def mask(self, T):
        return partition_mask(self.skeleton, T, self.config.partition_d)

    def encode_appearance(self, clips, appearance=None):
        c, p = self.config, self.params
        n = clips.shape[0]
        if not c.use_appearance:
            return tn.Tensor(np.zeros((n, self.appearance_width)))
        if c.appearance_dim == 0:
            h = tn.Tensor(appearance_stats(clips))
            h = tn.leaky_relu(tn.conv_1x1(h, p["app_enc.0.weight"], p["app_enc.0.bias"]))
            return tn.conv_1x1(h, p["app_enc.1.weight"], p["app_enc.1.bias"])
        if appearance is None:
            raise DataError("this model expects precomputed appearance vectors")
        return tn.Tensor(appearance)

    def forward(self, clips, appearance=None, check=False, training=True):
        """clips: (N, T, 14, 3) normalized joints. Returns a dict of tensors.

        ``training`` selects batch statistics (and updates the running ones)
        for the fusion standardisation; evaluation uses running statistics.
        """
        c, p = self.config, self.params
        clips = np.asarray(clips)
        n, T = clips.shape[:2]
        refined = refine(tn.Tensor(clips), p, len(c.refine_dims))
        if c.use_shape:
            frames = frame_shape_embedding(refined, p, len(c.gat_dims), self.skeleton.neighbor_mask, check=check)
            fs = video_shape_embedding(frames)
        else:
            fs = tn.Tensor(np.zeros((n, c.gat_dims[-1])))
        if c.use_gait:
            fg = gait_embedding(refined, p, len(c.sta_channels), self.mask(T), c.padding)
        else:
            fg = tn.Tensor(np.zeros((n, c.sta_channels[-1])))
        fa = self.encode_appearance(clips, appearance)
        fused = adaptive_fuse(fa, fs, fg, p, norm_stats=self.norm_stats, training=training)
        logits = tn.conv_1x1(fused.f, p["classifier.weight"], p["classifier.bias"])
        return dict(f=fused.f, weights=fused.weights, logits=logits, shape=fs, gait=fg, appearance=fa)

    def embed(self, clips, appearance=None, batch_size=64):
        out = []
        with tn.no_grad():
            for i in range(0, len(clips), batch_size):
                app = None if appearance is None else appearance[i:i + batch_size]
                out.append(self.forward(clips[i:i + batch_size], app, training=False)["f"].data)
        if not out:
            return np.zeros((0, self.config.embed_dim))
        return np.concatenate(out, axis=0)
