"""Synthetic walking skeletons in the 33-keypoint layout.

Each identity has its own stride frequency, swing amplitude and body
proportions. Legs and arms swing sinusoidally in the sagittal (y-z) plane;
coordinates are in pixel-like units of a 256x128 frame with y pointing
down. Clothing variants only change the appearance vectors, never the
skeleton.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigError
from .pose import DEFAULT_FRAME_SIZE, SPLITS, RawPoseSequence, normalize_tracklet

# body segment lengths (pixels) at body_scale 1
TORSO = 55.0
NECK = 12.0
HEAD = 14.0
THIGH = 42.0
SHIN = 40.0
UPPER_ARM = 30.0
FOREARM = 26.0
HIP_HALF = 11.0
SHOULDER_HALF = 18.0


@dataclass
class IdentitySpec:
    id: str
    frequency: float          # strides per second
    amplitude: float          # leg swing amplitude, radians
    phase: float = 0.0
    body_scale: float = 1.0
    shoulder_ratio: float = 1.0
    leg_ratio: float = 1.0
    arm_ratio: float = 0.8    # arm swing amplitude relative to legs


@dataclass
class SynthSpec:
    identities: list
    tracklets_per_identity: int = 4
    heldout_per_identity: int = 4
    clothing_variants: int = 2
    frames: int = 40
    fps: float = 25.0
    noise: float = 0.0
    walk_speed: float = 30.0   # max forward speed, px/s
    appearance_dim: int = 16
    appearance_noise: float = 0.1
    appearance_identity: float = 0.0   # weight of a per-identity component that survives clothing changes
    seed: int = 0
    frame_size: tuple = DEFAULT_FRAME_SIZE

    def __post_init__(self):
        self.identities = [i if isinstance(i, IdentitySpec) else IdentitySpec(**i) for i in self.identities]
        ids = [i.id for i in self.identities]
        dup = sorted({i for i in ids if ids.count(i) > 1})
        if dup:
            raise ConfigError(f"duplicate identity spec: {dup}")
        if self.clothing_variants < 1 or self.frames < 1:
            raise ConfigError("clothing_variants and frames must be >= 1")
        self.frame_size = tuple(self.frame_size)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_dict(self):
        d = asdict(self)
        d["frame_size"] = list(self.frame_size)
        return d


def default_spec(n_identities=8, seed=0, **kw):
    """Identities with evenly spread, pairwise distinct gait parameters."""
    rng = np.random.default_rng(seed)
    freqs = np.linspace(0.8, 2.0, n_identities)
    amps = np.linspace(0.25, 0.6, n_identities)
    rng.shuffle(amps)
    scales = np.linspace(0.85, 1.15, n_identities)
    rng.shuffle(scales)
    ids = [
        IdentitySpec(id=f"p{i:03d}", frequency=float(freqs[i]), amplitude=float(amps[i]),
                     phase=float(rng.uniform(0, 2 * np.pi)), body_scale=float(scales[i]),
                     shoulder_ratio=float(rng.uniform(0.85, 1.15)), leg_ratio=float(rng.uniform(0.9, 1.1)))
        for i in range(n_identities)
    ]
    return SynthSpec(identities=ids, seed=seed, **kw)


def twin_spec(n_pairs=4, seed=0, **kw):
    """Pairs of identities with identical skeletons and gait.

    Skeleton cues separate the pairs but not the two members of a pair, so
    only a persistent appearance component (``appearance_identity``) can
    tell twins apart.
    """
    base = default_spec(n_pairs, seed=seed).identities
    ids = [IdentitySpec(**{**asdict(b), "id": f"p{2 * i + k:03d}"}) for i, b in enumerate(base) for k in (0, 1)]
    return SynthSpec(identities=ids, seed=seed, **kw)


def swing_angle(t, ident, phase_offset=0.0):
    """Left-leg swing angle at times ``t`` (seconds); the right leg is its negation."""
    return ident.amplitude * np.sin(2 * np.pi * ident.frequency * np.asarray(t) + ident.phase + phase_offset)


def _seg(angle, length):
    # unit segment hanging down (+y) rotated by ``angle`` towards +z
    return np.stack([np.zeros_like(angle), np.cos(angle) * length, np.sin(angle) * length], axis=-1)


def walk_frames(ident, n_frames, fps=25.0, phase_offset=0.0, origin=(0.0, 0.0, 0.0), velocity=0.0):
    """(n_frames, 33, 3) keypoints for one identity."""
    t = np.arange(n_frames) / fps
    s = ident.body_scale
    cycle = 2 * np.pi * ident.frequency * t + ident.phase + phase_offset
    leg = swing_angle(t, ident, phase_offset)
    arm = -ident.arm_ratio * leg
    knee_bend = 0.5 * ident.amplitude * (1 + np.sin(cycle - np.pi / 2))
    knee_bend_r = 0.5 * ident.amplitude * (1 + np.sin(cycle + np.pi / 2))
    F = n_frames
    kp = np.zeros((F, 33, 3))
    hip_c = np.zeros((F, 3))
    hip_c[:, 1] = -8.0 * s * ident.amplitude * np.abs(np.sin(cycle))
    hip_c[:, 2] = velocity * t
    hip_c += np.asarray(origin, dtype=np.float64)

    thigh, shin = THIGH * s * ident.leg_ratio, SHIN * s * ident.leg_ratio
    for side, sign, ang, bend in ((0, -1.0, leg, knee_bend), (1, 1.0, -leg, knee_bend_r)):
        hip = hip_c + np.array([sign * HIP_HALF * s, 0.0, 0.0])
        knee = hip + _seg(ang, thigh)
        ankle = knee + _seg(ang - bend, shin)
        heel = ankle + np.array([0.0, 4.0 * s, -5.0 * s])
        toe = ankle + np.array([0.0, 5.0 * s, 14.0 * s])
        kp[:, 23 + side] = hip
        kp[:, 25 + side] = knee
        kp[:, 27 + side] = ankle
        kp[:, 29 + side] = heel
        kp[:, 31 + side] = toe

    neck = hip_c + np.array([0.0, -TORSO * s, 0.0])
    sh_half = SHOULDER_HALF * s * ident.shoulder_ratio
    for side, sign, ang in ((0, -1.0, arm), (1, 1.0, -arm)):
        shoulder = neck + np.array([sign * sh_half, 0.0, 0.0])
        elbow = shoulder + _seg(ang, UPPER_ARM * s)
        wrist = elbow + _seg(ang + 0.3 * np.abs(ang), FOREARM * s)
        kp[:, 11 + side] = shoulder
        kp[:, 13 + side] = elbow
        kp[:, 15 + side] = wrist
        kp[:, 17 + side] = wrist + np.array([sign * 3.0, 8.0, 0.0]) * s   # pinky
        kp[:, 19 + side] = wrist + np.array([0.0, 9.0, 2.0]) * s          # index
        kp[:, 21 + side] = wrist + np.array([-sign * 2.0, 6.0, 3.0]) * s  # thumb

    nose = neck + np.array([0.0, -(NECK + HEAD) * s, 3.0 * s])
    face = np.array([
        [0, 0, 0], [-3, -3, 0], [-4, -3, 0], [-5, -3, 0], [3, -3, 0], [4, -3, 0], [5, -3, 0],
        [-8, -1, -4], [8, -1, -4], [-2, 4, 0], [2, 4, 0],
    ], dtype=np.float64) * s
    kp[:, 0:11] = nose[:, None, :] + face[None]
    return kp


def generate(spec):
    """Returns (sequences, manifest {tracklet_id: split}, appearance {tracklet_id: vector})."""
    rng = np.random.default_rng(spec.seed)
    sequences, manifest, appearance = [], {}, {}
    for ident in spec.identities:
        protos = rng.normal(size=(spec.clothing_variants, spec.appearance_dim))
        if spec.appearance_identity:
            protos = protos + spec.appearance_identity * rng.normal(size=spec.appearance_dim)
        plan = [("train", i % spec.clothing_variants) for i in range(spec.tracklets_per_identity)]
        for i in range(spec.heldout_per_identity):
            clothing = (i // 2) % spec.clothing_variants
            plan.append(("query" if i % 2 == 0 else "gallery", clothing))
        for n, (split, clothing) in enumerate(plan):
            tid = f"{ident.id}_t{n:02d}"
            phase = rng.uniform(0, 2 * np.pi)
            origin = rng.uniform(-40, 40, size=3) + np.array([64.0, 150.0, 0.0])
            velocity = rng.uniform(-1, 1) * spec.walk_speed
            frames = walk_frames(ident, spec.frames, spec.fps, phase, origin, velocity)
            if spec.noise > 0:
                frames = frames + rng.normal(scale=spec.noise, size=frames.shape)
            seq = RawPoseSequence(tracklet_id=tid, person_id=ident.id, clothing_id=f"c{clothing}",
                                  camera_id=f"cam{n}", frames=frames, frame_size=spec.frame_size)
            sequences.append(seq)
            manifest[tid] = split
            appearance[tid] = protos[clothing] + spec.appearance_noise * rng.normal(size=spec.appearance_dim)
    return sequences, manifest, appearance


def normalized_splits(spec):
    """Generate ``spec`` and normalize it in memory: {split: [Tracklet]}."""
    sequences, manifest, appearance = generate(spec)
    out = {name: [] for name in SPLITS}
    for seq in sequences:
        out[manifest[seq.tracklet_id]].append(normalize_tracklet(seq, appearance[seq.tracklet_id]))
    return out


def load_spec(path):
    with open(path) as fh:
        return SynthSpec.from_dict(json.load(fh))
