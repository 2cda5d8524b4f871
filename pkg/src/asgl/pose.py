"""Pose ingestion: 33-keypoint estimator output to normalized 14-joint clips.

Joint order of the reduced skeleton::

    0 head        1 neck        2 l_shoulder  3 r_shoulder
    4 l_elbow     5 r_elbow     6 l_wrist     7 r_wrist
    8 l_hip       9 r_hip      10 l_knee     11 r_knee
   12 l_ankle    13 r_ankle

Input keypoints follow the 33-point BlazePose layout. Each reduced joint is
the centroid of a fixed group of source keypoints (``JOINT_GROUPS``); the
neck is the shoulder midpoint. The root used for translation is the hip
centre.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, IngestError

NUM_RAW = 33
NUM_JOINTS = 14
DEFAULT_FRAME_SIZE = (256, 128)

JOINT_NAMES = (
    "head", "neck", "l_shoulder", "r_shoulder", "l_elbow", "r_elbow",
    "l_wrist", "r_wrist", "l_hip", "r_hip", "l_knee", "r_knee", "l_ankle", "r_ankle",
)

JOINT_GROUPS = (
    tuple(range(11)),   # face -> head
    (11, 12),           # shoulders -> neck
    (11,), (12,),
    (13,), (14,),
    (17, 19, 21),       # left hand
    (18, 20, 22),       # right hand
    (23,), (24,),
    (25,), (26,),
    (27, 29, 31),       # left foot
    (28, 30, 32),       # right foot
)

ROOT_JOINTS = (8, 9)

_REDUCE = np.zeros((NUM_JOINTS, NUM_RAW))
for _j, _group in enumerate(JOINT_GROUPS):
    _REDUCE[_j, list(_group)] = 1.0 / len(_group)


@dataclass
class RawPoseSequence:
    tracklet_id: str
    person_id: str
    clothing_id: str
    camera_id: str
    frames: np.ndarray  # (F, 33, 3)
    frame_size: tuple = DEFAULT_FRAME_SIZE

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 3 or self.frames.shape[1:] != (NUM_RAW, 3):
            raise IngestError(
                f"tracklet {self.tracklet_id!r}: expected frames of shape (F, 33, 3), got {self.frames.shape}"
            )
        if not str(self.person_id) or not str(self.clothing_id):
            raise IngestError(f"tracklet {self.tracklet_id!r}: person_id and clothing_id must be non-empty")
        self.frame_size = tuple(self.frame_size)

    @property
    def labels(self):
        return dict(
            tracklet_id=self.tracklet_id,
            person_id=self.person_id,
            clothing_id=self.clothing_id,
            camera_id=self.camera_id,
        )


@dataclass
class KeypointClip:
    joints: np.ndarray  # (T, 14, 3)
    tracklet_id: str
    person_id: str
    clothing_id: str
    camera_id: str
    frame_size: tuple = DEFAULT_FRAME_SIZE
    frame_indices: tuple = field(default=())


def reduce_33_to_14(frame, frame_index=0):
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-2:] != (NUM_RAW, 3):
        raise IngestError(f"frame {frame_index}: expected (33, 3) keypoints, got {frame.shape}")
    if not np.isfinite(frame).all():
        raise IngestError(f"frame {frame_index}: non-finite keypoint coordinate")
    return _REDUCE @ frame


def root_offset(frame):
    """Offset that moves the hip centre of a 14-joint frame to the origin."""
    return -np.asarray(frame)[..., ROOT_JOINTS, :].mean(axis=-2)


def translate_to_origin(frame, offset=None):
    frame = np.asarray(frame, dtype=np.float64)
    offset = root_offset(frame) if offset is None else np.asarray(offset, dtype=np.float64)
    if not np.isfinite(offset).all():
        raise IngestError("translation offset is not finite")
    return frame + offset[..., None, :]


def normalize_unified_view(frame, frame_size):
    h, w = frame_size
    if h <= 0 or w <= 0:
        raise ConfigError(f"frame size must be positive, got {(h, w)}")
    return np.asarray(frame, dtype=np.float64) / np.array([h, w, h * w], dtype=np.float64)


def normalize_sequence(frames, frame_size):
    """Reduce, root-centre and normalize every frame of a (F, 33, 3) sequence."""
    frames = np.asarray(frames, dtype=np.float64)
    bad = ~np.isfinite(frames).all(axis=(1, 2))
    if bad.any():
        raise IngestError(f"frame {int(np.argmax(bad))}: non-finite keypoint coordinate")
    reduced = np.einsum("jr,frc->fjc", _REDUCE, frames)
    return normalize_unified_view(translate_to_origin(reduced), frame_size)


def clip_plan(num_frames, length, stride):
    """(effective stride, number of valid start offsets) for one clip.

    The stride is the largest value <= ``stride`` whose span fits; when even
    stride 1 does not fit there is a single, loop-padded placement. A clip
    owns ``length * stride`` frames (one stride window per sampled frame), so
    a start is valid only if that window fits; a tracklet that holds the
    strided frames but not the full window gets the single start 0.
    """
    if num_frames <= 0:
        raise IngestError("cannot sample a clip from an empty tracklet")
    if length < 1 or stride < 1:
        raise ConfigError(f"clip length and stride must be >= 1, got {length}, {stride}")
    s = stride
    while s > 1 and (length - 1) * s + 1 > num_frames:
        s -= 1
    return s, max(num_frames - length * s + 1, 1)


def clip_indices(num_frames, length, stride, rng=None, center=False, start=None):
    """Frame indices for one clip of ``length`` frames.

    The start offset is ``start`` if given, else centred when ``center`` is
    set, else drawn from ``rng`` among all valid starts (0 without an rng).
    """
    s, n_starts = clip_plan(num_frames, length, stride)
    if (length - 1) * s + 1 > num_frames:
        return np.arange(length) % num_frames
    if start is None:
        if center:
            start = (n_starts - 1) // 2
        else:
            start = int(rng.integers(n_starts)) if rng is not None else 0
    if not 0 <= start < n_starts:
        raise ConfigError(f"clip start {start} outside [0, {n_starts})")
    return start + s * np.arange(length)


def sample_clip(seq, length=8, stride=2, seed=None, rng=None, center=False):
    if len(seq.frames) == 0:
        raise IngestError(f"tracklet {seq.tracklet_id!r} has no frames")
    if rng is None:
        rng = np.random.default_rng(seed)
    idx = clip_indices(len(seq.frames), length, stride, rng=rng, center=center)
    joints = normalize_sequence(seq.frames[idx], seq.frame_size)
    return KeypointClip(joints=joints, frame_indices=tuple(int(i) for i in idx), **seq.labels,
                        frame_size=seq.frame_size)


# ---------------------------------------------------------------- file formats

def parse_record(record, line_no=None):
    where = f"line {line_no}: " if line_no is not None else ""
    try:
        frames = np.asarray(record["frames"], dtype=np.float64)
        seq = RawPoseSequence(
            tracklet_id=str(record["tracklet_id"]),
            person_id=str(record["person_id"]),
            clothing_id=str(record["clothing_id"]),
            camera_id=str(record.get("camera_id", "")),
            frames=frames,
            frame_size=tuple(record.get("frame_size", DEFAULT_FRAME_SIZE)),
        )
    except KeyError as exc:
        raise IngestError(f"{where}missing field {exc.args[0]!r}") from exc
    except (TypeError, ValueError) as exc:
        raise IngestError(f"{where}{exc}") from exc
    if len(seq.frames) == 0:
        raise IngestError(f"{where}tracklet {seq.tracklet_id!r} has no frames")
    bad = ~np.isfinite(seq.frames).all(axis=(1, 2))
    if bad.any():
        raise IngestError(f"{where}frame {int(np.argmax(bad))}: non-finite keypoint coordinate")
    return seq


def _iter_jsonl(path):
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                yield line_no, json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}: line {line_no}: malformed JSON ({exc.msg})") from exc


def read_keypoints(path):
    """Read a keypoint JSON-lines file into ``{tracklet_id: RawPoseSequence}``."""
    out = {}
    for line_no, rec in _iter_jsonl(path):
        if not isinstance(rec, dict):
            raise IngestError(f"{path}: line {line_no}: expected a JSON object")
        seq = parse_record(rec, line_no)
        if seq.tracklet_id in out:
            raise IngestError(f"{path}: line {line_no}: duplicate tracklet_id {seq.tracklet_id!r}")
        out[seq.tracklet_id] = seq
    return out


def write_keypoints(path, sequences):
    with open(path, "w") as fh:
        for seq in sequences:
            rec = dict(seq.labels, frame_size=list(seq.frame_size), frames=np.round(seq.frames, 6).tolist())
            fh.write(json.dumps(rec) + "\n")


SPLITS = ("train", "query", "gallery")


def read_manifest(path):
    """Read ``{tracklet_id: split}`` from a JSON-lines manifest."""
    out = {}
    for line_no, rec in _iter_jsonl(path):
        try:
            tid, split = str(rec["tracklet_id"]), rec["split"]
        except (KeyError, TypeError) as exc:
            raise IngestError(f"{path}: line {line_no}: manifest records need tracklet_id and split") from exc
        if split not in SPLITS:
            raise IngestError(f"{path}: line {line_no}: unknown split {split!r}")
        out[tid] = split
    return out


def write_manifest(path, mapping):
    with open(path, "w") as fh:
        for tid, split in mapping.items():
            fh.write(json.dumps({"tracklet_id": tid, "split": split}) + "\n")


def read_appearance(path):
    out = {}
    for line_no, rec in _iter_jsonl(path):
        try:
            out[str(rec["tracklet_id"])] = np.asarray(rec["appearance"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise IngestError(f"{path}: line {line_no}: bad appearance record") from exc
    dims = {v.shape for v in out.values()}
    if len(dims) > 1:
        raise IngestError(f"{path}: appearance vectors have inconsistent shapes {sorted(dims)}")
    return out


def write_appearance(path, mapping):
    with open(path, "w") as fh:
        for tid, vec in mapping.items():
            fh.write(json.dumps({"tracklet_id": tid, "appearance": np.round(vec, 6).tolist()}) + "\n")


# ---------------------------------------------------------------- normalized store

@dataclass
class Tracklet:
    """A fully normalized tracklet, ready for clip sampling."""

    tracklet_id: str
    person_id: str
    clothing_id: str
    camera_id: str
    joints: np.ndarray  # (F, 14, 3)
    frame_size: tuple = DEFAULT_FRAME_SIZE
    appearance: np.ndarray | None = None

    def clip(self, length, stride, rng=None, center=False, start=None):
        return self.joints[clip_indices(len(self.joints), length, stride, rng=rng, center=center, start=start)]


def normalize_tracklet(seq, appearance=None):
    return Tracklet(
        joints=normalize_sequence(seq.frames, seq.frame_size),
        frame_size=seq.frame_size,
        appearance=appearance,
        **seq.labels,
    )


def write_store(out_dir, tracklets):
    """Write normalized tracklets as ``.npy`` arrays plus an ``index.jsonl``."""
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    with open(out_dir / "index.jsonl", "w") as fh:
        for i, (tr, split) in enumerate(tracklets):
            fname = f"clips/{i:06d}.npy"
            np.save(out_dir / fname, np.ascontiguousarray(tr.joints, dtype="<f8"))
            rec = dict(
                tracklet_id=tr.tracklet_id, person_id=tr.person_id, clothing_id=tr.clothing_id,
                camera_id=tr.camera_id, frame_size=list(tr.frame_size), split=split,
                num_frames=len(tr.joints), file=fname,
            )
            if tr.appearance is not None:
                rec["appearance"] = [float(v) for v in tr.appearance]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_store(out_dir):
    """Inverse of ``write_store``: a list of (Tracklet, split) pairs."""
    out_dir = Path(out_dir)
    if not (out_dir / "index.jsonl").exists():
        raise DataError(f"{out_dir} has no index.jsonl")
    items = []
    for line_no, rec in _iter_jsonl(out_dir / "index.jsonl"):
        try:
            joints = np.load(out_dir / rec["file"])
        except OSError as exc:
            raise DataError(f"index line {line_no}: cannot load {rec.get('file')}") from exc
        tr = Tracklet(
            tracklet_id=rec["tracklet_id"], person_id=rec["person_id"], clothing_id=rec["clothing_id"],
            camera_id=rec["camera_id"], joints=joints, frame_size=tuple(rec["frame_size"]),
            appearance=None if "appearance" not in rec else np.asarray(rec["appearance"], dtype=np.float64),
        )
        items.append((tr, rec["split"]))
    return items


def load_dataset(keypoints_path, manifest_path, appearance_path=None):
    """Normalized tracklets per split, in manifest order."""
    sequences = read_keypoints(keypoints_path)
    manifest = read_manifest(manifest_path)
    appearance = read_appearance(appearance_path) if appearance_path else {}
    splits = {s: [] for s in SPLITS}
    for tid, split in manifest.items():
        if tid not in sequences:
            raise DataError(f"manifest names tracklet {tid!r} with no keypoints")
        if appearance_path and tid not in appearance:
            raise DataError(f"no appearance vector for tracklet {tid!r}")
        splits[split].append(normalize_tracklet(sequences[tid], appearance.get(tid)))
    return splits
