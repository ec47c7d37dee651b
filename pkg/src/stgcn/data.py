"""OpenPose JSON ingestion, clip assembly, quality gates and dataset files.

Clip tensors are laid out ``(M, C, T, V)``: person slot, channel
``(x, y, c)``, frame, joint.  Undetected joints are ``(0, 0, 0)``.
"""
from __future__ import annotations

import json
import math
import os
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, FormatError, InputError, TruncationError
from .graph import NUM_JOINTS

NUM_PERSONS = 2
NUM_CHANNELS = 3
NUM_FRAMES = 300
FRAME_WIDTH = 340
FRAME_HEIGHT = 256

STGT_MAGIC = b"STGT"
STGT_VERSION = 1
_STGT_HEADER = struct.Struct("<4s5I")


@dataclass(frozen=True)
class SkeletonFrame:
    """Detections of one video frame, ``persons`` shaped ``(P, 18, 3)``."""

    persons: np.ndarray

    @property
    def num_persons(self) -> int:
        return self.persons.shape[0]


@dataclass(frozen=True)
class SkeletonClip:
    id: str
    label: int
    tensor: np.ndarray
    source_frame_count: int
    # persons detected in each source frame; None when unknown (imported tensors)
    person_counts: tuple | None = None

    @property
    def max_source_persons(self) -> int:
        if self.person_counts is None:
            return int(np.count_nonzero(np.any(self.tensor != 0, axis=(1, 2, 3))))
        return max(self.person_counts, default=0)


@dataclass(frozen=True)
class SkeletonTemplate:
    """Training-set skeleton statistics.

    ``cg`` is the center of gravity, ``r[i]`` the mean Euclidean distance of
    joint ``i`` to ``cg`` and ``mean_pos[i]`` the mean position of joint ``i``.
    """

    cg: np.ndarray
    r: np.ndarray
    mean_pos: np.ndarray

    def to_json(self) -> dict:
        return {"cg": self.cg.tolist(), "r": self.r.tolist(), "mean_pos": self.mean_pos.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "SkeletonTemplate":
        try:
            cg = np.asarray(obj["cg"], dtype=np.float64)
            r = np.asarray(obj["r"], dtype=np.float64)
            mean_pos = np.asarray(obj.get("mean_pos", np.zeros((len(r), 2))), dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigurationError(f"invalid template: {exc}") from exc
        if cg.shape != (2,) or r.shape != (NUM_JOINTS,) or mean_pos.shape != (NUM_JOINTS, 2):
            raise ConfigurationError("template needs cg (2,), r (18,) and mean_pos (18, 2)")
        if not (np.all(np.isfinite(r)) and np.all(r >= 0)):
            raise ConfigurationError("template distances must be finite and non-negative")
        return cls(cg, r, mean_pos)


@dataclass(frozen=True)
class InputNorm:
    """Per (channel, joint) mean and standard deviation of detected training observations.

    Used as a frozen input standardization; undetected joints stay at zero.
    Channels listed in ``passthrough`` keep mean 0 and std 1, i.e. pass
    unchanged.
    """

    mean: np.ndarray  # (C, V)
    std: np.ndarray   # (C, V)

    @classmethod
    def from_clips(cls, clips, min_std: float = 1e-6, passthrough=()) -> "InputNorm":
        total = count = sq = None
        for clip in clips:
            n = min(clip.source_frame_count, clip.tensor.shape[2])
            obs = clip.tensor[:, :, :n, :].astype(np.float64)   # (M, C, T, V)
            det = (obs[:, 2:3] > 0)
            w = np.broadcast_to(det, obs.shape)
            s = np.where(w, obs, 0).sum(axis=(0, 2))
            s2 = np.where(w, obs * obs, 0).sum(axis=(0, 2))
            c = w.sum(axis=(0, 2))
            total, sq, count = (s, s2, c) if total is None else (total + s, sq + s2, count + c)
        if total is None or not count.any():
            raise ConfigurationError("no detected joints to compute input statistics")
        safe = np.maximum(count, 1)
        mean = total / safe
        std = np.sqrt(np.maximum(sq / safe - mean ** 2, 0.0))
        std = np.where(std < min_std, 1.0, std)
        for ch in passthrough:
            mean[ch], std[ch] = 0.0, 1.0
        return cls(mean, std)

    def apply(self, tensor: np.ndarray) -> np.ndarray:
        """Standardize ``(..., C, T, V)`` values of detected joints."""
        detected = tensor[..., 2:3, :, :] > 0
        out = (tensor - self.mean[:, None, :]) / self.std[:, None, :]
        return np.where(detected, out, 0).astype(tensor.dtype)

    def to_json(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "InputNorm":
        return cls(np.asarray(obj["mean"], dtype=np.float64), np.asarray(obj["std"], dtype=np.float64))


def save_template(template: SkeletonTemplate, path) -> None:
    Path(path).write_text(json.dumps(template.to_json(), indent=2))


def load_template(path) -> SkeletonTemplate:
    try:
        obj = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return SkeletonTemplate.from_json(obj)


# -- OpenPose JSON ---------------------------------------------------------

def _frame_from_obj(obj) -> SkeletonFrame:
    if not isinstance(obj, dict) or not isinstance(obj.get("people"), list):
        raise FormatError('frame must be an object with a "people" array')
    persons = []
    for p, person in enumerate(obj["people"]):
        kp = person.get("pose_keypoints_2d", person.get("pose_keypoints")) if isinstance(person, dict) else None
        if not isinstance(kp, list) or len(kp) != NUM_JOINTS * 3:
            n = len(kp) if isinstance(kp, list) else "no"
            raise FormatError(f"person {p}: expected {NUM_JOINTS * 3} keypoint values, got {n}")
        persons.append(np.asarray(kp, dtype=np.float64).reshape(NUM_JOINTS, 3))
    if not persons:
        return SkeletonFrame(np.zeros((0, NUM_JOINTS, 3)))
    return SkeletonFrame(np.stack(persons))


def parse_openpose_frame(json_text: str) -> SkeletonFrame:
    try:
        obj = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed frame JSON: {exc}") from exc
    return _frame_from_obj(obj)


def parse_clip_json(json_text: str) -> list:
    """Frames of a per-clip export ``{"frames": [frame, ...]}``."""
    try:
        obj = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"malformed clip JSON: {exc}") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("frames"), list):
        raise FormatError('clip must be an object with a "frames" array')
    frames = []
    for t, frame in enumerate(obj["frames"]):
        try:
            frames.append(_frame_from_obj(frame))
        except FormatError as exc:
            raise FormatError(f"frame {t}: {exc}") from exc
    return frames


def load_clip_frames(path) -> list:
    """Read a per-clip JSON file, or a directory holding one JSON per frame."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.json"))
        frames = []
        for f in files:
            try:
                frames.append(parse_openpose_frame(f.read_text()))
            except FormatError as exc:
                raise FormatError(f"{f}: {exc}") from exc
        return frames
    try:
        return parse_clip_json(path.read_text())
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# -- clip assembly ---------------------------------------------------------

def pad_or_trim(frames, target_T: int = NUM_FRAMES):
    """Cyclically repeat a short sequence from its first frame, or trim a long one."""
    n = len(frames)
    if n < 1:
        raise InputError("pad_or_trim needs at least one frame")
    idx = np.arange(target_T) % n
    if isinstance(frames, np.ndarray):
        return frames[idx]
    return [frames[i] for i in idx]


def assemble_clip(frames, id: str, label: int, max_persons: int = NUM_PERSONS,
                  target_T: int = NUM_FRAMES) -> SkeletonClip:
    if not frames:
        raise InputError(f"clip {id!r} has no frames")
    slots = np.zeros((len(frames), max_persons, NUM_JOINTS, 3))
    counts = []
    for t, frame in enumerate(frames):
        persons = frame.persons
        counts.append(persons.shape[0])
        if persons.shape[0] == 0:
            continue
        order = np.argsort(-persons[:, :, 2].mean(axis=1), kind="stable")[:max_persons]
        slots[t, : len(order)] = persons[order]
    slots = pad_or_trim(slots, target_T)
    tensor = np.ascontiguousarray(slots.transpose(1, 3, 0, 2), dtype=np.float32)
    return SkeletonClip(id, int(label), tensor, len(frames), tuple(counts))


def joint_recognition_rate(clip: SkeletonClip) -> float:
    """Fraction of detected joints of the primary person over its source frames."""
    n = min(clip.source_frame_count, clip.tensor.shape[2])
    conf = clip.tensor[0, 2, :n, :]
    if clip.person_counts is None:
        present = np.any(clip.tensor[0, :, :n, :] != 0, axis=(0, 2))
    else:
        present = np.asarray(clip.person_counts[:n]) >= 1
    if not present.any():
        return 0.0
    return np.count_nonzero(conf[present] > 0) / float(present.sum() * conf.shape[1])


@dataclass(frozen=True)
class QualityVerdict:
    accepted: bool
    reason: str | None = None
    recognition_rate: float = 0.0

    def __bool__(self) -> bool:
        return self.accepted


def quality_filter(clip: SkeletonClip, threshold: float = 0.5, max_persons: int = NUM_PERSONS) -> QualityVerdict:
    rate = joint_recognition_rate(clip)
    if clip.max_source_persons > max_persons:
        return QualityVerdict(False, "too_many_persons", rate)
    if not rate > threshold:
        return QualityVerdict(False, "low_recognition", rate)
    return QualityVerdict(True, None, rate)


def normalize_coordinates(clip: SkeletonClip, width: float = FRAME_WIDTH,
                          height: float = FRAME_HEIGHT) -> SkeletonClip:
    """Map detected pixel coordinates to ``[-0.5, 0.5]`` around the image center."""
    if width <= 0 or height <= 0:
        raise ConfigurationError(f"frame size must be positive, got {width}x{height}")
    t = clip.tensor.copy()
    detected = t[:, 2] > 0
    t[:, 0] = np.where(detected, t[:, 0] / width - 0.5, 0)
    t[:, 1] = np.where(detected, t[:, 1] / height - 0.5, 0)
    return replace(clip, tensor=t)


def _source_observations(clip):
    n = min(clip.source_frame_count, clip.tensor.shape[2])
    xyc = clip.tensor[:, :, :n, :].astype(np.float64)
    return xyc[:, 0], xyc[:, 1], xyc[:, 2] > 0


def compute_template(training_clips) -> SkeletonTemplate:
    clips = list(training_clips)
    total = np.zeros(2)
    count = 0
    for clip in clips:
        x, y, det = _source_observations(clip)
        total += (x[det].sum(), y[det].sum())
        count += int(det.sum())
    if count == 0:
        raise ConfigurationError("no detected joints in the training clips")
    cg = total / count

    dist_sum = np.zeros(NUM_JOINTS)
    pos_sum = np.zeros((NUM_JOINTS, 2))
    n_obs = np.zeros(NUM_JOINTS, dtype=np.int64)
    for clip in clips:
        x, y, det = _source_observations(clip)
        d = np.hypot(x - cg[0], y - cg[1])
        dist_sum += np.where(det, d, 0).sum(axis=(0, 1))
        pos_sum[:, 0] += np.where(det, x, 0).sum(axis=(0, 1))
        pos_sum[:, 1] += np.where(det, y, 0).sum(axis=(0, 1))
        n_obs += det.sum(axis=(0, 1))
    missing = np.flatnonzero(n_obs == 0)
    if missing.size:
        raise ConfigurationError(f"joint {int(missing[0])} is never detected; its distance is undefined")
    return SkeletonTemplate(cg, dist_sum / n_obs, pos_sum / n_obs[:, None])


# -- STGT tensor files -----------------------------------------------------

def export_tensor(clip, path) -> None:
    """Write ``STGT`` magic, five little-endian u32 (version, M, C, T, V), then f32 values."""
    tensor = clip.tensor if isinstance(clip, SkeletonClip) else np.asarray(clip)
    if tensor.ndim != 4:
        raise FormatError(f"clip tensor must be 4-D, got shape {tensor.shape}")
    payload = np.ascontiguousarray(tensor, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_STGT_HEADER.pack(STGT_MAGIC, STGT_VERSION, *payload.shape))
        fh.write(payload.tobytes())


def read_tensor(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _STGT_HEADER.size:
        raise TruncationError(f"{path}: file shorter than the STGT header")
    magic, version, *shape = _STGT_HEADER.unpack_from(data)
    if magic != STGT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != STGT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = math.prod(shape) * 4
    payload = data[_STGT_HEADER.size:]
    if len(payload) < expected:
        raise TruncationError(f"{path}: payload has {len(payload)} bytes, header {tuple(shape)} needs {expected}")
    if len(payload) > expected:
        raise FormatError(f"{path}: {len(payload) - expected} trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).astype(np.float32)


def import_tensor(path, id: str | None = None, label: int = -1) -> SkeletonClip:
    tensor = read_tensor(path)
    return SkeletonClip(id if id is not None else Path(path).stem, label, tensor, tensor.shape[2])


# -- manifests -------------------------------------------------------------

@dataclass(frozen=True)
class ManifestEntry:
    id: str
    path: str
    label: int
    split: str | None = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    class_names: tuple
    # directory that relative entry paths resolve against
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        ids = [e.id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise FormatError("manifest clip ids must be unique")
        for e in self.entries:
            if not 0 <= e.label < len(self.class_names):
                raise FormatError(f"entry {e.id!r}: label {e.label} outside {len(self.class_names)} classes")
            if e.split not in (None, "train", "val"):
                raise FormatError(f"entry {e.id!r}: split must be train or val, got {e.split!r}")

    def split_entries(self, split: str) -> list:
        return [e for e in self.entries if e.split == split]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.root / p

    def to_json(self) -> dict:
        return {
            "classes": list(self.class_names),
            "entries": [
                {"id": e.id, "path": e.path, "label": e.label, **({"split": e.split} if e.split else {})}
                for e in self.entries
            ],
        }


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
        entries = tuple(
            ManifestEntry(str(e["id"]), str(e["path"]), int(e["label"]), e.get("split"))
            for e in obj["entries"]
        )
        classes = tuple(str(c) for c in obj["classes"])
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid manifest ({exc!r})") from exc
    return DatasetManifest(entries, classes, root=path.parent)


def load_split(manifest: DatasetManifest, split: str | None = None) -> list:
    """Import the tensors of one split (all entries when ``split`` is None)."""
    entries = manifest.entries if split is None else manifest.split_entries(split)
    return [import_tensor(manifest.resolve(e), e.id, e.label) for e in entries]


def split_dataset(manifest: DatasetManifest, ratio_train: int = 3, ratio_val: int = 1,
                  seed: int = 0) -> DatasetManifest:
    """Per-class seeded train/val split with ``floor(n * val / (train + val))`` validation samples."""
    if ratio_train <= 0 or ratio_val <= 0:
        raise ConfigurationError("split ratios must be positive")
    parts = ratio_train + ratio_val
    rng = np.random.default_rng(seed)
    splits = {}
    for label in sorted({e.label for e in manifest.entries}):
        members = [e for e in manifest.entries if e.label == label]
        if len(members) < parts:
            warnings.warn(f"class {label} has {len(members)} samples; all assigned to train", stacklevel=2)
            splits.update({e.id: "train" for e in members})
            continue
        n_val = len(members) * ratio_val // parts
        order = rng.permutation(len(members))
        for rank, i in enumerate(order):
            splits[members[i].id] = "val" if rank < n_val else "train"
    entries = tuple(replace(e, split=splits[e.id]) for e in manifest.entries)
    return DatasetManifest(entries, manifest.class_names, manifest.root)


def clip_file_name(clip_id: str) -> str:
    safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in clip_id)
    return f"{safe}.stgt"


def write_dataset(out_dir, manifest: DatasetManifest, clips) -> DatasetManifest:
    """Export ``clips`` (matching manifest order) and the manifest into ``out_dir``."""
    out_dir = Path(out_dir)
    os.makedirs(out_dir / "tensors", exist_ok=True)
    by_id = {c.id: c for c in clips}
    entries = []
    for e in manifest.entries:
        rel = Path("tensors") / clip_file_name(e.id)
        export_tensor(by_id[e.id], out_dir / rel)
        entries.append(replace(e, path=rel.as_posix()))
    written = DatasetManifest(tuple(entries), manifest.class_names, out_dir)
    save_manifest(written, out_dir / "manifest.json")
    return written
