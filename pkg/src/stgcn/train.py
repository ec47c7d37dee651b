"""SGD training with step-decayed learning rate, evaluation and synthetic data."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal

import numpy as np

from .data import NUM_FRAMES, DatasetManifest, InputNorm, ManifestEntry, SkeletonClip, compute_template, load_split
from .errors import ConfigurationError, InputError
from .graph import NUM_JOINTS, Strategy
from .net import DESK_CHANNELS, ModelConfig, ModelParams, backward_batch, forward_batch, init_model

log = logging.getLogger(__name__)

BATCH_SIZE_GRID = (8, 16, 32, 64, 128)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    base_lr: float = 0.1
    decay_factor: float = 0.1
    decay_every: int = 10
    decay_start_epoch: int = 20
    weight_decay: float = 0.0001
    batch_size: int = 8
    seed: int = 0
    strategy: Strategy = Strategy.SPATIAL
    mask: bool = True
    eval_every: int = 5
    # compute precision; "float32" roughly halves training time
    precision: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if self.base_lr <= 0 or self.decay_factor <= 0 or self.weight_decay < 0:
            raise ConfigurationError("learning rate and decay factor must be positive, weight decay non-negative")
        if self.batch_size < 1 or self.epochs < 0 or self.decay_every < 1 or self.eval_every < 1:
            raise ConfigurationError("batch size, decay interval and eval interval must be at least 1")
        if self.precision not in ("float32", "float64"):
            raise ConfigurationError(f"precision must be float32 or float64, got {self.precision!r}")


def lr_schedule(cfg: TrainConfig, epoch: int) -> float:
    """``base_lr * decay_factor**n``, n = decay points reached (start, start + every, ...)."""
    if epoch < 0:
        raise InputError(f"epoch must be non-negative, got {epoch}")
    n = 0 if epoch < cfg.decay_start_epoch else (epoch - cfg.decay_start_epoch) // cfg.decay_every + 1
    # decimal arithmetic keeps 0.1 * 0.1 at the float nearest 0.01
    return float(Decimal(repr(cfg.base_lr)) * Decimal(repr(cfg.decay_factor)) ** n)


def _decays(path: str) -> bool:
    return not (path.endswith("bias") or path.endswith("m_mask"))


def sgd_step(params: ModelParams, grads: dict, lr: float, weight_decay: float) -> ModelParams:
    """``p - lr * (g + weight_decay * p)``; masks and biases get no weight decay."""
    updated = {}
    for path, p in params.named_parameters():
        g = grads[path]
        if g.shape != p.shape:
            raise RuntimeError(f"{path}: gradient shape {g.shape} != parameter shape {p.shape}")
        if weight_decay and _decays(path):
            g = g + weight_decay * p
        updated[path] = (p - lr * g).astype(p.dtype, copy=False)
    return params.with_parameters(updated)


@dataclass(frozen=True)
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    val_top1: float | None = None


@dataclass
class TrainHistory:
    rows: list = field(default_factory=list)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["epoch", "lr", "train_loss", "val_top1"])
        for r in self.rows:
            writer.writerow([r.epoch, repr(r.lr), repr(r.train_loss), "" if r.val_top1 is None else repr(r.val_top1)])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @property
    def final_val_top1(self) -> float | None:
        evaluated = [r.val_top1 for r in self.rows if r.val_top1 is not None]
        return evaluated[-1] if evaluated else None


def _as_arrays(clips):
    tensors = np.stack([c.tensor for c in clips])
    labels = np.array([c.label for c in clips], dtype=np.int64)
    return tensors, labels


def predict(model: ModelParams, clips, batch_size: int = 32):
    """Argmax class per clip (ties go to the lower index) and the number of tied clips."""
    tensors = np.stack([c.tensor if isinstance(c, SkeletonClip) else c for c in clips])
    preds, ties = [], 0
    for start in range(0, len(tensors), batch_size):
        scores = forward_batch(model, list(tensors[start:start + batch_size]))
        preds.append(scores.argmax(axis=1))
        ties += int(np.sum((scores == scores.max(axis=1, keepdims=True)).sum(axis=1) > 1))
    return np.concatenate(preds), ties


def evaluate(model: ModelParams, clips) -> float:
    """Top-1 accuracy over labelled clips."""
    clips = list(clips)
    if not clips:
        raise InputError("cannot evaluate an empty split")
    preds, ties = predict(model, clips)
    if ties:
        log.info("%d of %d clips had tied top scores", ties, len(clips))
    labels = np.array([c.label for c in clips])
    return float(np.mean(preds == labels))


def prepare_model(cfg: TrainConfig, train_clips, num_classes: int, channels=DESK_CHANNELS,
                  normalize_inputs: bool = True, kt: int = 9) -> ModelParams:
    """Initial model whose template and input statistics come from the training clips."""
    train_clips = list(train_clips)
    if not train_clips:
        raise ConfigurationError("no training clips to derive model statistics from")
    template = compute_template(train_clips) if cfg.strategy.needs_template else None
    norm = InputNorm.from_clips(train_clips) if normalize_inputs else None
    config = ModelConfig(cfg.strategy, num_classes, mask=cfg.mask, channels=channels, kt=kt,
                         template=template, input_norm=norm)
    return init_model(config, seed=cfg.seed)


def train(cfg: TrainConfig, manifest: DatasetManifest, model_init: ModelParams, clips=None):
    """Mini-batch SGD over the manifest's train split.

    ``clips`` optionally maps clip id to an in-memory :class:`SkeletonClip`;
    otherwise tensors are imported from the manifest paths.  Validation
    top-1 is recorded every ``cfg.eval_every`` epochs and at the last epoch.
    """
    def gather(split):
        if clips is None:
            return load_split(manifest, split)
        return [SkeletonClip(e.id, e.label, clips[e.id].tensor, clips[e.id].source_frame_count)
                for e in manifest.split_entries(split)]

    train_clips = gather("train")
    if not train_clips:
        raise ConfigurationError("manifest has no training entries")
    val_clips = gather("val")
    tensors, labels = _as_arrays(train_clips)
    n = len(train_clips)

    rng = np.random.default_rng(cfg.seed)
    model = model_init.astype(cfg.precision)
    history = TrainHistory()
    for epoch in range(cfg.epochs):
        lr = lr_schedule(cfg, epoch)
        order = rng.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads = backward_batch(model, list(tensors[idx]), labels[idx])
            total += loss * len(idx)
            model = sgd_step(model, grads, lr, cfg.weight_decay)
        train_loss = total / n
        if not math.isfinite(train_loss):
            log.warning("epoch %d: training loss is %s", epoch, train_loss)
        val = None
        last = epoch == cfg.epochs - 1
        if val_clips and ((epoch + 1) % cfg.eval_every == 0 or last):
            val = evaluate(model, val_clips)
        history.rows.append(HistoryRow(epoch, lr, train_loss, val))
        log.info("epoch %d lr %g loss %.5f%s", epoch, lr, train_loss,
                 "" if val is None else f" val_top1 {val:.4f}")
    return model, history


# -- synthetic data ----------------------------------------------------------

# Rest pose in normalized image coordinates (origin at the image center, y down).
REST_POSE = np.array([
    (0.00, -0.30), (0.00, -0.20), (-0.08, -0.20), (-0.12, -0.08), (-0.14, 0.02),
    (0.08, -0.20), (0.12, -0.08), (0.14, 0.02), (-0.05, 0.05), (-0.06, 0.20),
    (-0.06, 0.35), (0.05, 0.05), (0.06, 0.20), (0.06, 0.35), (-0.02, -0.32),
    (0.02, -0.32), (-0.04, -0.31), (0.04, -0.31),
])

# disjoint moving joint groups: right arm, left arm, right leg, left leg, head, hips
MOTION_GROUPS = ((3, 4), (6, 7), (9, 10), (12, 13), (0, 14, 15, 16, 17), (8, 11))
MOTION_AMPLITUDE = 0.05
MOTION_OFFSET = 0.1


def synthetic_clip(label: int, T: int = NUM_FRAMES, noise_sigma: float = 0.0, rng=None,
                   clip_id: str | None = None, num_classes: int = 4) -> SkeletonClip:
    """One person moving joint group ``label % 6`` along a class-specific sinusoid.

    The moving joints oscillate around a center displaced from the rest pose
    in direction ``2 pi label / num_classes`` at ``4 + 4 * label`` cycles per
    clip; classes sharing a joint group still differ in direction and
    frequency.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    t = np.arange(T)
    direction = 2 * np.pi * label / num_classes
    angle = 2 * np.pi * (4 + 4 * label) * t / T + label * np.pi / 4
    xy = np.broadcast_to(REST_POSE, (T, NUM_JOINTS, 2)).copy()
    joints = list(MOTION_GROUPS[label % len(MOTION_GROUPS)])
    xy[:, joints, 0] += MOTION_OFFSET * np.cos(direction) + MOTION_AMPLITUDE * np.sin(angle)[:, None]
    xy[:, joints, 1] += MOTION_OFFSET * np.sin(direction) + MOTION_AMPLITUDE * np.cos(angle)[:, None]
    if noise_sigma > 0:
        xy += rng.normal(0.0, noise_sigma, xy.shape)
    tensor = np.zeros((2, 3, T, NUM_JOINTS), dtype=np.float32)
    tensor[0, :2] = xy.transpose(2, 0, 1)
    tensor[0, 2] = 1.0
    return SkeletonClip(clip_id or f"synth_{label}", label, tensor, T, (1,) * T)


def synthetic_dataset(num_classes: int, samples_per_class: int, T: int = NUM_FRAMES,
                      noise_sigma: float = 0.02, seed: int = 0):
    """Manifest (paths not yet written) and clips of a labelled synthetic dataset."""
    if num_classes < 2:
        raise ConfigurationError(f"need at least 2 classes, got {num_classes}")
    rng = np.random.default_rng(seed)
    clips, entries = [], []
    for k in range(num_classes):
        for i in range(samples_per_class):
            clip_id = f"synth_c{k:02d}_{i:04d}"
            clips.append(synthetic_clip(k, T, noise_sigma, rng, clip_id, num_classes))
            entries.append(ManifestEntry(clip_id, f"tensors/{clip_id}.stgt", k))
    manifest = DatasetManifest(tuple(entries), tuple(f"class_{k}" for k in range(num_classes)))
    return manifest, clips
