"""Spatial-temporal graph convolution network with hand-written gradients.

Public layer functions take feature maps shaped ``(..., C, T, V)``.  The
model internals run time-major, ``(T, N, V, C)`` with ``N`` stacked person
samples, so that temporal taps slice contiguous memory and every
contraction is a single GEMM.

Each block is ``relu(temporal_conv(relu(spatial_graph_conv(x))) [+ residual])``;
the head average-pools over frames and joints and applies a linear
classifier.  Person slots of a clip are scored independently and averaged
over the non-empty slots.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import InputNorm, SkeletonClip, SkeletonTemplate
from .errors import ConfigurationError, DimensionError, FormatError, InputError
from .graph import NUM_JOINTS, PartitionedAdjacency, Strategy, build_adjacency

DESK_CHANNELS = (3, 32, 64, 64)
FULL_CHANNELS = (3, 64, 64, 64, 64, 128, 128, 128, 256, 256, 256)

STGM_MAGIC = b"STGM"
STGM_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    strategy: Strategy
    num_classes: int
    mask: bool = True
    channels: tuple = DESK_CHANNELS
    kt: int = 9
    residual: bool = False
    alpha: float = 0.001
    template: SkeletonTemplate | None = field(default=None, compare=False)
    # frozen standardization of detected inputs; None feeds raw coordinates
    input_norm: InputNorm | None = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be at least 2, got {self.num_classes}")
        if len(self.channels) < 2 or min(self.channels) < 1:
            raise ConfigurationError(f"invalid channel plan {self.channels}")
        if self.kt < 1 or self.kt % 2 == 0:
            raise ConfigurationError(f"temporal kernel size must be odd, got {self.kt}")
        if self.strategy.needs_template and self.template is None:
            raise ConfigurationError(f"strategy {self.strategy.value!r} needs a skeleton template")

    def to_json(self) -> dict:
        return {
            "strategy": self.strategy.value,
            "mask": self.mask,
            "channels": list(self.channels),
            "Kt": self.kt,
            "num_classes": self.num_classes,
            "residual": self.residual,
            "alpha": self.alpha,
            "template": self.template.to_json() if self.template is not None else None,
            "input_norm": self.input_norm.to_json() if self.input_norm is not None else None,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ModelConfig":
        template = obj.get("template")
        input_norm = obj.get("input_norm")
        return cls(
            strategy=obj["strategy"],
            num_classes=int(obj["num_classes"]),
            mask=bool(obj["mask"]),
            channels=tuple(obj["channels"]),
            kt=int(obj["Kt"]),
            residual=bool(obj.get("residual", False)),
            alpha=float(obj.get("alpha", 0.001)),
            template=SkeletonTemplate.from_json(template) if template else None,
            input_norm=InputNorm.from_json(input_norm) if input_norm else None,
        )


@dataclass
class BlockParams:
    graph_weight: np.ndarray          # (K, C_in, C_out)
    graph_bias: np.ndarray            # (C_out,)
    temporal_weight: np.ndarray       # (C_out, C_out, Kt): in, out, tap
    temporal_bias: np.ndarray         # (C_out,)
    m_mask: np.ndarray | None = None  # (V, V)
    residual_weight: np.ndarray | None = None  # (C_in, C_out), only when C_in != C_out
    residual_bias: np.ndarray | None = None

    def named(self, prefix: str):
        for name in ("graph_weight", "graph_bias", "temporal_weight", "temporal_bias",
                     "m_mask", "residual_weight", "residual_bias"):
            value = getattr(self, name)
            if value is not None:
                yield f"{prefix}.{name}", value


@dataclass
class ModelParams:
    config: ModelConfig
    adjacency: np.ndarray  # normalized (K, V, V), fixed
    blocks: list
    classifier_weight: np.ndarray
    classifier_bias: np.ndarray

    def named_parameters(self) -> list:
        out = []
        for b, block in enumerate(self.blocks):
            out.extend(block.named(f"blocks.{b}"))
        out.append(("classifier.weight", self.classifier_weight))
        out.append(("classifier.bias", self.classifier_bias))
        return out

    @property
    def dtype(self):
        return self.classifier_weight.dtype

    def astype(self, dtype) -> "ModelParams":
        """Same model computing in ``dtype`` (adjacency included)."""
        new = self.with_parameters({k: v.astype(dtype) for k, v in self.named_parameters()})
        new.adjacency = self.adjacency.astype(dtype)
        return new

    def copy(self) -> "ModelParams":
        return self.with_parameters({k: v.copy() for k, v in self.named_parameters()})

    def with_parameters(self, values: dict) -> "ModelParams":
        """New model with the named arrays swapped in (shapes must match)."""
        blocks = [replace(b) for b in self.blocks]
        new = ModelParams(self.config, self.adjacency, blocks, self.classifier_weight, self.classifier_bias)
        for path, old in self.named_parameters():
            if path not in values:
                continue
            value = np.asarray(values[path])
            if value.shape != old.shape:
                raise DimensionError(f"{path}: shape {value.shape} != {old.shape}")
            _set_param(new, path, value)
        return new


def _set_param(model, path, value):
    parts = path.split(".")
    if parts[0] == "classifier":
        setattr(model, f"classifier_{parts[1]}", value)
    else:
        setattr(model.blocks[int(parts[1])], parts[2], value)


def init_model(config: ModelConfig, seed: int = 0) -> ModelParams:
    """He-initialized weights, zero biases and all-ones masks."""
    rng = np.random.default_rng(seed)
    pa = build_adjacency(config.strategy, config.template, config.alpha)
    K = pa.K
    blocks = []
    for c_in, c_out in zip(config.channels[:-1], config.channels[1:]):
        block = BlockParams(
            graph_weight=rng.normal(0.0, np.sqrt(2.0 / (K * c_in)), (K, c_in, c_out)),
            graph_bias=np.zeros(c_out),
            temporal_weight=rng.normal(0.0, np.sqrt(2.0 / (c_out * config.kt)), (c_out, c_out, config.kt)),
            temporal_bias=np.zeros(c_out),
        )
        if config.mask:
            block.m_mask = np.ones((NUM_JOINTS, NUM_JOINTS))
        if config.residual and c_in != c_out:
            block.residual_weight = rng.normal(0.0, np.sqrt(1.0 / c_in), (c_in, c_out))
            block.residual_bias = np.zeros(c_out)
        blocks.append(block)
    c_last = config.channels[-1]
    return ModelParams(
        config=config,
        adjacency=pa.matrices,
        blocks=blocks,
        classifier_weight=rng.normal(0.0, np.sqrt(1.0 / c_last), (c_last, config.num_classes)),
        classifier_bias=np.zeros(config.num_classes),
    )


# -- layer kernels, time-major (T, N, V, C) --------------------------------

def _effective_adjacency(adjacency, m_mask):
    return adjacency if m_mask is None else adjacency * m_mask


def _gconv_forward(x, a_eff, weight, bias):
    # xa[t, n, c, k, i] = sum_j a_eff[k, i, j] x[t, n, j, c]
    xa = np.tensordot(x, a_eff, axes=([2], [2]))
    y = np.tensordot(xa, weight, axes=([2, 3], [1, 0])) + bias
    return y, xa


def _gconv_backward(dy, x, xa, a_eff, weight):
    d_weight = np.tensordot(xa, dy, axes=([0, 1, 4], [0, 1, 2])).transpose(1, 0, 2)
    d_bias = dy.sum(axis=(0, 1, 2))
    dxa = np.tensordot(dy, weight, axes=([3], [2]))  # (T, N, V_i, K, C)
    dx = np.tensordot(dxa, a_eff, axes=([3, 2], [0, 1])).transpose(0, 1, 3, 2)
    d_a_eff = np.tensordot(dxa, x, axes=([0, 1, 4], [0, 1, 3])).transpose(1, 0, 2)
    return dx, d_weight, d_bias, d_a_eff


def _tconv_forward(x, weight, bias):
    T, N, V, C = x.shape
    kt = weight.shape[2]
    pad = kt // 2
    taps = np.ascontiguousarray(weight.transpose(2, 0, 1))  # strided slices would bypass BLAS
    xp = np.zeros((T + 2 * pad, N, V, C), dtype=x.dtype)
    xp[pad:pad + T] = x
    flat = xp.reshape(-1, N * V, C)
    y = np.zeros((T * N * V, weight.shape[1]), dtype=x.dtype)
    for tau in range(kt):
        y += flat[tau:tau + T].reshape(-1, C) @ taps[tau]
    y += bias
    return y.reshape(T, N, V, -1), xp


def _tconv_backward(dy, xp, weight):
    T, N, V, O = dy.shape
    C, _, kt = weight.shape
    pad = kt // 2
    taps_t = np.ascontiguousarray(weight.transpose(2, 1, 0))
    dflat = dy.reshape(-1, O)
    xflat = xp.reshape(-1, N * V, C)
    d_taps = np.empty((kt, C, O), dtype=dy.dtype)
    dxp = np.zeros((T + 2 * pad, N * V, C), dtype=dy.dtype)
    for tau in range(kt):
        d_taps[tau] = xflat[tau:tau + T].reshape(-1, C).T @ dflat
        dxp[tau:tau + T] += (dflat @ taps_t[tau]).reshape(T, N * V, C)
    dx = dxp[pad:pad + T].reshape(T, N, V, C)
    return dx, d_taps.transpose(1, 2, 0).copy(), dy.sum(axis=(0, 1, 2))


def _to_time_major(x):
    x = np.asarray(x)
    if x.ndim < 3:
        raise DimensionError(f"feature map needs (C, T, V) axes, got shape {x.shape}")
    lead = x.shape[:-3]
    C, T, V = x.shape[-3:]
    return np.moveaxis(x.reshape((-1, C, T, V)), (0, 1, 2, 3), (1, 3, 0, 2)), lead


def _from_time_major(x, lead):
    T, N, V, C = x.shape
    return np.moveaxis(x, (1, 3, 0, 2), (0, 1, 2, 3)).reshape(lead + (C, T, V))


def spatial_graph_conv(x, pa: PartitionedAdjacency, bp: BlockParams, mask_enabled: bool = False):
    """``y = sum_k W_k^T x (A_k * M)^T + b`` over feature maps ``(..., C, T, V)``."""
    a = np.asarray(pa.matrices if isinstance(pa, PartitionedAdjacency) else pa, dtype=np.float64)
    K, C_in, C_out = bp.graph_weight.shape
    x = np.asarray(x)
    if a.shape[0] != K:
        raise DimensionError(f"partition axis: adjacency has K={a.shape[0]}, weights K={K}")
    if x.ndim < 3 or x.shape[-3] != C_in:
        raise DimensionError(f"channel axis: input shape {x.shape}, weights expect {C_in} channels")
    if x.shape[-1] != a.shape[-1]:
        raise DimensionError(f"joint axis: input has V={x.shape[-1]}, adjacency V={a.shape[-1]}")
    mask = bp.m_mask if mask_enabled else None
    if mask_enabled and mask is None:
        raise DimensionError("mask axis: mask enabled but block has no m_mask")
    xt, lead = _to_time_major(x)
    y, _ = _gconv_forward(xt, _effective_adjacency(a, mask), bp.graph_weight, bp.graph_bias)
    return _from_time_major(y, lead)


def temporal_conv(x, bp: BlockParams):
    """Zero-padded, stride-1 convolution along frames, per joint."""
    C, O, kt = bp.temporal_weight.shape
    if kt % 2 == 0:
        raise ConfigurationError(f"temporal kernel size must be odd, got {kt}")
    x = np.asarray(x)
    if x.ndim < 3 or x.shape[-3] != C:
        raise DimensionError(f"channel axis: input shape {x.shape}, temporal weights expect {C} channels")
    xt, lead = _to_time_major(x)
    y, _ = _tconv_forward(xt, bp.temporal_weight, bp.temporal_bias)
    return _from_time_major(y, lead)


# -- whole-model forward / backward ----------------------------------------

def _clip_tensors(clips):
    arrays = [c.tensor if isinstance(c, SkeletonClip) else np.asarray(c) for c in clips]
    if not arrays:
        raise InputError("empty batch")
    shape = arrays[0].shape
    for a in arrays:
        if a.ndim != 4 or a.shape != shape:
            raise DimensionError(f"clip axes: expected (M, C, T, V) tensors of one shape, got {a.shape}")
    return np.stack(arrays)


def _gather_persons(batch, dtype):
    """Stack non-empty person slots time-major; each clip keeps at least slot 0."""
    B, M = batch.shape[:2]
    nonempty = np.any(batch != 0, axis=(2, 3, 4))
    nonempty[~nonempty.any(axis=1), 0] = True
    owner, slot = np.nonzero(nonempty)
    x = batch[owner, slot].astype(dtype)  # (N, C, T, V)
    weights = (1.0 / nonempty.sum(axis=1)[owner]).astype(dtype)
    return np.ascontiguousarray(x.transpose(2, 0, 3, 1)), owner, weights


def _check_input(model, batch):
    C, V = batch.shape[2], batch.shape[4]
    if C != model.config.channels[0]:
        raise DimensionError(f"channel axis: clip has {C} channels, model expects {model.config.channels[0]}")
    if V != model.adjacency.shape[-1]:
        raise DimensionError(f"joint axis: clip has V={V}, model graph has {model.adjacency.shape[-1]}")


def _forward(model, batch, keep_cache):
    _check_input(model, batch)
    dtype = model.classifier_weight.dtype
    if model.config.input_norm is not None:
        batch = model.config.input_norm.apply(batch)
    x, owner, weights = _gather_persons(batch, dtype)
    caches = []
    for block in model.blocks:
        a_eff = _effective_adjacency(model.adjacency, block.m_mask)
        h1, xa = _gconv_forward(x, a_eff, block.graph_weight, block.graph_bias)
        a1 = np.maximum(h1, 0)
        h2, a1p = _tconv_forward(a1, block.temporal_weight, block.temporal_bias)
        if model.config.residual:
            if block.residual_weight is not None:
                h2 += x @ block.residual_weight + block.residual_bias
            else:
                h2 += x
        out = np.maximum(h2, 0)
        if keep_cache:
            caches.append((x, xa, a_eff, h1 > 0, a1p, h2 > 0))
        x = out
    pooled = x.mean(axis=(0, 2))  # (N, C_last)
    person_scores = pooled @ model.classifier_weight + model.classifier_bias
    B = batch.shape[0]
    scores = np.zeros((B, person_scores.shape[1]), dtype=dtype)
    np.add.at(scores, owner, weights[:, None] * person_scores)
    return scores, (caches, x.shape, pooled, owner, weights)


def forward_batch(model: ModelParams, clips) -> np.ndarray:
    """Class scores ``(B, num_classes)`` for a list of clips or ``(M, C, T, V)`` tensors."""
    scores, _ = _forward(model, _clip_tensors(clips), keep_cache=False)
    return scores


def forward(model: ModelParams, clip) -> np.ndarray:
    return forward_batch(model, [clip])[0]


def softmax(scores) -> np.ndarray:
    z = np.asarray(scores, dtype=np.float64)
    z = np.exp(z - z.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def cross_entropy(scores, label: int) -> float:
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= label < scores.shape[-1]:
        raise InputError(f"label {label} outside [0, {scores.shape[-1]})")
    shifted = scores - scores.max()
    return float(np.log(np.exp(shifted).sum()) - shifted[label])


def backward_batch(model: ModelParams, clips, labels):
    """Mean cross-entropy over the batch and its gradient for every parameter."""
    batch = _clip_tensors(clips)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != (batch.shape[0],):
        raise DimensionError(f"label axis: {labels.shape[0]} labels for {batch.shape[0]} clips")
    scores, (caches, out_shape, pooled, owner, weights) = _forward(model, batch, keep_cache=True)
    B, num_classes = scores.shape
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InputError(f"labels must lie in [0, {num_classes})")
    loss = float(np.mean([cross_entropy(s, y) for s, y in zip(scores, labels)]))

    d_scores = softmax(scores)
    d_scores[np.arange(B), labels] -= 1.0
    d_scores = (d_scores / B).astype(scores.dtype)
    grads = {}
    d_person = d_scores[owner] * weights[:, None]
    grads["classifier.bias"] = d_scores.sum(axis=0)
    grads["classifier.weight"] = pooled.T @ d_person
    d_pooled = d_person @ model.classifier_weight.T
    T, N, V, C = out_shape
    dx = np.broadcast_to(d_pooled[None, :, None, :] / (T * V), out_shape)

    for b in reversed(range(len(model.blocks))):
        block = model.blocks[b]
        x, xa, a_eff, h1_pos, a1p, h2_pos = caches[b]
        prefix = f"blocks.{b}"
        dh2 = dx * h2_pos
        d_res = None
        if model.config.residual:
            if block.residual_weight is not None:
                grads[f"{prefix}.residual_weight"] = x.reshape(-1, x.shape[-1]).T @ dh2.reshape(-1, dh2.shape[-1])
                grads[f"{prefix}.residual_bias"] = dh2.sum(axis=(0, 1, 2))
                d_res = dh2 @ block.residual_weight.T
            else:
                d_res = dh2
        da1, d_tw, d_tb = _tconv_backward(dh2, a1p, block.temporal_weight)
        dh1 = da1 * h1_pos
        dx, d_gw, d_gb, d_a_eff = _gconv_backward(dh1, x, xa, a_eff, block.graph_weight)
        if d_res is not None:
            dx = dx + d_res
        grads[f"{prefix}.graph_weight"] = d_gw
        grads[f"{prefix}.graph_bias"] = d_gb
        grads[f"{prefix}.temporal_weight"] = d_tw
        grads[f"{prefix}.temporal_bias"] = d_tb
        if block.m_mask is not None:
            grads[f"{prefix}.m_mask"] = (d_a_eff * model.adjacency).sum(axis=0)

    ordered = {path: grads[path] for path, _ in model.named_parameters()}
    return loss, ordered


def backward(model: ModelParams, clip, label: int):
    return backward_batch(model, [clip], [label])


# -- gradient verification -------------------------------------------------

@dataclass(frozen=True)
class GradientCheck:
    """Worst analytic-vs-numeric disagreement of a finite-difference sweep.

    ``refined`` counts entries whose ``+-h`` stencil crossed a ReLU kink and
    were re-estimated with a step ``refine`` times smaller.  ``one_sided``
    counts entries sitting on a kink even at the refined step; they are
    compared with the one-sided difference on the side that keeps the base
    gate pattern.  ``skipped`` entries crossed a kink on both sides.
    """

    max_rel_error: float
    path: str | None
    index: tuple | None
    analytic: float = 0.0
    numeric: float = 0.0
    checked: int = 0
    refined: int = 0
    one_sided: int = 0
    skipped: int = 0

    def __float__(self) -> float:
        return self.max_rel_error


def relative_error(analytic, numeric, floor: float = 1e-10) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; exactly zero when both vanish."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def _loss_and_gates(model, batch, label):
    scores, (caches, *_rest) = _forward(model, batch, keep_cache=True)
    gates = [np.packbits(g) for c in caches for g in (c[3], c[5])]
    return cross_entropy(scores[0], label), gates


def finite_difference_check(model: ModelParams, clip, label: int, h: float = 1e-3,
                            grads: dict | None = None, refine: float = 1e3) -> GradientCheck:
    """Compare analytic gradients (or the supplied ``grads``) with central differences.

    Loss is differentiable only between ReLU kinks, so a stencil whose
    perturbed forward passes switch any ReLU gate relative to the base point
    is re-evaluated at step ``h / refine``.
    """
    batch = _clip_tensors([clip])
    if grads is None:
        _, grads = backward(model, clip, label)
    f0, base_gates = _loss_and_gates(model, batch, label)

    def same(gates):
        return all(np.array_equal(a, b) for a, b in zip(gates, base_gates))

    def probe(path, param, idx, step):
        moved = param.copy()
        moved[idx] += step
        f, gates = _loss_and_gates(model.with_parameters({path: moved}), batch, label)
        return f, same(gates)

    worst = (0.0, None, None, 0.0, 0.0)
    checked = refined = one_sided = skipped = 0
    for path, param in model.named_parameters():
        for idx in np.ndindex(param.shape):
            step = h
            f_plus, ok_plus = probe(path, param, idx, step)
            f_minus, ok_minus = probe(path, param, idx, -step)
            if not (ok_plus and ok_minus):
                refined += 1
                step = h / refine
                f_plus, ok_plus = probe(path, param, idx, step)
                f_minus, ok_minus = probe(path, param, idx, -step)
            if ok_plus and ok_minus:
                numeric = (f_plus - f_minus) / (2 * step)
            elif ok_plus or ok_minus:
                one_sided += 1
                numeric = (f_plus - f0) / step if ok_plus else (f0 - f_minus) / step
            else:
                skipped += 1
                continue
            checked += 1
            analytic = float(grads[path][idx])
            err = float(relative_error(analytic, numeric))
            if err > worst[0]:
                worst = (err, path, tuple(int(i) for i in idx), analytic, float(numeric))
    return GradientCheck(*worst, checked=checked, refined=refined, one_sided=one_sided, skipped=skipped)


# -- STGM checkpoints --------------------------------------------------------

def save_checkpoint(model: ModelParams, path) -> None:
    blob = json.dumps(model.config.to_json(), sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(STGM_MAGIC)
        fh.write(struct.pack("<II", STGM_VERSION, len(blob)))
        fh.write(blob)
        for _, value in model.named_parameters():
            fh.write(struct.pack("<I", value.ndim))
            fh.write(struct.pack(f"<{value.ndim}I", *value.shape))
            fh.write(np.ascontiguousarray(value, dtype="<f8").tobytes())


def load_checkpoint(path) -> ModelParams:
    data = Path(path).read_bytes()
    if data[:4] != STGM_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    try:
        version, n = struct.unpack_from("<II", data, 4)
        if version != STGM_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        offset = 12 + n
        config = ModelConfig.from_json(json.loads(data[12:offset]))
        model = init_model(config)
        values = {}
        for name, old in model.named_parameters():
            (rank,) = struct.unpack_from("<I", data, offset)
            shape = struct.unpack_from(f"<{rank}I", data, offset + 4)
            offset += 4 + 4 * rank
            size = int(np.prod(shape)) * 8
            if offset + size > len(data):
                raise FormatError(f"{path}: truncated tensor {name}")
            values[name] = np.frombuffer(data, dtype="<f8", count=size // 8, offset=offset).reshape(shape).copy()
            offset += size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint") from exc
    except (json.JSONDecodeError, KeyError) as exc:
        raise FormatError(f"{path}: invalid config blob ({exc!r})") from exc
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return model.with_parameters(values)
