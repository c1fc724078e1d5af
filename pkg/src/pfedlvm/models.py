"""Model roles: per-vehicle feature compressor, frozen server backbone with
hidden-layer selection, per-vehicle segmentation head, and the plain
baseline network used by the parameter-exchanging FL baselines.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor_nn import (
    DTYPE,
    ConfigurationError,
    ForwardCache,
    LayerKind,
    LayerSpec,
    ModelParams,
    backward,
    conv3x3_forward,
    forward,
    init_model,
)


class LayerSelection(enum.Enum):
    LAST = "Last"
    MIDDLE1 = "Middle1"
    ALL_AVG = "AllAvg"
    MIDDLE4_AVG = "Middle4Avg"
    MIDDLE4_CONCAT = "Middle4Concat"
    ALL_CONCAT = "AllConcat"

    @classmethod
    def parse(cls, name: str) -> "LayerSelection":
        for sel in cls:
            if sel.value.lower() == name.strip().lower() or sel.name.lower() == name.strip().lower():
                return sel
        raise ValueError(f"unknown layer selection {name!r}; choose from {[s.value for s in cls]}")

    @property
    def is_concat(self) -> bool:
        return self in (LayerSelection.MIDDLE4_CONCAT, LayerSelection.ALL_CONCAT)

    def layer_indices(self, depth: int) -> list[int]:
        """0-based backbone block indices feeding this selection."""
        if self in (LayerSelection.MIDDLE4_AVG, LayerSelection.MIDDLE4_CONCAT):
            if depth < 4:
                raise ConfigurationError(f"{self.value} needs a backbone depth >= 4, got {depth}")
            start = depth // 2 - 2
            return list(range(start, start + 4))
        if self == LayerSelection.LAST:
            return [depth - 1]
        if self == LayerSelection.MIDDLE1:
            return [depth // 2]
        return list(range(depth))

    def channel_multiplier(self, depth: int) -> int:
        return len(self.layer_indices(depth)) if self.is_concat else 1


def space_to_depth(x: np.ndarray, factor: int = 2) -> np.ndarray:
    b, c, h, w = x.shape
    x = x.reshape(b, c, h // factor, factor, w // factor, factor)
    return x.transpose(0, 1, 3, 5, 2, 4).reshape(b, c * factor * factor, h // factor, w // factor)


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return x
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(grad: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return grad
    b, c, h, w = grad.shape
    return grad.reshape(b, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


# ------------------------------------------------------------------ compressor

@dataclass
class CompressorModel:
    """2x2 space-to-depth followed by Conv3x3 -> ReLU -> Conv3x3.

    Maps [B,3,H,W] images to [B,F_ch,H/2,W/2] features.
    """

    params: ModelParams

    @classmethod
    def create(cls, rng: np.random.Generator, in_channels: int = 3, hidden: int = 16,
               feature_channels: int = 8) -> "CompressorModel":
        layers = [LayerSpec.conv3x3(4 * in_channels, hidden), LayerSpec.relu(),
                  LayerSpec.conv3x3(hidden, feature_channels)]
        return cls(init_model(layers, rng))

    @property
    def feature_channels(self) -> int:
        return self.params.layers[-1].fan_out

    def parameters(self) -> list[np.ndarray]:
        return self.params.parameters()


def compress(c: CompressorModel, batch: np.ndarray) -> tuple[np.ndarray, ForwardCache | None]:
    batch = np.asarray(batch, dtype=DTYPE)
    if batch.ndim != 4:
        raise ConfigurationError(f"compress expects [B,3,H,W], got {batch.shape}")
    if batch.shape[2] % 2 or batch.shape[3] % 2:
        raise ConfigurationError(f"compress needs even spatial dims, got {batch.shape[2:]}")
    return forward(c.params, space_to_depth(batch))


def compressor_backward(c: CompressorModel, cache: ForwardCache, grad_out: np.ndarray
                        ) -> list[np.ndarray]:
    _, grads = backward(c.params, cache, grad_out)
    return grads


# -------------------------------------------------------------------- backbone

@dataclass
class BackboneModel:
    """Frozen stack of shape-preserving Conv3x3+ReLU blocks."""

    params: ModelParams

    @classmethod
    def create(cls, seed: int, channels: int = 8, depth: int = 8,
               perturbation: float = 0.0) -> "BackboneModel":
        """Seeded stand-in for a pretrained extractor.

        Each kernel is an identity tap at the centre plus seeded uniform noise
        of bound ``perturbation / sqrt(9 * channels)``; biases are zero.  With
        the default ``perturbation=0`` every block maps non-negative features
        to themselves, so the compressor's regression target has a large set
        of fixed points and training does not collapse the features.  Any
        noise gives the target only a few fixed points, and the compressor
        then drifts toward them for the whole run.
        """
        if depth < 1:
            raise ConfigurationError("backbone depth must be >= 1")
        layers = []
        for _ in range(depth):
            layers += [LayerSpec.conv3x3(channels, channels), LayerSpec.relu()]
        rng = np.random.default_rng([seed, 0xB0])
        params = init_model(layers, rng, gain=perturbation)
        eye = np.eye(channels)
        for w, b in zip(params.weights[::2], params.biases[::2]):
            w[:, :, 1, 1] += eye
            b[:] = 0.0
        return cls(params.copy(trainable=False))

    @property
    def depth(self) -> int:
        return len(self.params.layers) // 2

    @property
    def channels(self) -> int:
        return self.params.layers[0].fan_in

    def hidden_outputs(self, x: np.ndarray) -> list[np.ndarray]:
        """Output of each Conv3x3 -> ReLU block, first to last."""
        x = np.asarray(x, dtype=DTYPE)
        outs = []
        for w, b in zip(self.params.weights[::2], self.params.biases[::2]):
            x = np.maximum(conv3x3_forward(x, w, b), 0.0)
            outs.append(x)
        return outs

    def fingerprint(self) -> bytes:
        return b"".join(p.tobytes() for p in self.params.parameters())


def extract_shared(b: BackboneModel, sel: LayerSelection, concat_batch: np.ndarray) -> np.ndarray:
    concat_batch = np.asarray(concat_batch, dtype=DTYPE)
    if concat_batch.ndim != 4 or concat_batch.shape[1] != b.channels:
        raise ConfigurationError(
            f"backbone expects [N,{b.channels},h,w] input, got {concat_batch.shape}")
    idx = sel.layer_indices(b.depth)
    hidden = b.hidden_outputs(concat_batch)
    picked = [hidden[i] for i in idx]
    if sel.is_concat:
        return np.concatenate(picked, axis=1)
    if len(picked) == 1:
        return picked[0]
    return np.mean(np.stack(picked), axis=0)


def compressor_target(shared: np.ndarray, sel: LayerSelection, feature_channels: int
                      ) -> np.ndarray:
    """Bring shared features back to the compressor's output shape.

    Concat selections are averaged over their ``feature_channels``-wide channel
    blocks; every other selection already has the compressor shape and is
    returned as is.
    """
    if not sel.is_concat:
        return shared
    b, ch, h, w = shared.shape
    if ch % feature_channels:
        raise ConfigurationError(
            f"{ch} shared channels are not a multiple of {feature_channels} compressor channels")
    return shared.reshape(b, ch // feature_channels, feature_channels, h, w).mean(axis=1)


# ------------------------------------------------------------------------ head

@dataclass
class SegHeadModel:
    """Two parallel conv branches (one and two Conv3x3 deep) summed, ReLU,
    per-pixel Dense to class logits, nearest upsampling to image size."""

    branch_a: ModelParams
    branch_b: ModelParams
    mixer: ModelParams
    selection: LayerSelection
    upsample: int = 2

    @classmethod
    def create(cls, rng: np.random.Generator, in_channels: int, num_classes: int,
               selection: LayerSelection, hidden: int = 16, upsample: int = 2) -> "SegHeadModel":
        a = init_model([LayerSpec.conv3x3(in_channels, hidden)], rng)
        b = init_model([LayerSpec.conv3x3(in_channels, hidden), LayerSpec.relu(),
                        LayerSpec.conv3x3(hidden, hidden)], rng)
        m = init_model([LayerSpec.relu(), LayerSpec.dense(hidden, num_classes)], rng)
        return cls(a, b, m, selection, upsample)

    @property
    def in_channels(self) -> int:
        return self.branch_a.layers[0].fan_in

    @property
    def num_classes(self) -> int:
        return self.mixer.layers[-1].fan_out

    def parameters(self) -> list[np.ndarray]:
        return self.branch_a.parameters() + self.branch_b.parameters() + self.mixer.parameters()


@dataclass
class HeadCache:
    a: ForwardCache
    b: ForwardCache
    m: ForwardCache


def head_predict(h: SegHeadModel, shared: np.ndarray) -> tuple[np.ndarray, HeadCache | None]:
    shared = np.asarray(shared, dtype=DTYPE)
    if shared.ndim != 4 or shared.shape[1] != h.in_channels:
        got = shared.shape[1] if shared.ndim == 4 else shared.shape
        raise ConfigurationError(
            f"head configured for {h.in_channels} input channels (selection {h.selection.value}) "
            f"but received {got}")
    ya, ca = forward(h.branch_a, shared)
    yb, cb = forward(h.branch_b, shared)
    logits, cm = forward(h.mixer, ya + yb)
    cache = HeadCache(ca, cb, cm) if ca is not None else None
    return upsample_nearest(logits, h.upsample), cache


def head_backward(h: SegHeadModel, cache: HeadCache, grad_logits: np.ndarray) -> list[np.ndarray]:
    g = upsample_nearest_backward(grad_logits, h.upsample)
    g_sum, gm = backward(h.mixer, cache.m, g)
    _, ga = backward(h.branch_a, cache.a, g_sum)
    _, gb = backward(h.branch_b, cache.b, g_sum)
    return ga + gb + gm


# -------------------------------------------------------------------- baseline

@dataclass
class BaselineNet:
    """Full-resolution Conv3x3 stack mapping [B,3,H,W] images to [B,C,H,W] logits."""

    params: ModelParams

    @classmethod
    def create(cls, rng: np.random.Generator, num_classes: int, in_channels: int = 3,
               hidden: int = 24) -> "BaselineNet":
        layers = [LayerSpec.conv3x3(in_channels, hidden), LayerSpec.relu(),
                  LayerSpec.conv3x3(hidden, hidden), LayerSpec.relu(),
                  LayerSpec.conv3x3(hidden, hidden), LayerSpec.relu(),
                  LayerSpec.dense(hidden, num_classes)]
        return cls(init_model(layers, rng))

    def parameters(self) -> list[np.ndarray]:
        return self.params.parameters()

    def copy(self) -> "BaselineNet":
        return BaselineNet(self.params.copy())


# ------------------------------------------------------------------ checkpoints

CHECKPOINT_MAGIC = b"PFCK"
CHECKPOINT_VERSION = 1


def save_checkpoint(model: ModelParams, path: str | Path) -> None:
    """Header (magic, version, trainable, layer specs) + flat float64 LE parameters."""
    head = [CHECKPOINT_MAGIC, struct.pack("<BBI", CHECKPOINT_VERSION, int(model.trainable),
                                          len(model.layers))]
    for spec in model.layers:
        head.append(struct.pack("<BII", int(spec.kind), spec.fan_in, spec.fan_out))
    body = [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in model.parameters()]
    Path(path).write_bytes(b"".join(head + body))


def load_checkpoint(path: str | Path) -> ModelParams:
    raw = Path(path).read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise ConfigurationError(f"{path}: not a checkpoint file")
    version, trainable, n = struct.unpack_from("<BBI", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise ConfigurationError(f"{path}: unsupported checkpoint version {version}")
    off = 10
    layers = []
    for _ in range(n):
        kind, fi, fo = struct.unpack_from("<BII", raw, off)
        off += 9
        layers.append(LayerSpec(LayerKind(kind), fi, fo))
    weights, biases = [], []
    for spec in layers:
        if not spec.has_params:
            weights.append(None)
            biases.append(None)
            continue
        shape = spec.weight_shape()
        size = int(np.prod(shape))
        weights.append(np.frombuffer(raw, "<f8", size, off).astype(DTYPE).reshape(shape))
        off += 8 * size
        biases.append(np.frombuffer(raw, "<f8", spec.fan_out, off).astype(DTYPE))
        off += 8 * spec.fan_out
    if off != len(raw):
        raise ConfigurationError(f"{path}: {len(raw) - off} trailing bytes")
    return ModelParams(layers, weights, biases, bool(trainable))
