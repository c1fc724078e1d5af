"""Dense float64 numeric core: Dense / Conv3x3 / ReLU layers with analytic
backward passes, the two training losses and a coupled-weight-decay Adam.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
Image-like tensors use NCHW layout.  ``Dense`` acts on axis 1, so on a 4-d
input it is a per-pixel channel mix (a 1x1 convolution).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64
# He-uniform scale: keeps activation magnitude roughly constant through ReLU layers
HE_GAIN = float(np.sqrt(6.0))
ITEM_BYTES = 8


class ConfigurationError(ValueError):
    """Raised when shapes or model configuration do not line up."""


class ContractViolation(RuntimeError):
    """Raised when an operation would break a model contract (e.g. frozen weights)."""


class LayerKind(enum.IntEnum):
    DENSE = 1
    CONV3X3 = 2
    RELU = 3


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    fan_in: int = 0
    fan_out: int = 0

    @classmethod
    def dense(cls, fan_in: int, fan_out: int) -> "LayerSpec":
        return cls(LayerKind.DENSE, fan_in, fan_out)

    @classmethod
    def conv3x3(cls, in_channels: int, out_channels: int) -> "LayerSpec":
        return cls(LayerKind.CONV3X3, in_channels, out_channels)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls(LayerKind.RELU)

    @property
    def has_params(self) -> bool:
        return self.kind != LayerKind.RELU

    def weight_shape(self) -> tuple[int, ...]:
        if self.kind == LayerKind.DENSE:
            return (self.fan_out, self.fan_in)
        if self.kind == LayerKind.CONV3X3:
            return (self.fan_out, self.fan_in, 3, 3)
        return ()


@dataclass
class ModelParams:
    """An ordered chain of layers with their weights.

    ``weights[i]`` and ``biases[i]`` are ``None`` for ReLU layers.
    """

    layers: list[LayerSpec]
    weights: list[np.ndarray | None]
    biases: list[np.ndarray | None]
    trainable: bool = True

    def __post_init__(self):
        if not (len(self.layers) == len(self.weights) == len(self.biases)):
            raise ConfigurationError("layers, weights and biases must have equal length")
        for i, (spec, w, b) in enumerate(zip(self.layers, self.weights, self.biases)):
            if not spec.has_params:
                if w is not None or b is not None:
                    raise ConfigurationError(f"layer {i}: ReLU carries no parameters")
                continue
            if w is None or w.shape != spec.weight_shape():
                got = None if w is None else w.shape
                raise ConfigurationError(
                    f"layer {i}: weight shape {got} != expected {spec.weight_shape()}")
            if b is None or b.shape != (spec.fan_out,):
                raise ConfigurationError(f"layer {i}: bias shape must be ({spec.fan_out},)")
        if not self.trainable:
            for arr in self.parameters():
                arr.flags.writeable = False

    def parameters(self) -> list[np.ndarray]:
        """Weight and bias arrays in layer order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            if w is not None:
                out.append(w)
                out.append(b)
        return out

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def copy(self, trainable: bool | None = None) -> "ModelParams":
        return ModelParams(
            list(self.layers),
            [None if w is None else w.copy() for w in self.weights],
            [None if b is None else b.copy() for b in self.biases],
            self.trainable if trainable is None else trainable,
        )


def init_model(layers: list[LayerSpec], rng: np.random.Generator,
               trainable: bool = True, gain: float = HE_GAIN) -> ModelParams:
    """Uniform init in [-gain/sqrt(fan_in), +gain/sqrt(fan_in)] for weights and biases."""
    weights, biases = [], []
    for spec in layers:
        if not spec.has_params:
            weights.append(None)
            biases.append(None)
            continue
        fan_in = spec.fan_in * (9 if spec.kind == LayerKind.CONV3X3 else 1)
        bound = gain * np.sqrt(1.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=spec.weight_shape()).astype(DTYPE))
        biases.append(rng.uniform(-bound, bound, size=(spec.fan_out,)).astype(DTYPE))
    return ModelParams(list(layers), weights, biases, trainable)


# ---------------------------------------------------------------- layer kernels

def _im2col(x: np.ndarray) -> np.ndarray:
    # [B,C,H,W] -> [B*H*W, C*9] patches of the zero-padded input, columns ordered (c, i, j)
    b, c, h, w = x.shape
    xp = np.zeros((b, h + 2, w + 2, c), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x.transpose(0, 2, 3, 1)
    cols = np.empty((b, h, w, c, 3, 3), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[..., i, j] = xp[:, i:i + h, j:j + w, :]
    return cols.reshape(b * h * w, c * 9)


def conv3x3_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, _, h, wd = x.shape
    out = _im2col(x) @ w.reshape(w.shape[0], -1).T + b
    return np.ascontiguousarray(out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2))


def conv3x3_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    n, _, h, wd = x.shape
    g2 = grad_out.transpose(0, 2, 3, 1).reshape(n * h * wd, -1)
    dw = (g2.T @ _im2col(x)).reshape(w.shape)
    db = g2.sum(axis=0)
    # input gradient: same-padded correlation of grad_out with the flipped kernel, in/out swapped
    w_flip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx = _im2col(grad_out) @ w_flip.reshape(w_flip.shape[0], -1).T
    dx = np.ascontiguousarray(dx.reshape(n, h, wd, -1).transpose(0, 3, 1, 2))
    return dx, dw, db


def _channels_last(x: np.ndarray) -> np.ndarray:
    # [B,C,...] -> [B*prod(...), C]
    return np.moveaxis(x, 1, -1).reshape(-1, x.shape[1])


def _channels_first(y: np.ndarray, like: np.ndarray) -> np.ndarray:
    shape = (like.shape[0],) + like.shape[2:] + (y.shape[-1],)
    return np.ascontiguousarray(np.moveaxis(y.reshape(shape), -1, 1))


def dense_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    if x.ndim == 2:
        return x @ w.T + b
    return _channels_first(_channels_last(x) @ w.T + b, x)


def dense_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    if x.ndim == 2:
        return grad_out @ w, grad_out.T @ x, grad_out.sum(axis=0)
    g2 = _channels_last(grad_out)
    x2 = _channels_last(x)
    return _channels_first(g2 @ w, x), g2.T @ x2, g2.sum(axis=0)


# ------------------------------------------------------------- chain forward/backward

@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)


def _check_input(model: ModelParams, x: np.ndarray, i: int, spec: LayerSpec) -> None:
    if spec.kind == LayerKind.CONV3X3 and x.ndim != 4:
        raise ConfigurationError(f"layer {i}: Conv3x3 expects a 4-d NCHW input, got shape {x.shape}")
    if spec.has_params and (x.ndim < 2 or x.shape[1] != spec.fan_in):
        raise ConfigurationError(
            f"layer {i}: expected {spec.fan_in} input features/channels, got shape {x.shape}")


def forward(model: ModelParams, x: np.ndarray) -> tuple[np.ndarray, ForwardCache | None]:
    """Apply the layer chain.  Activations are retained only for trainable models."""
    x = np.asarray(x, dtype=DTYPE)
    cache = ForwardCache() if model.trainable else None
    for i, (spec, w, b) in enumerate(zip(model.layers, model.weights, model.biases)):
        _check_input(model, x, i, spec)
        if cache is not None:
            cache.inputs.append(x)
        if spec.kind == LayerKind.DENSE:
            x = dense_forward(x, w, b)
        elif spec.kind == LayerKind.CONV3X3:
            x = conv3x3_forward(x, w, b)
        else:
            x = np.maximum(x, 0.0)
    return x, cache


def layer_outputs(model: ModelParams, x: np.ndarray) -> list[np.ndarray]:
    """Output of every layer in the chain, without gradient bookkeeping."""
    x = np.asarray(x, dtype=DTYPE)
    outs = []
    for i, (spec, w, b) in enumerate(zip(model.layers, model.weights, model.biases)):
        _check_input(model, x, i, spec)
        if spec.kind == LayerKind.DENSE:
            x = dense_forward(x, w, b)
        elif spec.kind == LayerKind.CONV3X3:
            x = conv3x3_forward(x, w, b)
        else:
            x = np.maximum(x, 0.0)
        outs.append(x)
    return outs


def backward(model: ModelParams, cache: ForwardCache, grad_out: np.ndarray
             ) -> tuple[np.ndarray, list[np.ndarray]]:
    """Backpropagate ``grad_out`` through the chain.

    Returns the gradient w.r.t. the chain input and the parameter gradients in
    the same order as ``model.parameters()``.
    """
    if cache is None:
        raise ContractViolation("no activations retained: model is not trainable")
    grads: list[np.ndarray] = []
    g = grad_out
    for i in reversed(range(len(model.layers))):
        spec, x = model.layers[i], cache.inputs[i]
        if spec.kind == LayerKind.RELU:
            g = g * (x > 0)
            continue
        if spec.kind == LayerKind.DENSE:
            g, dw, db = dense_backward(x, model.weights[i], g)
        else:
            g, dw, db = conv3x3_backward(x, model.weights[i], g)
        grads.append(db)
        grads.append(dw)
    grads.reverse()
    return g, grads


# ---------------------------------------------------------------------- losses

def mse_loss(pred: np.ndarray, target: np.ndarray) -> tuple[float, np.ndarray]:
    if pred.shape != target.shape:
        raise ConfigurationError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def cross_entropy_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean per-pixel softmax cross entropy for [B,C,H,W] logits and [B,H,W] labels."""
    if logits.ndim != 4:
        raise ConfigurationError(f"cross_entropy_loss: logits must be [B,C,H,W], got {logits.shape}")
    b, c, h, w = logits.shape
    if labels.shape != (b, h, w):
        raise ConfigurationError(
            f"cross_entropy_loss: labels shape {labels.shape} does not match logits {logits.shape}")
    lab = np.asarray(labels)
    bad = (lab < 0) | (lab >= c) | (lab != np.floor(lab))
    if bad.any():
        n, y, x = (int(v) for v in np.argwhere(bad)[0])
        raise ValueError(f"label {lab[n, y, x]!r} out of range [0, {c}) at pixel (b={n}, y={y}, x={x})")
    lab = lab.astype(np.int64)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    picked = np.take_along_axis(log_p, lab[:, None], axis=1)
    count = b * h * w
    loss = float(-picked.sum() / count)
    grad = np.exp(log_p)
    np.put_along_axis(grad, lab[:, None], np.take_along_axis(grad, lab[:, None], axis=1) - 1.0, axis=1)
    return loss, grad / count


# ------------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params: ModelParams | list[np.ndarray], **hyper) -> "AdamState":
        arrays = params.parameters() if isinstance(params, ModelParams) else params
        return cls([np.zeros_like(p) for p in arrays], [np.zeros_like(p) for p in arrays], **hyper)


def adam_step(params: ModelParams | list[np.ndarray], grads: list[np.ndarray],
              state: AdamState):
    """One bias-corrected Adam update in place, with weight decay added to the gradient."""
    if isinstance(params, ModelParams):
        if not params.trainable:
            raise ContractViolation("adam_step on a non-trainable model")
        arrays = params.parameters()
    else:
        arrays = params
    if len(arrays) != len(grads) or len(arrays) != len(state.first_moment):
        raise ConfigurationError("adam_step: parameters, gradients and moments do not align")
    state.step_count += 1
    t = state.step_count
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(arrays, grads, state.first_moment, state.second_moment):
        if p.shape != g.shape:
            raise ConfigurationError(f"adam_step: gradient shape {g.shape} != parameter {p.shape}")
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


def serialized_byte_size(t: np.ndarray) -> int:
    """Payload bytes of ``t`` on the wire (8 bytes per element, header excluded)."""
    return int(np.asarray(t).size) * ITEM_BYTES
