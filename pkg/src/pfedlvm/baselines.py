"""Parameter-exchanging baselines: FedAvg and FedProx over ``BaselineNet``.

One local iteration is ``steps_per_iteration`` Adam steps on consecutive
mini-batches (wrapping around small datasets).  After every ``sigma`` local
iterations each vehicle uploads its full parameter vector, the server forms
the data-size-weighted mean and sends it back.  FedProx adds
``mu * (w - w_global)`` to every parameter gradient; ``mu == 0`` is FedAvg.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datagen import LabeledImage, stack
from .models import BaselineNet
from .protocol import Channel, NumericalError, _map
from .tensor_nn import (
    AdamState,
    ConfigurationError,
    adam_step,
    backward,
    cross_entropy_loss,
    forward,
)
from .wire import Message, MessageKind


@dataclass
class FLConfig:
    sigma: int = 2
    mu: float = 0.0
    n_iterations: int = 30           # N_b, counted in local iterations
    steps_per_iteration: int = 1
    batch_size: int = 8
    num_classes: int = 4
    hidden: int = 24
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    seed: int = 0
    workers: int = 1
    weights: Sequence[float] | None = None   # default |D_v| / |D|

    def __post_init__(self):
        if self.sigma < 1:
            raise ConfigurationError("sigma must be >= 1")
        if self.mu < 0:
            raise ConfigurationError("mu must be >= 0")
        if self.n_iterations < 1 or self.steps_per_iteration < 1 or self.batch_size < 1:
            raise ConfigurationError("n_iterations, steps_per_iteration and batch_size must be >= 1")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=float)
            if (w < 0).any() or not np.isclose(w.sum(), 1.0):
                raise ConfigurationError("aggregation weights must be non-negative and sum to 1")

    def adam_hyper(self) -> dict:
        return {"learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "weight_decay": self.weight_decay}


@dataclass
class LocalData:
    images: np.ndarray
    masks: np.ndarray
    cursor: int = 0

    @classmethod
    def from_images(cls, data: Sequence[LabeledImage]) -> "LocalData":
        images, masks = stack(data)
        return cls(images, masks)

    def next_batch(self, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
        n = len(self.images)
        idx = (self.cursor + np.arange(batch_size)) % n
        self.cursor = (self.cursor + batch_size) % n
        return self.images[idx], self.masks[idx]


def local_update(model: BaselineNet, data: LocalData, sigma: int, mu: float,
                 global_snapshot: Sequence[np.ndarray] | None, opt: AdamState,
                 batch_size: int = 8) -> tuple[BaselineNet, list[float]]:
    """Run ``sigma`` Adam steps of cross entropy (plus the proximal term if mu > 0)."""
    if sigma < 1:
        raise ConfigurationError("sigma must be >= 1")
    losses = []
    for _ in range(sigma):
        images, labels = data.next_batch(batch_size)
        logits, cache = forward(model.params, images)
        loss, grad = cross_entropy_loss(logits, labels)
        if not np.isfinite(loss):
            raise NumericalError(opt.step_count, "non-finite local loss")
        _, grads = backward(model.params, cache, grad)
        if mu > 0:
            grads = [g + mu * (w - w0)
                     for g, w, w0 in zip(grads, model.parameters(), global_snapshot)]
        adam_step(model.params, grads, opt)
        losses.append(loss)
    return model, losses


def aggregate(models: Sequence[BaselineNet], weights: Sequence[float]) -> BaselineNet:
    """Elementwise weighted mean of parameters.

    Written as ``p_0 + sum_i w_i (p_i - p_0)`` so identical inputs come back
    bit-for-bit unchanged.
    """
    if not models:
        raise ConfigurationError("aggregate needs at least one model")
    if len(models) != len(weights):
        raise ConfigurationError("one weight per model is required")
    w = np.asarray(weights, dtype=float)
    if (w < 0).any() or not np.isclose(w.sum(), 1.0):
        raise ConfigurationError("aggregation weights must be non-negative and sum to 1")
    ref = models[0]
    for i, m in enumerate(models[1:], 1):
        if m.params.layers != ref.params.layers:
            raise ConfigurationError(f"model {i} differs structurally from model 0")
    out = ref.copy()
    for k, base in enumerate(out.parameters()):
        delta = np.zeros_like(base)
        for wi, m in zip(w, models):
            delta += wi * (m.parameters()[k] - ref.parameters()[k])
        base += delta
    return out


def flatten(model: BaselineNet) -> np.ndarray:
    return np.concatenate([p.ravel() for p in model.parameters()])


def unflatten_into(model: BaselineNet, flat: np.ndarray) -> None:
    off = 0
    for p in model.parameters():
        p[...] = flat[off:off + p.size].reshape(p.shape)
        off += p.size
    if off != flat.size:
        raise ConfigurationError(f"parameter vector has {flat.size} entries, model needs {off}")


def model_bytes(model: BaselineNet) -> int:
    return 8 * model.params.num_parameters()


@dataclass
class AggregationTrace:
    round_index: int
    local_loss: list[float]
    uploaded_bytes: int
    downloaded_bytes: int
    upload_messages: int
    download_messages: int


@dataclass
class FLClient:
    vehicle_id: int
    model: BaselineNet
    opt: AdamState
    data: LocalData


class FederatedRun:
    """FedAvg/FedProx over a set of vehicle datasets."""

    def __init__(self, config: FLConfig, datasets: Sequence[Sequence[LabeledImage]]):
        if not datasets:
            raise ConfigurationError("at least one vehicle dataset is required")
        self.config = config
        sizes = np.array([len(d) for d in datasets], dtype=float)
        self.weights = (np.asarray(config.weights, dtype=float) if config.weights is not None
                        else sizes / sizes.sum())
        if len(self.weights) != len(datasets):
            raise ConfigurationError("one aggregation weight per vehicle is required")
        # every vehicle starts from the same seeded global model; no bytes are exchanged for it
        self.global_model = BaselineNet.create(np.random.default_rng([config.seed, 0xFA]),
                                               config.num_classes, hidden=config.hidden)
        self.clients = [
            FLClient(vid, self.global_model.copy(),
                     AdamState.for_params(self.global_model.params, **config.adam_hyper()),
                     LocalData.from_images(d))
            for vid, d in enumerate(datasets)]
        self.channel = Channel()
        self.traces: list[AggregationTrace] = []
        self.iteration = 0

    @property
    def model_bytes(self) -> int:
        return model_bytes(self.global_model)

    def _local(self, client: FLClient, snapshot) -> list[float]:
        cfg = self.config
        _, losses = local_update(client.model, client.data, cfg.steps_per_iteration, cfg.mu,
                                 snapshot, client.opt, cfg.batch_size)
        return losses

    def _exchange(self, r: int) -> AggregationTrace:
        up = 0
        for c in self.clients:
            up += self.channel.send(Message(MessageKind.PARAMETER_UP, r, c.vehicle_id,
                                            flatten(c.model), provenance="parameter"))
        received = []
        for c in self.clients:
            msg = self.channel.receive(MessageKind.PARAMETER_UP, r, c.vehicle_id)
            m = self.global_model.copy()
            unflatten_into(m, msg.payload)
            received.append(m)
        self.global_model = aggregate(received, self.weights)
        down = 0
        flat = flatten(self.global_model)
        for c in self.clients:
            down += self.channel.send(Message(MessageKind.PARAMETER_DOWN, r, c.vehicle_id, flat,
                                              provenance="parameter"))
        for c in self.clients:
            msg = self.channel.receive(MessageKind.PARAMETER_DOWN, r, c.vehicle_id)
            unflatten_into(c.model, msg.payload)
        return up, down

    def run(self, callback: Callable[["FederatedRun", AggregationTrace], None] | None = None
            ) -> list[AggregationTrace]:
        cfg = self.config
        pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
        try:
            losses = [[] for _ in self.clients]
            while self.iteration < cfg.n_iterations:
                snapshot = [p.copy() for p in self.global_model.parameters()] if cfg.mu > 0 else None
                step_losses = _map(pool, lambda c: self._local(c, snapshot), self.clients)
                for acc, l in zip(losses, step_losses):
                    acc.extend(l)
                self.iteration += 1
                if self.iteration % cfg.sigma == 0:
                    r = len(self.traces)
                    up, down = self._exchange(r)
                    n = len(self.clients)
                    trace = AggregationTrace(r, [float(np.mean(l)) for l in losses], up, down, n, n)
                    self.traces.append(trace)
                    losses = [[] for _ in self.clients]
                    if callback is not None:
                        callback(self, trace)
        finally:
            if pool is not None:
                pool.shutdown()
        return self.traces

    def predict(self, images: np.ndarray) -> np.ndarray:
        logits, _ = forward(self.global_model.params, images)
        return logits.argmax(axis=1)


def centralized_training(model: BaselineNet, data: LocalData, steps: int, opt: AdamState,
                         batch_size: int = 8) -> list[float]:
    """Plain single-site training, the reference for the one-vehicle FedAvg check."""
    _, losses = local_update(model, data, steps, 0.0, None, opt, batch_size)
    return losses
