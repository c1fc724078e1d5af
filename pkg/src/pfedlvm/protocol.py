"""pFedLVM training engine.

Per mini-batch round: every vehicle compresses its batch and uploads the
features; the server waits for all vehicles, concatenates along the batch
axis, runs the frozen backbone and sends each vehicle its slice back; each
vehicle then updates its compressor (MSE to the shared features) and its
segmentation head (cross entropy on its labels).  Only feature tensors ever
cross the channel.
"""

from __future__ import annotations

import heapq
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import wire
from .commcost import TimeParams
from .datagen import LabeledImage, stack
from .models import (
    BackboneModel,
    CompressorModel,
    LayerSelection,
    SegHeadModel,
    compress,
    compressor_backward,
    compressor_target,
    extract_shared,
    head_backward,
    head_predict,
)
from .tensor_nn import (
    AdamState,
    ConfigurationError,
    adam_step,
    cross_entropy_loss,
    mse_loss,
)
from .wire import Message, MessageKind

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    def __init__(self, round_index: int, detail: str):
        super().__init__(f"round {round_index}: {detail}")
        self.round_index = round_index


class BarrierError(RuntimeError):
    pass


@dataclass
class PFedLVMConfig:
    n_iterations: int = 30          # N_b
    batch_size: int = 8             # B_s
    selection: LayerSelection = LayerSelection.MIDDLE4_CONCAT
    num_classes: int = 4
    feature_channels: int = 8
    compressor_hidden: int = 16
    head_hidden: int = 16
    backbone_depth: int = 8
    backbone_perturbation: float = 0.0
    learning_rate: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-4
    seed: int = 0
    backbone_seed: int | None = None
    broadcast_full: bool = False
    workers: int = 1
    time_params: TimeParams | None = None

    def __post_init__(self):
        if self.n_iterations < 1:
            raise ConfigurationError("n_iterations (N_b) must be >= 1")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")
        if self.backbone_perturbation < 0:
            raise ConfigurationError("backbone_perturbation must be >= 0")
        if self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        self.selection.layer_indices(self.backbone_depth)

    def adam_hyper(self) -> dict:
        return {"learning_rate": self.learning_rate, "beta1": self.beta1,
                "beta2": self.beta2, "weight_decay": self.weight_decay}


# ---------------------------------------------------------------------- states

@dataclass
class VehicleState:
    vehicle_id: int
    images: np.ndarray          # [N,3,H,W]
    masks: np.ndarray           # [N,H,W]
    compressor: CompressorModel
    compressor_opt: AdamState
    head: SegHeadModel
    head_opt: AdamState
    selection: LayerSelection   # announced by the server at session setup
    slot: int = 0               # position in the server's concatenation order
    local_batch_cursor: int = 0
    # features produced this round, held until the shared features arrive
    _inflight: tuple | None = field(default=None, repr=False)

    @property
    def size(self) -> int:
        return len(self.images)


@dataclass
class ServerState:
    backbone: BackboneModel
    selection: LayerSelection
    num_vehicles: int
    broadcast_full: bool = False
    pending: dict[int, Message] = field(default_factory=dict)


@dataclass
class RoundTrace:
    round_index: int
    compressor_loss: list[float]
    head_loss: list[float]
    uploaded_bytes: int
    downloaded_bytes: int
    upload_messages: int
    download_messages: int
    peak_vehicle_feature_bytes: int
    peak_server_feature_bytes: int
    sim_time: float | None = None


class Channel:
    """In-process transport: every message is serialized, logged, and queued by
    (round, vehicle) so delivery order never depends on thread scheduling."""

    def __init__(self, keep_log: bool = True):
        self._queues: dict[tuple[MessageKind, int, int], bytes] = {}
        self._provenance: dict[tuple[MessageKind, int, int], str] = {}
        self.keep_log = keep_log
        self.log: list[tuple[Message, bytes]] = []

    def send(self, msg: Message) -> int:
        data = wire.encode(msg)
        key = (msg.kind, msg.round_index, msg.vehicle_id)
        if key in self._queues:
            raise BarrierError(f"duplicate {msg.kind.name} for round {msg.round_index}, "
                               f"vehicle {msg.vehicle_id}")
        self._queues[key] = data
        self._provenance[key] = msg.provenance
        if self.keep_log:
            self.log.append((msg, data))
        return msg.payload_bytes

    def receive(self, kind: MessageKind, round_index: int, vehicle_id: int) -> Message:
        key = (kind, round_index, vehicle_id)
        try:
            data = self._queues.pop(key)
        except KeyError:
            raise BarrierError(f"no {kind.name} queued for round {round_index}, "
                               f"vehicle {vehicle_id}") from None
        return wire.decode(data, self._provenance.pop(key))

    def pending_keys(self) -> list[tuple[MessageKind, int, int]]:
        return sorted(self._queues)


# ----------------------------------------------------------------- operations

def next_batch(v: VehicleState, batch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """``batch_size`` consecutive samples from the cursor, wrapping around the dataset."""
    if v.size == 0:
        raise ConfigurationError(f"vehicle {v.vehicle_id} has an empty dataset")
    idx = (v.local_batch_cursor + np.arange(batch_size)) % v.size
    v.local_batch_cursor = (v.local_batch_cursor + batch_size) % v.size
    return v.images[idx], v.masks[idx]


def _vehicle_upload(v: VehicleState, j: int, batch_size: int, channel: Channel) -> int:
    images, labels = next_batch(v, batch_size)
    feats, cache = compress(v.compressor, images)
    v._inflight = (labels, feats, cache)
    return channel.send(Message(MessageKind.COMPRESSED_FEATURES, j, v.vehicle_id, feats))


def server_step(server: ServerState, channel: Channel, vehicle_ids: Sequence[int], j: int
                ) -> tuple[int, int, int]:
    """Collect round-``j`` uploads, extract shared features, send downloads.

    Returns (downloaded bytes, download messages, peak pending bytes).
    """
    server.pending.clear()
    for vid in vehicle_ids:
        msg = channel.receive(MessageKind.COMPRESSED_FEATURES, j, vid)
        if msg.round_index != j:
            raise BarrierError(f"vehicle {vid} sent round {msg.round_index} during round {j}")
        server.pending[vid] = msg
    if len(server.pending) != server.num_vehicles:
        raise BarrierError(f"round {j}: {len(server.pending)} of {server.num_vehicles} uploads")
    peak = sum(m.payload_bytes for m in server.pending.values())
    order = sorted(server.pending)
    parts = [server.pending[vid].payload for vid in order]
    f_cat = np.concatenate(parts, axis=0)
    f_shd = extract_shared(server.backbone, server.selection, f_cat)
    down_bytes = 0
    start = 0
    for vid, part in zip(order, parts):
        stop = start + part.shape[0]
        payload = f_shd if server.broadcast_full else f_shd[start:stop]
        down_bytes += channel.send(Message(MessageKind.SHARED_FEATURES, j, vid,
                                           np.ascontiguousarray(payload)))
        start = stop
    server.pending.clear()
    return down_bytes, len(order), peak


def _vehicle_update(v: VehicleState, j: int, channel: Channel, num_vehicles: int,
                    broadcast_full: bool) -> tuple[float, float]:
    msg = channel.receive(MessageKind.SHARED_FEATURES, j, v.vehicle_id)
    labels, feats, cache = v._inflight
    v._inflight = None
    shared = msg.payload
    fc = v.compressor.feature_channels
    b = feats.shape[0]
    if broadcast_full:
        full = compressor_target(shared, v.selection, fc)
        target = full.reshape((num_vehicles, b) + full.shape[1:]).mean(axis=0)
        shared = shared[v.slot * b:(v.slot + 1) * b]
    else:
        target = compressor_target(shared, v.selection, fc)
    # the target is a constant: nothing flows back through the server backbone
    loss_c, grad = mse_loss(feats, target)
    adam_step(v.compressor.params, compressor_backward(v.compressor, cache, grad), v.compressor_opt)

    logits, hcache = head_predict(v.head, shared)
    loss_p, grad = cross_entropy_loss(logits, labels)
    head_params = v.head.parameters()
    adam_step(head_params, head_backward(v.head, hcache, grad), v.head_opt)
    return loss_c, loss_p


def _map(pool: ThreadPoolExecutor | None, fn: Callable, items: Sequence):
    if pool is None:
        return [fn(x) for x in items]
    return list(pool.map(fn, items))


def run_round(server: ServerState, vehicles: Sequence[VehicleState], j: int,
              batch_size: int = 8, channel: Channel | None = None,
              pool: ThreadPoolExecutor | None = None,
              time_params: TimeParams | None = None) -> RoundTrace:
    if not vehicles:
        raise ConfigurationError("run_round needs at least one vehicle")
    channel = channel if channel is not None else Channel(keep_log=False)
    vehicles = sorted(vehicles, key=lambda v: v.vehicle_id)
    ids = [v.vehicle_id for v in vehicles]

    up = _map(pool, lambda v: _vehicle_upload(v, j, batch_size, channel), vehicles)
    peak_vehicle = sum(v._inflight[1].nbytes for v in vehicles)
    down_bytes, n_down, peak_server = server_step(server, channel, ids, j)
    losses = _map(pool, lambda v: _vehicle_update(v, j, channel, len(vehicles),
                                                  server.broadcast_full), vehicles)
    comp = [c for c, _ in losses]
    head = [p for _, p in losses]
    if not all(np.isfinite(comp + head)):
        raise NumericalError(j, f"non-finite loss (compressor {comp}, head {head})")
    return RoundTrace(
        round_index=j,
        compressor_loss=comp,
        head_loss=head,
        uploaded_bytes=int(sum(up)),
        downloaded_bytes=down_bytes,
        upload_messages=len(up),
        download_messages=n_down,
        peak_vehicle_feature_bytes=int(peak_vehicle),
        peak_server_feature_bytes=int(peak_server),
        sim_time=simulate_round_clock(time_params) if time_params is not None else None,
    )


# ---------------------------------------------------------------------- clock

def simulate_round_clock(tp: TimeParams) -> float:
    """Event-driven replay of one round; returns when the last vehicle finishes.

    The round has three stages separated by barriers: compress and upload,
    server extraction, download and local updates.  Each stage runs on its own
    clock starting at zero and the stage lengths are added at the barriers.
    """
    n = tp.vehicles

    def run_stage(starts: list[tuple[float, str, int]], steps: dict) -> float:
        events = [(t, seq, kind, v) for seq, (t, kind, v) in enumerate(starts)]
        heapq.heapify(events)
        seq = len(events)
        end = 0.0
        done = 0
        while events:
            t, _, kind, v = heapq.heappop(events)
            nxt = steps.get(kind)
            if nxt is None:
                done += 1
                end = max(end, t)
                continue
            name, duration = nxt
            heapq.heappush(events, (t + duration(v), seq, name, v))
            seq += 1
        if done != len(starts):
            raise RuntimeError("clock simulation lost a vehicle")
        return end

    upload = run_stage([(tp.tf_c[v], "compressed", v) for v in range(n)],
                       {"compressed": ("uploaded", lambda v: tp.tu[v])})
    extract = run_stage([(tp.t_s, "extracted", -1)], {})
    # compressor backward runs alongside head forward+backward after the download
    local = run_stage([(tp.td[v], "downloaded", v) for v in range(n)],
                      {"downloaded": ("updated",
                                      lambda v: max(tp.tb_c[v], tp.tf_p[v] + tp.tb_p[v]))})
    return upload + extract + local


# -------------------------------------------------------------------- session

def rounds_for(n_iterations: int, s_max: int, batch_size: int) -> int:
    return n_iterations * (s_max // batch_size)


class Session:
    """A server plus its vehicles, a channel, and the config that built them."""

    def __init__(self, config: PFedLVMConfig, datasets: Sequence[Sequence[LabeledImage]]):
        if not datasets:
            raise ConfigurationError("at least one vehicle dataset is required")
        self.config = config
        cfg = config
        bseed = cfg.seed if cfg.backbone_seed is None else cfg.backbone_seed
        backbone = BackboneModel.create(bseed, cfg.feature_channels, cfg.backbone_depth,
                                        cfg.backbone_perturbation)
        head_in = cfg.feature_channels * cfg.selection.channel_multiplier(cfg.backbone_depth)
        self.server = ServerState(backbone, cfg.selection, len(datasets), cfg.broadcast_full)
        self.vehicles: list[VehicleState] = []
        for vid, data in enumerate(datasets):
            images, masks = stack(data)
            if images.shape[2] % 2 or images.shape[3] % 2:
                raise ConfigurationError("image size must be even")
            comp = CompressorModel.create(np.random.default_rng([cfg.seed, vid, 0xC1]),
                                          images.shape[1], cfg.compressor_hidden,
                                          cfg.feature_channels)
            head = SegHeadModel.create(np.random.default_rng([cfg.seed, vid, 0xE1]), head_in,
                                       cfg.num_classes, cfg.selection, cfg.head_hidden, 2)
            self.vehicles.append(VehicleState(
                vid, images, masks, comp, AdamState.for_params(comp.parameters(), **cfg.adam_hyper()),
                head, AdamState.for_params(head.parameters(), **cfg.adam_hyper()),
                cfg.selection, slot=vid))
        self.channel = Channel()
        self.traces: list[RoundTrace] = []

    @property
    def s_max(self) -> int:
        return max(v.size for v in self.vehicles)

    @property
    def total_rounds(self) -> int:
        return rounds_for(self.config.n_iterations, self.s_max, self.config.batch_size)

    def run(self, callback: Callable[["Session", RoundTrace], None] | None = None
            ) -> list[RoundTrace]:
        cfg = self.config
        if cfg.batch_size > self.s_max:
            raise ConfigurationError(f"batch_size {cfg.batch_size} exceeds S_max {self.s_max}")
        pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
        try:
            for j in range(len(self.traces), self.total_rounds):
                trace = run_round(self.server, self.vehicles, j, cfg.batch_size, self.channel,
                                  pool, cfg.time_params)
                self.traces.append(trace)
                if callback is not None:
                    callback(self, trace)
        finally:
            if pool is not None:
                pool.shutdown()
        return self.traces

    def predict(self, vehicle: VehicleState, images: np.ndarray) -> np.ndarray:
        """Per-pixel class predictions of one vehicle's personalized pipeline."""
        feats, _ = compress(vehicle.compressor, images)
        shared = extract_shared(self.server.backbone, self.server.selection, feats)
        logits, _ = head_predict(vehicle.head, shared)
        return logits.argmax(axis=1)


def run_training(config: PFedLVMConfig, datasets: Sequence[Sequence[LabeledImage]]
                 ) -> list[RoundTrace]:
    return Session(config, datasets).run()


# ---------------------------------------------------------------------- audit

def audit_parameter_privacy(channel_log: Sequence[tuple[Message, bytes]],
                            parameter_arrays: Sequence[np.ndarray]) -> list[str]:
    """Return a description of every logged message that carries model parameters.

    A message is flagged when its provenance tag is not ``feature``, its kind is
    a parameter kind, or its serialized bytes contain the byte image of any
    given parameter tensor.  Constant tensors (a zero bias, say) are skipped:
    their bytes also occur in ordinary activations and identify nothing.
    """
    needles = [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in parameter_arrays
               if p.size >= 2 and np.ptp(p) > 0]
    problems = []
    for msg, data in channel_log:
        tag = f"{msg.kind.name} round {msg.round_index} vehicle {msg.vehicle_id}"
        if msg.provenance != "feature":
            problems.append(f"{tag}: provenance {msg.provenance!r}")
        elif msg.kind not in wire.FEATURE_KINDS:
            problems.append(f"{tag}: parameter message kind")
        elif any(n in data for n in needles):
            problems.append(f"{tag}: payload contains a parameter tensor")
    return problems
