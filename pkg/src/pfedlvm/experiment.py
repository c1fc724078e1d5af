"""Experiment orchestration: build data from a ``RunConfig``, train, evaluate
periodically, and write every artifact under one output directory.

Artifacts of a training run:
  manifest.json                resolved config, seed, code version, status
  losses.csv                   per round and vehicle training losses
  traffic.csv                  per round message counts, bytes, peaks, clock
  metrics/iterNNN_*.csv        per-vehicle and pooled metrics at each evaluation
  metrics/final_*.csv          the same after the last iteration
  metric_history.csv           mean metrics of every evaluation, one row per scope
  reconciliation.csv           traced bytes (and clock) against the closed forms
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .baselines import FederatedRun
from .commcost import CommParams, m_fl, m_pfl, round_time, space_units, sweep_rows, total_time, \
    write_sweep_csv
from .config import RunConfig
from .datagen import LabeledImage, generate_vehicle_dataset, partition_counts, stack
from .metrics import ConfusionAccumulator, MetricSummary, accumulate_batch, read_metric_csv, \
    summarize, write_metric_csv
from .models import LayerSelection
from .protocol import NumericalError, Session, rounds_for
from .tensor_nn import ITEM_BYTES

log = logging.getLogger(__name__)

METRIC_NAMES = ("mIoU", "mF1", "mPrecision", "mRecall")


# ---------------------------------------------------------------------- data

def split_holdout(data: Sequence[LabeledImage], fraction: float
                  ) -> tuple[list[LabeledImage], list[LabeledImage]]:
    """The last ``max(1, round(fraction * n))`` samples are held out; at least one is trained on."""
    n = len(data)
    k = max(1, int(round(fraction * n)))
    if k >= n:
        raise ValueError(f"cannot hold out {k} of {n} samples and still train")
    return list(data[:-k]), list(data[-k:])


@dataclass
class VehicleData:
    train: list[LabeledImage]
    test: list[LabeledImage]


def build_datasets(cfg: RunConfig) -> list[VehicleData]:
    scene = cfg.scene()
    counts = partition_counts(cfg["data.total_images"], cfg.proportions())
    out = []
    for vid, n in enumerate(counts):
        train, test = split_holdout(generate_vehicle_dataset(scene, vid, n), cfg["data.holdout"])
        out.append(VehicleData(train, test))
    return out


def evaluate(predict: Callable[[int, np.ndarray], np.ndarray], data: Sequence[VehicleData],
             num_classes: int) -> tuple[list[MetricSummary], MetricSummary]:
    """Per-vehicle summaries on each held-out slice, plus the pooled summary."""
    accs = []
    for vid, d in enumerate(data):
        images, masks = stack(d.test)
        accs.append(accumulate_batch(predict(vid, images), masks, ConfusionAccumulator(num_classes)))
    pooled = accs[0]
    for acc in accs[1:]:
        pooled = pooled.merge(acc)
    return [summarize(a) for a in accs], summarize(pooled)


# --------------------------------------------------------------------- writer

def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


class RunWriter:
    """Creates files only inside ``root``."""

    def __init__(self, root: str | Path):
        self.root = Path(root).resolve()
        self.root.mkdir(parents=True, exist_ok=True)
        self.artifacts: list[str] = []

    def path(self, name: str) -> Path:
        p = (self.root / name).resolve()
        if p != self.root and self.root not in p.parents:
            raise ValueError(f"{name!r} resolves outside the output directory {self.root}")
        p.parent.mkdir(parents=True, exist_ok=True)
        rel = p.relative_to(self.root).as_posix()
        if rel not in self.artifacts:
            self.artifacts.append(rel)
        return p

    def csv_writer(self, name: str, header: Sequence[str]):
        fh = open(self.path(name), "w", newline="")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        return fh, w

    def write_rows(self, name: str, header: Sequence[str], rows: Sequence[Sequence]) -> None:
        fh, w = self.csv_writer(name, header)
        with fh:
            w.writerows(rows)

    def manifest(self, cfg: RunConfig, status: str, extra: dict | None = None) -> None:
        p = self.path("manifest.json")
        doc = {"mode": cfg.mode, "seed": cfg.seed, "code_version": code_version(),
               "status": status, "config": cfg.to_pairs(),
               "artifacts": sorted(a for a in self.artifacts if a != "manifest.json")}
        doc.update(extra or {})
        p.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if np.isnan(v) else f"{v:.6f}"
    return str(v)


class MetricLog:
    """Writes per-evaluation metric CSVs and accumulates the history table."""

    def __init__(self, writer: RunWriter):
        self.writer = writer
        self.history: list[list[str]] = []

    def record(self, tag: str, iteration: int, per_vehicle: list[MetricSummary],
               pooled: MetricSummary) -> None:
        scopes = [(f"vehicle{v}", s) for v, s in enumerate(per_vehicle)] + [("pooled", pooled)]
        for scope, summary in scopes:
            write_metric_csv(summary, self.writer.path(f"metrics/{tag}_{scope}.csv"))
            means = summary.means()
            self.history.append([str(iteration), tag, scope] + [_fmt(means[m]) for m in METRIC_NAMES])

    def flush(self) -> None:
        self.writer.write_rows("metric_history.csv", ("iteration", "tag", "scope") + METRIC_NAMES,
                               self.history)


@dataclass
class RunResult:
    mode: str
    out_dir: Path
    status: str
    error: str | None = None
    final: dict[str, dict[str, float]] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == "complete"


class EvalSchedule:
    """Fires at iteration multiples of ``every`` (never when ``every`` is 0)."""

    def __init__(self, every: int):
        self.every = every
        self.next = every

    def due(self, iteration: int) -> bool:
        if self.every <= 0 or iteration < self.next:
            return False
        self.next = (iteration // self.every + 1) * self.every
        return True


def _final_means(per_vehicle, pooled) -> dict[str, dict[str, float]]:
    out = {f"vehicle{v}": s.means() for v, s in enumerate(per_vehicle)}
    out["pooled"] = pooled.means()
    return out


# ---------------------------------------------------------------- reconciling

RECONCILIATION_COLUMNS = ("quantity", "traced", "analytic", "difference", "match")


def _reconcile_row(name: str, traced, analytic) -> list[str]:
    """Integers must match exactly; float sums may differ by summation-order rounding."""
    if isinstance(traced, float) or isinstance(analytic, float):
        diff = float(traced) - float(analytic)
        ok = math.isclose(traced, analytic, rel_tol=1e-12, abs_tol=0.0)
        return [name, repr(float(traced)), repr(float(analytic)), repr(diff), str(ok).lower()]
    return [name, str(traced), str(analytic), str(traced - analytic), str(traced == analytic).lower()]


def feature_bytes(cfg: RunConfig, selection: LayerSelection) -> tuple[int, int]:
    """(upload, download) payload bytes of one vehicle's one-mini-batch message."""
    half = cfg["scene.image_size"] // 2
    up = ITEM_BYTES * cfg["train.batch_size"] * cfg["model.feature_channels"] * half * half
    down = up * selection.channel_multiplier(cfg["model.backbone_depth"])
    if cfg["model.broadcast_full"]:
        down *= cfg.num_vehicles
    return up, down


def pfedlvm_reconciliation(cfg: RunConfig, session: Session, selection: LayerSelection
                           ) -> list[list[str]]:
    traces = session.traces
    V = len(session.vehicles)
    f_up, f_down = feature_bytes(cfg, selection)
    p = CommParams(S_max=session.s_max, N_b=cfg["train.n_iterations"], B_s=cfg["train.batch_size"],
                   F_b=f_up, M_b=1, sigma=1, V=V)
    R = p.batches_per_iteration
    first_up = next(msg.payload_bytes for msg, _ in session.channel.log if msg.is_upload)
    first_down = next(msg.payload_bytes for msg, _ in session.channel.log if not msg.is_upload)
    up = sum(t.uploaded_bytes for t in traces)
    down = sum(t.downloaded_bytes for t in traces)
    rows = [
        _reconcile_row("rounds", len(traces), rounds_for(p.N_b, p.S_max, p.B_s)),
        _reconcile_row("F_b_upload", first_up, f_up),
        _reconcile_row("F_b_download", first_down, f_down),
        _reconcile_row("uploaded_bytes", up, p.N_b * f_up * R * V),
        _reconcile_row("downloaded_bytes", down, p.N_b * f_down * R * V),
        _reconcile_row("total_bytes", up + down, m_pfl(p, f_down)),
        _reconcile_row("peak_vehicle_feature_bytes",
                       max(t.peak_vehicle_feature_bytes for t in traces),
                       space_units(V, f_up)["vehicle"]),
        _reconcile_row("peak_server_feature_bytes",
                       max(t.peak_server_feature_bytes for t in traces),
                       space_units(V, f_up)["server"]),
    ]
    tp = session.config.time_params
    if tp is not None:
        rows.append(_reconcile_row("total_time", total_time(t.sim_time for t in traces),
                                   total_time([round_time(tp)] * len(traces))))
    return rows


def baseline_reconciliation(cfg: RunConfig, run: FederatedRun) -> list[list[str]]:
    V = len(run.clients)
    M_b = ITEM_BYTES * run.global_model.params.num_parameters()
    p = CommParams(S_max=max(len(c.data.images) for c in run.clients),
                   N_b=cfg["train.n_iterations"], B_s=cfg["train.batch_size"], F_b=1, M_b=M_b,
                   sigma=cfg["fl.sigma"], V=V)
    up = sum(t.uploaded_bytes for t in run.traces)
    down = sum(t.downloaded_bytes for t in run.traces)
    first = next((msg.payload_bytes for msg, _ in run.channel.log), M_b)
    exchanges = p.N_b // p.sigma
    return [
        _reconcile_row("aggregations", len(run.traces), exchanges),
        _reconcile_row("M_b", first, M_b),
        _reconcile_row("uploaded_bytes", up, exchanges * M_b * V),
        _reconcile_row("downloaded_bytes", down, exchanges * M_b * V),
        _reconcile_row("total_bytes", up + down, m_fl(p)),
    ]


# -------------------------------------------------------------------- runners

def _run_pfedlvm(cfg: RunConfig, writer: RunWriter, data: list[VehicleData],
                 selection: LayerSelection | None = None) -> RunResult:
    selection = selection or LayerSelection.parse(cfg["model.selection"])
    session = Session(cfg.pfedlvm(selection), [d.train for d in data])
    R = session.s_max // cfg["train.batch_size"]
    metrics = MetricLog(writer)
    schedule = EvalSchedule(cfg["run.eval_every"])
    C = cfg["scene.class_count"]
    V = len(data)

    def predict(vid, images):
        return session.predict(session.vehicles[vid], images)

    loss_fh, loss_w = writer.csv_writer("losses.csv", ("round", "iteration", "vehicle",
                                                       "compressor_loss", "head_loss"))
    traffic_fh, traffic_w = writer.csv_writer("traffic.csv", (
        "round", "upload_messages", "uploaded_bytes", "download_messages", "downloaded_bytes",
        "peak_vehicle_feature_bytes", "peak_server_feature_bytes", "sim_time"))

    def on_round(s: Session, t):
        iteration = (t.round_index + 1) / R
        for v in range(V):
            loss_w.writerow([t.round_index, f"{iteration:.6g}", v, repr(t.compressor_loss[v]),
                             repr(t.head_loss[v])])
        traffic_w.writerow([t.round_index, t.upload_messages, t.uploaded_bytes,
                            t.download_messages, t.downloaded_bytes, t.peak_vehicle_feature_bytes,
                            t.peak_server_feature_bytes,
                            "" if t.sim_time is None else repr(t.sim_time)])
        if (t.round_index + 1) % R == 0:
            it = (t.round_index + 1) // R
            if schedule.due(it):
                metrics.record(f"iter{it:03d}", it, *evaluate(predict, data, C))

    result = RunResult(cfg.mode, writer.root, "complete")
    try:
        session.run(on_round)
    except NumericalError as exc:
        result.status, result.error = "failed", str(exc)
    finally:
        loss_fh.close()
        traffic_fh.close()
    if result.ok:
        per_vehicle, pooled = evaluate(predict, data, C)
        metrics.record("final", cfg["train.n_iterations"], per_vehicle, pooled)
        result.final = _final_means(per_vehicle, pooled)
        writer.write_rows("reconciliation.csv", RECONCILIATION_COLUMNS,
                          pfedlvm_reconciliation(cfg, session, selection))
    metrics.flush()
    return result


def _run_baseline(cfg: RunConfig, writer: RunWriter, data: list[VehicleData]) -> RunResult:
    s_max = max(len(d.train) for d in data)
    steps = s_max // cfg["train.batch_size"]
    if steps < 1:
        raise ValueError(f"train.batch_size {cfg['train.batch_size']} exceeds S_max {s_max}")
    run = FederatedRun(cfg.fl(steps), [d.train for d in data])
    metrics = MetricLog(writer)
    schedule = EvalSchedule(cfg["run.eval_every"])
    C = cfg["scene.class_count"]

    def predict(vid, images):
        return run.predict(images)

    loss_fh, loss_w = writer.csv_writer("losses.csv", ("round", "iteration", "vehicle", "local_loss"))
    traffic_fh, traffic_w = writer.csv_writer("traffic.csv", (
        "round", "upload_messages", "uploaded_bytes", "download_messages", "downloaded_bytes"))

    def on_aggregate(r: FederatedRun, t):
        for v, loss in enumerate(t.local_loss):
            loss_w.writerow([t.round_index, r.iteration, v, repr(loss)])
        traffic_w.writerow([t.round_index, t.upload_messages, t.uploaded_bytes,
                            t.download_messages, t.downloaded_bytes])
        if schedule.due(r.iteration):
            metrics.record(f"iter{r.iteration:03d}", r.iteration, *evaluate(predict, data, C))

    result = RunResult(cfg.mode, writer.root, "complete")
    try:
        run.run(on_aggregate)
    except NumericalError as exc:
        result.status, result.error = "failed", str(exc)
    finally:
        loss_fh.close()
        traffic_fh.close()
    if result.ok:
        per_vehicle, pooled = evaluate(predict, data, C)
        metrics.record("final", cfg["train.n_iterations"], per_vehicle, pooled)
        result.final = _final_means(per_vehicle, pooled)
        writer.write_rows("reconciliation.csv", RECONCILIATION_COLUMNS,
                          baseline_reconciliation(cfg, run))
    metrics.flush()
    return result


def _run_commsweep(cfg: RunConfig, writer: RunWriter) -> RunResult:
    write_sweep_csv(sweep_rows(cfg.sweep_grid().points()), writer.path("sweep.csv"))
    return RunResult(cfg.mode, writer.root, "complete")


def _run_layersweep(cfg: RunConfig, writer: RunWriter, data: list[VehicleData]) -> RunResult:
    result = RunResult(cfg.mode, writer.root, "complete")
    rows = []
    for name in cfg["run.selections"]:
        sel = LayerSelection.parse(name)
        sub = RunWriter(writer.root / sel.value)
        part = _run_pfedlvm(cfg, sub, data, sel)
        sub.manifest(cfg, part.status, {"selection": sel.value})
        writer.artifacts.extend(f"{sel.value}/{a}" for a in sub.artifacts)
        if not part.ok:
            result.status, result.error = "failed", f"{sel.value}: {part.error}"
            break
        src = sub.path("metrics/final_pooled.csv")
        writer.path(f"metrics_{sel.value}.csv").write_bytes(src.read_bytes())
        for scope, means in part.final.items():
            rows.append([sel.value, scope] + [_fmt(means[m]) for m in METRIC_NAMES])
            result.final[f"{sel.value}/{scope}"] = means
    writer.write_rows("layersweep.csv", ("selection", "scope") + METRIC_NAMES, rows)
    return result


def run_experiment(cfg: RunConfig, out_dir: str | Path) -> RunResult:
    """Run one configured experiment; the manifest is written even when training fails."""
    writer = RunWriter(out_dir)
    log.info("running %s (seed %d) into %s", cfg.mode, cfg.seed, writer.root)
    if cfg.mode == "commsweep":
        result = _run_commsweep(cfg, writer)
    else:
        data = build_datasets(cfg)
        if cfg.mode == "pfedlvm":
            result = _run_pfedlvm(cfg, writer, data)
        elif cfg.mode == "layersweep":
            result = _run_layersweep(cfg, writer, data)
        else:
            result = _run_baseline(cfg, writer, data)
    extra = {"error": result.error} if result.error else None
    writer.manifest(cfg, result.status, extra)
    if not result.ok:
        log.error("%s run failed: %s", cfg.mode, result.error)
    return result


# ------------------------------------------------------------------ reporting

COMPARISON_COLUMNS = ("reference", "other", "other_mode", "scope", "metric", "reference_value",
                      "other_value", "delta_abs", "delta_pct")


def percent_delta(a: float, b: float) -> float:
    """(a - b) / b in percent; NaN when b is 0."""
    return float("nan") if b == 0 else (a - b) / b * 100.0


def _load_final(run_dir: Path) -> tuple[str, dict[str, dict[str, float]]]:
    manifest_path = run_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"missing {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    mode = manifest["mode"]
    if mode not in ("pfedlvm", "fedavg", "fedprox"):
        raise ValueError(f"{run_dir}: {mode} runs have no per-vehicle metrics to compare")
    n = len(manifest["config"]["data.proportions"].split(","))
    paths = {f"vehicle{v}": run_dir / "metrics" / f"final_vehicle{v}.csv" for v in range(n)}
    paths["pooled"] = run_dir / "metrics" / "final_pooled.csv"
    missing = [str(p) for p in paths.values() if not p.exists()]
    if missing:
        raise FileNotFoundError("missing metric files: " + ", ".join(missing))
    return mode, {scope: read_metric_csv(p) for scope, p in paths.items()}


def compare_report(run_dirs: Sequence[str | Path], out_path: str | Path | None = None
                   ) -> list[dict]:
    """Final-metric deltas of a reference run against every other run.

    The reference is the first pFedLVM run listed, or the first run if none is.
    """
    dirs = [Path(d) for d in run_dirs]
    if len(dirs) < 2:
        raise ValueError("compare_report needs at least two run directories")
    loaded, missing = [], []
    for d in dirs:
        try:
            loaded.append(_load_final(d))
        except FileNotFoundError as exc:
            missing.append(str(exc))
    if missing:
        raise FileNotFoundError("; ".join(missing))
    ref = next((i for i, (mode, _) in enumerate(loaded) if mode == "pfedlvm"), 0)
    ref_mode, ref_final = loaded[ref]
    rows = []
    for i, (mode, final) in enumerate(loaded):
        if i == ref:
            continue
        for scope in ref_final:
            if scope not in final:
                continue
            for metric in METRIC_NAMES:
                a, b = ref_final[scope][metric], final[scope][metric]
                rows.append({"reference": str(dirs[ref]), "other": str(dirs[i]), "other_mode": mode,
                             "scope": scope, "metric": metric, "reference_value": a,
                             "other_value": b, "delta_abs": a - b, "delta_pct": percent_delta(a, b)})
    if out_path is not None:
        with open(out_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(COMPARISON_COLUMNS)
            for r in rows:
                w.writerow([_fmt(r[c]) if isinstance(r[c], float) else r[c]
                            for c in COMPARISON_COLUMNS])
    return rows
