"""Acceptance checks, one test per criterion.

Each test prints a line ``criterion N PASS|FAIL|WARN: ...`` with the measured
value, its tolerance and the runtime; the lines are repeated in the pytest
terminal summary.
"""

import itertools
import math
import time
import warnings

import numpy as np
import pytest

from conftest import record_criterion
from oracles import brute_force_metrics, numeric_grad, rel_error
from pfedlvm.baselines import (
    FederatedRun,
    FLConfig,
    LocalData,
    aggregate,
    centralized_training,
    model_bytes,
)
from pfedlvm.commcost import (
    CommParams,
    TimeParams,
    batch_size_step_bound,
    m_fl,
    m_pfl,
    round_time,
    savings,
    savings_approx,
    total_time,
)
from pfedlvm.datagen import SceneConfig, generate_vehicle_dataset
from pfedlvm.metrics import ConfusionAccumulator, accumulate, summarize
from pfedlvm.models import (
    BaselineNet,
    CompressorModel,
    LayerSelection,
    SegHeadModel,
    compress,
    compressor_backward,
    head_backward,
    head_predict,
)
from pfedlvm.protocol import (
    BarrierError,
    Channel,
    PFedLVMConfig,
    Session,
    audit_parameter_privacy,
    server_step,
)
from pfedlvm.tensor_nn import AdamState, cross_entropy_loss, mse_loss
from pfedlvm.wire import Message, MessageKind


def verdict(number, title, ok, detail, seconds, runtime_limit=None):
    if runtime_limit is not None:
        detail = f"{detail}; runtime limit {runtime_limit:.0f} s"
        ok = ok and seconds < runtime_limit
    record_criterion(number, title, "PASS" if ok else "FAIL", detail, seconds)
    return ok


def state_bytes(session: Session) -> bytes:
    return b"".join(p.tobytes() for v in session.vehicles
                    for p in v.compressor.parameters() + v.head.parameters())


def small_vehicles(sizes, image_size=4, seed=0):
    scene = SceneConfig(image_size=image_size, seed=seed)
    return [generate_vehicle_dataset(scene, v, n) for v, n in enumerate(sizes)]


# ------------------------------------------------------------------------- 1

def test_criterion_1_gradients():
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng([seed, 1])
        comp = CompressorModel.create(rng, in_channels=3, hidden=4, feature_channels=3)
        x = rng.uniform(size=(2, 3, 4, 4))
        target = rng.normal(size=(2, 3, 2, 2))
        feats, cache = compress(comp, x)
        _, g = mse_loss(feats, target)
        analytic = compressor_backward(comp, cache, g)
        numeric = numeric_grad(lambda: mse_loss(compress(comp, x)[0], target)[0],
                               comp.parameters())
        worst = max(worst, rel_error(analytic, numeric))

        sel = [LayerSelection.MIDDLE1, LayerSelection.MIDDLE4_CONCAT][seed % 2]
        in_ch = 2 * sel.channel_multiplier(8)
        head = SegHeadModel.create(rng, in_ch, 4, sel, hidden=3)
        shared = rng.normal(size=(2, in_ch, 2, 2))
        labels = rng.integers(0, 4, size=(2, 4, 4))
        logits, hcache = head_predict(head, shared)
        _, g = cross_entropy_loss(logits, labels)
        analytic = head_backward(head, hcache, g)
        numeric = numeric_grad(lambda: cross_entropy_loss(head_predict(head, shared)[0],
                                                          labels)[0], head.parameters())
        worst = max(worst, rel_error(analytic, numeric))
    seconds = time.perf_counter() - t0
    ok = verdict(1, "gradients vs central differences (h=1e-5), 20 instances", worst < 1e-6,
                 f"worst relative error {worst:.2e} (tolerance 1e-6)", seconds, 10)
    assert ok


# ------------------------------------------------------------------------- 2

def test_criterion_2_byte_reconciliation():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    checked, mismatches = [], []
    for case in range(5):
        V = int(rng.choice([1, 2, 3, 5]))
        S_max = int(rng.integers(16, 201))
        B_s = int(rng.choice([4, 8, 16]))
        N_b = int(rng.integers(1, 6))
        sigma = int(rng.integers(1, 4))
        sel = [LayerSelection.MIDDLE1, LayerSelection.MIDDLE4_CONCAT][case % 2]
        sizes = [S_max] + [int(rng.integers(B_s, S_max + 1)) for _ in range(V - 1)]
        data = small_vehicles(sizes, seed=case)

        session = Session(PFedLVMConfig(n_iterations=N_b, batch_size=B_s, selection=sel,
                                        feature_channels=2, compressor_hidden=4, head_hidden=4,
                                        backbone_depth=4, seed=case), data)
        traces = session.run()
        f_up = 8 * B_s * 2 * 2 * 2
        f_down = f_up * sel.channel_multiplier(4)
        traced = sum(t.uploaded_bytes + t.downloaded_bytes for t in traces)
        analytic = m_pfl(CommParams(S_max, N_b, B_s, f_up, 1, 1, V), f_down)

        fl = FederatedRun(FLConfig(sigma=sigma, n_iterations=N_b, steps_per_iteration=S_max // B_s,
                                   batch_size=B_s, hidden=3, seed=case), data)
        fl_traces = fl.run()
        fl_traced = sum(t.uploaded_bytes + t.downloaded_bytes for t in fl_traces)
        fl_analytic = m_fl(CommParams(S_max, N_b, B_s, 1, model_bytes(fl.global_model), sigma, V))

        checked.append(f"V={V},S={S_max},B={B_s},N={N_b},s={sigma}")
        if traced != analytic or fl_traced != fl_analytic:
            mismatches.append(f"{checked[-1]}: pFL {traced}/{analytic}, FL {fl_traced}/{fl_analytic}")
    seconds = time.perf_counter() - t0
    detail = (f"{len(checked)} configs ({'; '.join(checked)}), tolerance 0 bytes"
              + (f"; mismatches: {mismatches}" if mismatches else ""))
    assert verdict(2, "traced bytes equal m_pfl and m_fl", not mismatches, detail, seconds, 120)


# ------------------------------------------------------------------------- 3

def test_criterion_3_savings_trends():
    t0 = time.perf_counter()
    failures = []
    S_values, B_values, V = (64, 100, 200), (2, 4, 8, 16), 3
    F_values, M_values, sigmas = (5, 10, 20, 40), (1000, 2000, 4000, 8000), (1, 2, 3, 4, 5)
    # floor(N_b / sigma) strictly decreases over these sigma values for every N_b below
    N_values = (20, 60, 120, 500)
    for S, B, N, M, s in itertools.product(S_values, B_values, N_values, M_values, sigmas):
        etas = [savings(CommParams(S, N, B, f, M, s, V)) for f in F_values]
        if not all(a > b for a, b in itertools.pairwise(etas)):
            failures.append(f"F_b not decreasing at S={S},B={B},N={N},M={M},sigma={s}")
    for S, B, N, F, M in itertools.product(S_values, B_values, N_values, F_values, M_values):
        etas = [savings(CommParams(S, N, B, F, M, s, V)) for s in sigmas]
        if not all(a > b for a, b in itertools.pairwise(etas)):
            failures.append(f"sigma not decreasing at S={S},B={B},N={N},F={F},M={M}")
    for S, B, N, F, s in itertools.product(S_values, B_values, N_values, F_values, sigmas):
        etas = [savings(CommParams(S, N, B, F, m, s, V)) for m in M_values]
        if not all(a < b for a, b in itertools.pairwise(etas)):
            failures.append(f"M_b not increasing at S={S},B={B},N={N},F={F},sigma={s}")
    worst_step = 0.0
    for S, N, f, M, s in itertools.product(S_values, N_values, (1, 2, 5), M_values, sigmas):
        for B in range(1, 40):
            a = savings(CommParams(S, N, B, f * B, M, s, V))
            b = savings(CommParams(S, N, B + 1, f * (B + 1), M, s, V))
            bound = batch_size_step_bound(S, N, f, M, s, B)
            worst_step = max(worst_step, abs(a - b) / bound)
            if abs(a - b) > bound * (1 + 1e-12):
                failures.append(f"B_s step {B}->{B + 1} exceeds bound at S={S},N={N}")
    worst_gap = 0.0
    for S, B, F, M, s in itertools.product(S_values, B_values, F_values, M_values, sigmas):
        for N in (100 * s, 100 * s + s - 1, 1000 * s + 1):
            p = CommParams(S, N, B, F, M, s, V)
            gap = abs((1 - savings(p)) - (1 - savings_approx(p))) / (1 - savings_approx(p))
            worst_gap = max(worst_gap, gap)
            if gap >= 0.01:
                failures.append(f"exact/approx gap {gap:.4f} at N={N},sigma={s}")
    seconds = time.perf_counter() - t0
    detail = (f"monotone in F_b, sigma, M_b; worst |step|/bound {worst_step:.3f} (<= 1); "
              f"worst exact-vs-approx gap {100 * worst_gap:.3f}% (tolerance 1%)")
    if failures:
        detail += f"; {len(failures)} violations, first: {failures[0]}"
    assert verdict(3, "savings-model trends", not failures, detail, seconds, 5)


# ------------------------------------------------------------------------- 4

def test_criterion_4_time_model():
    t0 = time.perf_counter()
    tp = TimeParams(tf_c=[0.12, 0.30, 0.07], tb_c=[0.25, 0.11, 0.40], tf_p=[0.05, 0.21, 0.09],
                    tb_p=[0.15, 0.33, 0.10], tu=[0.80, 0.35, 1.20], td=[0.40, 0.90, 0.15],
                    t_s=0.6)
    data = small_vehicles([10, 14, 16])
    totals, per_round_exact = [], True
    for n_b in (1, 2, 3, 4):
        session = Session(PFedLVMConfig(n_iterations=n_b, batch_size=4, feature_channels=2,
                                        compressor_hidden=4, head_hidden=4, backbone_depth=4,
                                        selection=LayerSelection.MIDDLE1, time_params=tp), data)
        traces = session.run()
        per_round_exact &= all(t.sim_time == round_time(tp) for t in traces)
        totals.append(total_time(t.sim_time for t in traces))
    steps = [b - a for a, b in itertools.pairwise(totals)]
    slope = 4 * round_time(tp)   # rounds per iteration times t_b
    affine = all(math.isclose(s, slope, rel_tol=1e-12) for s in steps)
    seconds = time.perf_counter() - t0
    detail = (f"t_b simulated == closed form {round_time(tp)!r} on every round: {per_round_exact}; "
              f"total increments {[round(s, 12) for s in steps]} vs slope {slope!r} (rel 1e-12)")
    assert verdict(4, "event-driven clock vs closed-form round time", per_round_exact and affine,
                   detail, seconds, 5)


# ------------------------------------------------------------------------- 5

def test_criterion_5_metric_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    pairs = []
    for _ in range(200):
        shape = tuple(rng.integers(1, 9, size=2))
        gt = rng.choice(4, size=shape, p=[0.5, 0.3, 0.15, 0.05])
        pred = np.where(rng.random(shape) < 0.5, gt, rng.integers(0, 4, size=shape))
        pairs.append((pred, gt))
    acc = ConfusionAccumulator(4)
    for p, g in pairs:
        accumulate(p, g, acc)
    s = summarize(acc)
    oracle = brute_force_metrics(pairs, 4)
    exact = (s.miou, s.mprecision, s.mrecall, s.mf1) == (oracle["iou"], oracle["pre"],
                                                         oracle["rec"], oracle["f1"])
    hand = summarize(accumulate(np.array([[0, 1], [1, 1]]), np.array([[0, 0], [1, 1]]),
                                ConfusionAccumulator(2)))
    expected = {"mIoU": 7 / 12, "mF1": 11 / 15, "mPrecision": 5 / 6, "mRecall": 3 / 4}
    hand_ok = all(math.isclose(hand.means()[k], v, rel_tol=4e-16) for k, v in expected.items())
    seconds = time.perf_counter() - t0
    detail = (f"200 random pairs bitwise equal to brute force: {exact}; 2x2 example "
              f"{ {k: round(v, 6) for k, v in hand.means().items()} } (1 ulp tolerance)")
    assert verdict(5, "metrics vs per-pixel brute force", exact and hand_ok, detail, seconds, 10)


# ------------------------------------------------------------------------- 6

@pytest.mark.slow
def test_criterion_6_personalization(default_runs):
    deltas = [float(np.mean(r.pfl_miou) - np.mean(r.fedavg_miou)) for r in default_runs]
    mean_delta = float(np.mean(deltas))
    seconds = sum(r.comparison_seconds for r in default_runs)
    ok = mean_delta >= 0.05 and all(d > 0 for d in deltas)
    per_seed = ", ".join(f"seed {r.seed}: {np.mean(r.pfl_miou):.3f} vs {np.mean(r.fedavg_miou):.3f}"
                         for r in default_runs)
    detail = (f"per-vehicle mIoU pFedLVM vs FedAvg ({per_seed}); deltas "
              f"{[round(d, 3) for d in deltas]}, mean {mean_delta:.3f} (need >= 0.05, each > 0)")
    assert verdict(6, "personalization benefit over FedAvg", ok, detail, seconds, 600)


# ------------------------------------------------------------------------- 7

@pytest.mark.slow
def test_criterion_7_layer_selection(default_runs):
    mid = float(np.mean([np.mean(r.pfl_miou) for r in default_runs]))
    last = float(np.mean([np.mean(r.last_miou) for r in default_runs]))
    seconds = sum(r.layer_seconds for r in default_runs)
    detail = f"Middle4Concat mean mIoU {mid:.3f} vs Last {last:.3f} over 3 seeds (soft check)"
    if mid >= last:
        record_criterion(7, "Middle4Concat >= Last", "PASS", detail, seconds)
    else:
        record_criterion(7, "Middle4Concat >= Last", "WARN", detail, seconds)
        warnings.warn(f"layer-selection ordering not reproduced: {detail}")


# ------------------------------------------------------------------------- 8

def test_criterion_8_protocol_invariants():
    t0 = time.perf_counter()
    data = small_vehicles([12, 20, 16], image_size=8, seed=8)
    runs = []
    for workers in (1, 2, 4):
        session = Session(PFedLVMConfig(n_iterations=2, batch_size=4, workers=workers, seed=8,
                                        selection=LayerSelection.MIDDLE4_CONCAT), data)
        traces = session.run()
        log = sorted(((m.round_index, m.kind, m.vehicle_id), d) for m, d in session.channel.log)
        runs.append((session, [repr(t) for t in traces], state_bytes(session), log))
    deterministic = all(r[1:] == runs[0][1:] for r in runs[1:])

    session = runs[0][0]
    params = [p for v in session.vehicles for p in v.compressor.parameters() + v.head.parameters()]
    problems = audit_parameter_privacy(session.channel.log, params)

    by_round = {}
    for msg, _ in session.channel.log:
        by_round.setdefault(msg.round_index, []).append(msg)
    barrier_ok = all(
        [m.kind for m in msgs] == [MessageKind.COMPRESSED_FEATURES] * 3
        + [MessageKind.SHARED_FEATURES] * 3 and sorted(m.vehicle_id for m in msgs[:3]) == [0, 1, 2]
        for msgs in by_round.values())
    channel = Channel()
    for vid, rnd in ((0, 0), (1, 0), (2, 1)):
        channel.send(Message(MessageKind.COMPRESSED_FEATURES, rnd, vid, np.zeros((4, 8, 4, 4))))
    try:
        server_step(session.server, channel, [0, 1, 2], 0)
        mixing_rejected = False
    except BarrierError:
        mixing_rejected = True
    seconds = time.perf_counter() - t0
    ok = not problems and barrier_ok and mixing_rejected and deterministic
    detail = (f"{len(session.channel.log)} messages audited, {len(problems)} parameter payloads; "
              f"per-round barrier ordering {barrier_ok}; cross-round upload rejected "
              f"{mixing_rejected}; bitwise equal traces under 1/2/4 workers {deterministic}")
    assert verdict(8, "privacy, barrier and determinism", ok, detail, seconds, 120)


# ------------------------------------------------------------------------- 9

def test_criterion_9_baseline_sanity():
    t0 = time.perf_counter()
    data = small_vehicles([9, 12, 7], image_size=8, seed=9)

    cfg = FLConfig(sigma=3, n_iterations=6, steps_per_iteration=2, batch_size=4, hidden=6, seed=9)
    single = FederatedRun(cfg, data[1:2])
    ref = single.global_model.copy()
    single.run()
    centralized_training(ref, LocalData.from_images(data[1]), 12,
                         AdamState.for_params(ref.params, **cfg.adam_hyper()), 4)
    one_vehicle = all(a.tobytes() == b.tobytes() for a, b in
                      zip(single.global_model.parameters(), ref.parameters()))

    base = dict(sigma=2, n_iterations=4, steps_per_iteration=2, batch_size=4, hidden=6, seed=9)
    fedavg = FederatedRun(FLConfig(**base), data)
    fedprox = FederatedRun(FLConfig(mu=0.0, **base), data)
    fedavg.run()
    fedprox.run()
    mu_zero = all(a.tobytes() == b.tobytes() for a, b in
                  zip(fedavg.global_model.parameters(), fedprox.global_model.parameters()))

    model = BaselineNet.create(np.random.default_rng(9), 4, hidden=6)
    merged = aggregate([model.copy() for _ in range(3)], [848 / 2975, 1046 / 2975, 1081 / 2975])
    identity = all(a.tobytes() == b.tobytes() for a, b in
                   zip(merged.parameters(), model.parameters()))
    seconds = time.perf_counter() - t0
    detail = (f"FedAvg |V|=1 == centralized bitwise: {one_vehicle}; FedProx mu=0 == FedAvg "
              f"bitwise: {mu_zero}; aggregate of identical models is identity: {identity}")
    assert verdict(9, "baseline sanity", one_vehicle and mu_zero and identity, detail, seconds)
