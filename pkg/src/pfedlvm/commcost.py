"""Closed-form communication, time and space models for feature exchange
versus parameter exchange, plus helpers for parameter sweeps."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Sequence


class UndefinedSavingsError(ZeroDivisionError):
    """The parameter-exchange baseline never communicates, so savings are undefined."""


@dataclass(frozen=True)
class CommParams:
    S_max: int
    N_b: int
    B_s: int
    F_b: int
    M_b: int
    sigma: int
    V: int

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if int(value) != value or value <= 0:
                raise ValueError(f"CommParams.{f.name} must be a positive integer, got {value!r}")
        if self.B_s > self.S_max:
            raise ValueError(f"B_s={self.B_s} exceeds S_max={self.S_max}")

    @property
    def batches_per_iteration(self) -> int:
        return self.S_max // self.B_s


def m_pfl(p: CommParams, f_down: int | None = None) -> int:
    """Total feature-exchange bytes.

    ``f_down`` lets downloads differ in size from uploads (concat layer
    selections); by default both directions carry ``F_b``.
    """
    down = p.F_b if f_down is None else f_down
    return p.N_b * ((p.F_b + down) * p.batches_per_iteration) * p.V


def m_fl(p: CommParams) -> int:
    return (p.N_b // p.sigma) * p.M_b * 2 * p.V


def savings(p: CommParams) -> float:
    """Exact fractional saving 1 - M_pFL / M_FL."""
    fl = m_fl(p)
    if fl == 0:
        raise UndefinedSavingsError(
            f"no parameter exchange happens with N_b={p.N_b} < sigma={p.sigma}")
    return 1.0 - m_pfl(p) / fl


def savings_approx(p: CommParams) -> float:
    """Large-N_b form: 1 - (F_b/M_b) * floor(S_max/B_s) * sigma."""
    return 1.0 - (p.F_b / p.M_b) * p.batches_per_iteration * p.sigma


def batch_size_step_bound(S_max: int, N_b: int, f_sample: int, M_b: int, sigma: int,
                          B_s: int) -> float:
    """Upper bound on |savings(B_s) - savings(B_s + 1)| when F_b = f_sample * B_s.

    B * floor(S/B) lies in [S - B + 1, S], so adjacent batch sizes differ by
    at most B in that product.
    """
    rounds = N_b // sigma
    if rounds == 0:
        raise UndefinedSavingsError("no parameter exchange")
    return (f_sample / M_b) * (N_b / rounds) * B_s


# --------------------------------------------------------------------- timing

@dataclass
class TimeParams:
    """Per-vehicle durations in seconds; lists are indexed by vehicle slot."""

    tf_c: list[float]
    tb_c: list[float]
    tf_p: list[float]
    tb_p: list[float]
    tu: list[float]
    td: list[float]
    t_s: float = 0.0

    def __post_init__(self):
        n = len(self.tf_c)
        for name in ("tb_c", "tf_p", "tb_p", "tu", "td"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"TimeParams.{name} must have one entry per vehicle ({n})")
        for name in ("tf_c", "tb_c", "tf_p", "tb_p", "tu", "td"):
            if any(t < 0 for t in getattr(self, name)):
                raise ValueError(f"TimeParams.{name} must be non-negative")
        if self.t_s < 0:
            raise ValueError("TimeParams.t_s must be non-negative")

    @property
    def vehicles(self) -> int:
        return len(self.tf_c)

    @classmethod
    def uniform(cls, V: int, tf_c=1.0, tb_c=1.0, tf_p=1.0, tb_p=1.0, tu=1.0, td=1.0,
                t_s=1.0) -> "TimeParams":
        return cls([tf_c] * V, [tb_c] * V, [tf_p] * V, [tb_p] * V, [tu] * V, [td] * V, t_s)


def round_time(tp: TimeParams, V: int | None = None) -> float:
    """Duration of one mini-batch exchange round: upload barrier, server extraction,
    then the slowest vehicle's download plus local updates."""
    n = tp.vehicles if V is None else V
    if n > tp.vehicles:
        raise ValueError(f"TimeParams describe {tp.vehicles} vehicles, asked for {n}")
    up = max(tp.tf_c[v] + tp.tu[v] for v in range(n))
    down = max(max(tp.tb_c[v], tp.tf_p[v] + tp.tb_p[v]) + tp.td[v] for v in range(n))
    return up + tp.t_s + down


def total_time(round_times: Iterable[float]) -> float:
    return float(sum(round_times))


def space_units(V: int, F_b: int) -> dict[str, int]:
    """Feature bytes held at once on the vehicle side and on the server side."""
    return {"vehicle": V * F_b, "server": V * F_b}


# --------------------------------------------------------------------- sweeps

SWEEP_COLUMNS = ("S_max", "N_b", "B_s", "F_b", "M_b", "sigma", "V",
                 "m_pfl", "m_fl", "eta_exact", "eta_approx")


@dataclass
class SweepGrid:
    S_max: Sequence[int] = (100,)
    N_b: Sequence[int] = (2, 4, 200)
    B_s: Sequence[int] = (8,)
    F_b: Sequence[int] = (10, 20)
    M_b: Sequence[int] = (1000, 4000)
    sigma: Sequence[int] = (2,)
    V: Sequence[int] = (3,)

    def points(self) -> list[CommParams]:
        out = []
        for s, n, b, f, m, sg, v in itertools.product(
                self.S_max, self.N_b, self.B_s, self.F_b, self.M_b, self.sigma, self.V):
            if b <= s:
                out.append(CommParams(s, n, b, f, m, sg, v))
        return out


def sweep_rows(points: Iterable[CommParams]) -> list[dict]:
    rows = []
    for p in points:
        try:
            eta = savings(p)
        except UndefinedSavingsError:
            eta = float("nan")
        rows.append({"S_max": p.S_max, "N_b": p.N_b, "B_s": p.B_s, "F_b": p.F_b, "M_b": p.M_b,
                     "sigma": p.sigma, "V": p.V, "m_pfl": m_pfl(p), "m_fl": m_fl(p),
                     "eta_exact": eta, "eta_approx": savings_approx(p)})
    return rows


def write_sweep_csv(rows: Sequence[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in SWEEP_COLUMNS])


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
