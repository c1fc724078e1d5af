"""Figures for run directories, written as PNG files next to the CSVs they plot."""

from __future__ import annotations

import csv
from collections import defaultdict
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

DPI = 120


def _read(path: str | Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _save(fig, path: str | Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=DPI)
    plt.close(fig)
    return Path(path)


def plot_losses(losses_csv: str | Path, path: str | Path, title: str = "") -> Path:
    """Per-vehicle training loss curves; one panel per loss column."""
    rows = _read(losses_csv)
    loss_cols = [c for c in rows[0] if c.endswith("_loss")] if rows else []
    fig, axes = plt.subplots(1, max(1, len(loss_cols)), figsize=(5 * max(1, len(loss_cols)), 3.5),
                             squeeze=False)
    for ax, col in zip(axes[0], loss_cols):
        series = defaultdict(list)
        for r in rows:
            series[r["vehicle"]].append((float(r["iteration"]), float(r[col])))
        for vid, pts in sorted(series.items()):
            xs, ys = zip(*pts)
            ax.plot(xs, ys, lw=0.8, label=f"vehicle {vid}")
        ax.set_xlabel("iteration")
        ax.set_ylabel(col.replace("_", " "))
        ax.set_yscale("log")
        ax.legend(fontsize=8)
    if title:
        fig.suptitle(title)
    return _save(fig, path)


def plot_metric_history(history_csv: str | Path, path: str | Path, metric: str = "mIoU",
                        title: str = "") -> Path:
    series = defaultdict(list)
    for r in _read(history_csv):
        if r["tag"] != "final":
            series[r["scope"]].append((int(r["iteration"]), float(r[metric])))
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for scope, pts in sorted(series.items()):
        xs, ys = zip(*pts)
        ax.plot(xs, ys, marker="o", ms=3, label=scope, ls="--" if scope == "pooled" else "-")
    ax.set_xlabel("iteration")
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    if title:
        ax.set_title(title)
    return _save(fig, path)


def plot_comparison(rows: Sequence[dict], path: str | Path, metric: str = "mIoU") -> Path:
    """Grouped bars of the reference run and each compared run, per scope."""
    picked = [r for r in rows if r["metric"] == metric]
    scopes = list(dict.fromkeys(r["scope"] for r in picked))
    others = list(dict.fromkeys((r["other"], r["other_mode"]) for r in picked))
    width = 0.8 / (len(others) + 1)
    fig, ax = plt.subplots(figsize=(1.6 * len(scopes) + 2, 3.5))
    ref_vals = {r["scope"]: r["reference_value"] for r in picked}
    ax.bar([i for i in range(len(scopes))], [ref_vals[s] for s in scopes], width,
           label="reference")
    for k, (other, mode) in enumerate(others, 1):
        vals = {r["scope"]: r["other_value"] for r in picked if r["other"] == other}
        ax.bar([i + k * width for i in range(len(scopes))], [vals.get(s, 0.0) for s in scopes],
               width, label=f"{mode} ({Path(other).name})")
    ax.set_xticks([i + width * len(others) / 2 for i in range(len(scopes))], scopes)
    ax.set_ylabel(metric)
    ax.set_ylim(0, 1)
    ax.legend(fontsize=8)
    return _save(fig, path)


def plot_savings(sweep_csv: str | Path, path: str | Path) -> Path:
    """Savings against B_s, F_b and M_b, others held at the grid's first value
    (largest N_b, where the exact and approximate forms are closest)."""
    rows = _read(sweep_csv)
    cols = ("S_max", "N_b", "B_s", "F_b", "M_b", "sigma", "V")
    first = {c: rows[0][c] for c in cols}
    first["N_b"] = str(max(int(r["N_b"]) for r in rows))
    fig, axes = plt.subplots(1, 3, figsize=(13, 3.5))
    for ax, factor in zip(axes, ("B_s", "F_b", "M_b")):
        sub = [r for r in rows if all(r[c] == first[c] for c in cols if c != factor)]
        sub.sort(key=lambda r: int(r[factor]))
        xs = [int(r[factor]) for r in sub]
        ax.plot(xs, [float(r["eta_exact"]) for r in sub], marker="o", label="exact")
        ax.plot(xs, [float(r["eta_approx"]) for r in sub], marker="x", ls="--", label="approx")
        ax.set_xlabel(factor)
        ax.set_ylabel("savings")
        ax.legend(fontsize=8)
    return _save(fig, path)


def plot_layersweep(layersweep_csv: str | Path, path: str | Path, metric: str = "mIoU") -> Path:
    rows = [r for r in _read(layersweep_csv) if r["scope"] == "pooled"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([r["selection"] for r in rows], [float(r[metric]) for r in rows])
    ax.set_ylabel(f"pooled {metric}")
    ax.set_ylim(0, 1)
    ax.tick_params(axis="x", labelrotation=30)
    return _save(fig, path)
