"""Command line front-end.

    pfedlvm run    [--config PATH] [--mode M] [--seed N] [--out DIR] [--set key=value ...]
    pfedlvm sweep  [--config PATH] [--mode commsweep|layersweep] [--seed N] [--out DIR]
                   (mode defaults to commsweep when neither flags nor config name one)
    pfedlvm report RUN_DIR [RUN_DIR ...] [--out DIR]

Without ``--out`` runs go to ``$PFEDLVM_OUT/<mode>-seed<N>`` (``PFEDLVM_OUT``
defaults to ``runs``).  Exit status: 0 success, 1 report/input error,
2 invalid configuration, 3 numerical failure during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, MODES, load_config, read_pairs
from .experiment import compare_report, run_experiment

OUT_ENV = "PFEDLVM_OUT"
SWEEP_MODES = ("commsweep", "layersweep")

log = logging.getLogger("pfedlvm")


def output_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(item, "--set expects key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    if args.mode is not None:
        out["run.mode"] = args.mode
    if args.seed is not None:
        out["run.seed"] = str(args.seed)
    return out


def _add_run_flags(p: argparse.ArgumentParser, modes) -> None:
    p.add_argument("--config", type=Path, help="key=value config file or a run's manifest.json")
    p.add_argument("--mode", choices=modes)
    p.add_argument("--seed", type=int, help="master seed (overrides run.seed)")
    p.add_argument("--out", type=Path, help="output directory for this run")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override one config key; may be repeated")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="pfedlvm", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="verb", required=True)
    _add_run_flags(sub.add_parser("run", help="train one configuration"), MODES)
    _add_run_flags(sub.add_parser("sweep", help="cost-model or layer-selection sweep"),
                   SWEEP_MODES)
    rep = sub.add_parser("report", help="compare runs and render figures")
    rep.add_argument("run_dirs", nargs="+", type=Path)
    rep.add_argument("--out", type=Path, help="report directory (default $PFEDLVM_OUT/report)")
    return parser


def cmd_run(args) -> int:
    try:
        overrides = _overrides(args)
        # a bare "sweep" means the cost-model sweep unless a mode is named somewhere
        if (args.verb == "sweep" and "run.mode" not in overrides
                and (args.config is None or "run.mode" not in read_pairs(args.config))):
            overrides["run.mode"] = "commsweep"
        cfg = load_config(args.config, overrides)
    except (ConfigError, OSError, json.JSONDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if args.verb == "sweep" and cfg.mode not in SWEEP_MODES:
        print(f"config error: run.mode: sweep needs one of {', '.join(SWEEP_MODES)}",
              file=sys.stderr)
        return 2
    out = args.out or output_root() / f"{cfg.mode}-seed{cfg.seed}"
    try:
        result = run_experiment(cfg, out)
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    if not result.ok:
        print(f"run failed: {result.error} (partial artifacts in {result.out_dir})",
              file=sys.stderr)
        return 3
    print(result.out_dir)
    for scope, means in result.final.items():
        print(f"  {scope}: " + "  ".join(f"{k}={v:.4f}" for k, v in means.items()))
    return 0


def _figures_for(run_dir: Path, out: Path) -> list[Path]:
    from . import plotting

    made = []
    mode = json.loads((run_dir / "manifest.json").read_text())["mode"]
    name = run_dir.resolve().name
    if (run_dir / "losses.csv").exists():
        made.append(plotting.plot_losses(run_dir / "losses.csv", out / f"{name}_losses.png",
                                         f"{mode}: {name}"))
    if (run_dir / "metric_history.csv").exists():
        made.append(plotting.plot_metric_history(run_dir / "metric_history.csv",
                                                 out / f"{name}_mIoU.png", title=name))
    if mode == "commsweep":
        made.append(plotting.plot_savings(run_dir / "sweep.csv", out / f"{name}_savings.png"))
    if mode == "layersweep":
        made.append(plotting.plot_layersweep(run_dir / "layersweep.csv",
                                             out / f"{name}_layers.png"))
    return made


def cmd_report(args) -> int:
    from . import plotting

    out = args.out or output_root() / "report"
    out.mkdir(parents=True, exist_ok=True)
    missing = [str(d / "manifest.json") for d in args.run_dirs if not (d / "manifest.json").exists()]
    if missing:
        print("missing run manifests: " + ", ".join(missing), file=sys.stderr)
        return 1
    training = [d for d in args.run_dirs
                if json.loads((d / "manifest.json").read_text())["mode"] in ("pfedlvm", "fedavg",
                                                                              "fedprox")]
    if len(training) >= 2:
        try:
            rows = compare_report(training, out / "comparison.csv")
        except (FileNotFoundError, ValueError) as exc:
            print(f"report error: {exc}", file=sys.stderr)
            return 1
        plotting.plot_comparison(rows, out / "comparison_mIoU.png")
        print(out / "comparison.csv")
    for d in args.run_dirs:
        for path in _figures_for(d, out):
            print(path)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.verb == "report":
        return cmd_report(args)
    return cmd_run(args)


if __name__ == "__main__":
    sys.exit(main())
