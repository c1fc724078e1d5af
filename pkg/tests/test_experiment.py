import csv
import json
from pathlib import Path

import pytest

from pfedlvm.cli import main
from pfedlvm.config import build_config
from pfedlvm.experiment import (
    COMPARISON_COLUMNS,
    EvalSchedule,
    RunWriter,
    compare_report,
    percent_delta,
    run_experiment,
    split_holdout,
)
from pfedlvm.models import LayerSelection

SMALL = {
    "data.total_images": "36",
    "scene.image_size": "8",
    "train.n_iterations": "2",
    "train.batch_size": "4",
    "run.eval_every": "1",
    "model.selection": "Middle1",
}


def small(mode="pfedlvm", **extra):
    overrides = dict(SMALL, **{"run.mode": mode})
    if mode not in ("pfedlvm",):
        overrides.pop("model.selection")
    if mode == "commsweep":
        overrides = {"run.mode": mode}
    overrides.update(extra)
    return build_config(overrides=overrides)


def tree(root: Path) -> dict[str, bytes]:
    return {p.relative_to(root).as_posix(): p.read_bytes()
            for p in sorted(root.rglob("*")) if p.is_file()}


def read_csv(path: Path) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def reconciliation_ok(run_dir: Path) -> bool:
    rows = read_csv(run_dir / "reconciliation.csv")
    return bool(rows) and all(r["match"] == "true" for r in rows)


@pytest.fixture(scope="module")
def pair_of_runs(tmp_path_factory):
    """A small pFedLVM run and a small FedAvg run on the same data."""
    root = tmp_path_factory.mktemp("runs")
    pfl = run_experiment(small("pfedlvm"), root / "pfl")
    fedavg = run_experiment(small("fedavg"), root / "fedavg")
    assert pfl.ok and fedavg.ok
    return root / "pfl", root / "fedavg"


class TestHelpers:
    def test_holdout_takes_the_tail(self):
        train, test = split_holdout(list(range(20)), 0.15)
        assert train == list(range(17)) and test == [17, 18, 19]

    def test_holdout_keeps_one_of_each(self):
        assert split_holdout([1, 2], 0.15) == ([1], [2])
        with pytest.raises(ValueError):
            split_holdout([1], 0.15)

    def test_eval_schedule(self):
        s = EvalSchedule(3)
        assert [i for i in range(1, 11) if s.due(i)] == [3, 6, 9]
        assert not any(EvalSchedule(0).due(i) for i in range(1, 5))

    def test_percent_delta(self):
        assert percent_delta(0.55, 0.50) == pytest.approx(10.0)
        assert percent_delta(0.5, 0.5) == 0.0
        assert percent_delta(0.3, 0.0) != percent_delta(0.3, 0.0)

    def test_writer_refuses_escape(self, tmp_path):
        w = RunWriter(tmp_path / "out")
        with pytest.raises(ValueError, match="outside"):
            w.path("../elsewhere.csv")
        with pytest.raises(ValueError, match="outside"):
            w.path("/etc/passwd")


class TestRuns:
    def test_pfedlvm_artifacts(self, pair_of_runs):
        run_dir, _ = pair_of_runs
        manifest = json.loads((run_dir / "manifest.json").read_text())
        assert manifest["status"] == "complete" and manifest["mode"] == "pfedlvm"
        assert manifest["code_version"].startswith("0.1.0+")
        for name in ("losses.csv", "traffic.csv", "metric_history.csv", "reconciliation.csv",
                     "metrics/iter001_pooled.csv", "metrics/iter002_vehicle2.csv",
                     "metrics/final_vehicle0.csv", "metrics/final_pooled.csv"):
            assert (run_dir / name).exists(), name
            assert name in manifest["artifacts"]
        assert reconciliation_ok(run_dir)
        # S_max is 13 of 36 images at 15% held out, so 3 rounds per iteration
        assert len(read_csv(run_dir / "traffic.csv")) == 2 * 3

    def test_fedavg_artifacts(self, pair_of_runs):
        _, run_dir = pair_of_runs
        assert reconciliation_ok(run_dir)
        rows = {r["quantity"]: r for r in read_csv(run_dir / "reconciliation.csv")}
        assert rows["aggregations"]["traced"] == "1"

    def test_same_config_same_bytes(self, pair_of_runs, tmp_path):
        again = run_experiment(small("pfedlvm"), tmp_path / "again")
        assert again.ok
        assert tree(tmp_path / "again") == tree(pair_of_runs[0])

    def test_rerun_from_manifest(self, pair_of_runs, tmp_path):
        src = pair_of_runs[1]
        out = tmp_path / "rerun"
        assert main(["run", "--config", str(src / "manifest.json"), "--out", str(out)]) == 0
        assert tree(out) == tree(src)

    def test_fedprox_runs(self, tmp_path):
        result = run_experiment(small("fedprox", **{"fl.mu": "0.1"}), tmp_path / "prox")
        assert result.ok and reconciliation_ok(tmp_path / "prox")

    def test_time_model_is_reconciled(self, tmp_path):
        cfg = small("pfedlvm", **{"time.tf_c": "0.1,0.2,0.3", "time.tu": "1", "time.t_s": "0.5"})
        assert run_experiment(cfg, tmp_path / "t").ok
        rows = {r["quantity"]: r for r in read_csv(tmp_path / "t" / "reconciliation.csv")}
        assert rows["total_time"]["match"] == "true"

    def test_concat_selection_reconciles(self, tmp_path):
        cfg = small("pfedlvm", **{"model.selection": "Middle4Concat"})
        assert run_experiment(cfg, tmp_path / "c").ok
        rows = {r["quantity"]: r for r in read_csv(tmp_path / "c" / "reconciliation.csv")}
        assert int(rows["F_b_download"]["traced"]) == 4 * int(rows["F_b_upload"]["traced"])
        assert reconciliation_ok(tmp_path / "c")

    def test_commsweep_hand_values(self, tmp_path):
        assert run_experiment(small("commsweep"), tmp_path / "sweep").ok
        rows = read_csv(tmp_path / "sweep" / "sweep.csv")
        key = {(r["N_b"], r["B_s"], r["F_b"], r["M_b"]): r for r in rows}
        assert key[("2", "8", "10", "1000")]["m_pfl"] == "1440"
        assert key[("4", "8", "10", "1000")]["m_fl"] == "12000"

    def test_layersweep_writes_one_csv_per_selection(self, tmp_path):
        cfg = small("layersweep", **{"train.n_iterations": "1", "run.eval_every": "0"})
        result = run_experiment(cfg, tmp_path / "layers")
        assert result.ok
        made = sorted(p.name for p in (tmp_path / "layers").glob("metrics_*.csv"))
        assert made == sorted(f"metrics_{s.value}.csv" for s in LayerSelection)
        rows = read_csv(tmp_path / "layers" / "layersweep.csv")
        assert len(rows) == 6 * 4
        for s in LayerSelection:
            assert reconciliation_ok(tmp_path / "layers" / s.value)

    def test_nothing_written_outside_out_dir(self, tmp_path, monkeypatch):
        monkeypatch.chdir(tmp_path)
        run_experiment(small("fedavg"), tmp_path / "only")
        assert [p.name for p in tmp_path.iterdir()] == ["only"]


class TestCompare:
    def test_self_comparison_is_zero(self, pair_of_runs, tmp_path):
        rows = compare_report([pair_of_runs[0], pair_of_runs[0]], tmp_path / "c.csv")
        assert rows and all(r["delta_abs"] == 0.0 and r["delta_pct"] == 0.0 for r in rows)

    def test_reference_is_the_pfedlvm_run(self, pair_of_runs, tmp_path):
        pfl, fedavg = pair_of_runs
        out = tmp_path / "c.csv"
        rows = compare_report([fedavg, pfl], out)
        assert {r["reference"] for r in rows} == {str(pfl)}
        assert {r["other_mode"] for r in rows} == {"fedavg"}
        assert len(rows) == 4 * 4
        written = read_csv(out)
        assert tuple(written[0]) == COMPARISON_COLUMNS and len(written) == len(rows)
        for r in rows:
            assert r["delta_abs"] == pytest.approx(r["reference_value"] - r["other_value"])

    def test_missing_files_are_listed(self, pair_of_runs, tmp_path):
        broken = tmp_path / "broken"
        broken.mkdir()
        (broken / "manifest.json").write_bytes((pair_of_runs[0] / "manifest.json").read_bytes())
        with pytest.raises(FileNotFoundError) as info:
            compare_report([pair_of_runs[0], broken, tmp_path / "absent"])
        msg = str(info.value)
        assert "final_vehicle0.csv" in msg and "final_pooled.csv" in msg
        assert str(tmp_path / "absent" / "manifest.json") in msg

    def test_needs_two_runs(self, pair_of_runs):
        with pytest.raises(ValueError):
            compare_report([pair_of_runs[0]])


class TestCli:
    def args(self, out, *extra):
        sets = []
        for k, v in SMALL.items():
            sets += ["--set", f"{k}={v}"]
        return ["run", "--out", str(out), *sets, *extra]

    def test_run_prints_summary(self, tmp_path, capsys):
        assert main(self.args(tmp_path / "r")) == 0
        out = capsys.readouterr().out
        assert str(tmp_path / "r") in out and "pooled: mIoU=" in out

    def test_default_out_dir_from_environment(self, tmp_path, monkeypatch):
        monkeypatch.setenv("PFEDLVM_OUT", str(tmp_path / "root"))
        assert main(["sweep", "--seed", "4"]) == 0
        assert (tmp_path / "root" / "commsweep-seed4" / "sweep.csv").exists()

    @pytest.mark.parametrize("extra, match", [
        (["--set", "train.batch_size=0"], "train.batch_size"),
        (["--set", "nonsense"], "key=value"),
        (["--set", "run.bogus=1"], "run.bogus: unknown key"),
    ])
    def test_config_errors_exit_2(self, tmp_path, capsys, extra, match):
        assert main(self.args(tmp_path / "bad", *extra)) == 2
        assert match in capsys.readouterr().err

    def test_sweep_rejects_training_mode(self, tmp_path, capsys):
        assert main(["sweep", "--out", str(tmp_path / "s"), "--set", "run.mode=fedavg"]) == 2

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["run", "--config", str(tmp_path / "none.cfg")]) == 2

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure_exits_3_and_keeps_artifacts(self, tmp_path, capsys):
        out = tmp_path / "nan"
        code = main(self.args(out, "--set", "train.learning_rate=1e200"))
        assert code == 3
        assert "non-finite loss" in capsys.readouterr().err
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["status"] == "failed" and "round" in manifest["error"]
        assert read_csv(out / "losses.csv")
        assert not (out / "reconciliation.csv").exists()

    def test_report_renders_figures(self, pair_of_runs, tmp_path, capsys):
        sweep = tmp_path / "sweep"
        assert main(["sweep", "--out", str(sweep)]) == 0
        report = tmp_path / "report"
        code = main(["report", str(pair_of_runs[0]), str(pair_of_runs[1]), str(sweep),
                     "--out", str(report)])
        assert code == 0
        made = {p.name for p in report.iterdir()}
        assert {"comparison.csv", "comparison_mIoU.png", "pfl_losses.png", "pfl_mIoU.png",
                "fedavg_losses.png", "sweep_savings.png"} <= made
        for png in report.glob("*.png"):
            assert png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_report_missing_manifest_exits_1(self, tmp_path, capsys):
        assert main(["report", str(tmp_path / "nowhere"), "--out", str(tmp_path / "rep")]) == 1
        assert "missing run manifests" in capsys.readouterr().err
