import time

import numpy as np
import pytest

from pfedlvm.config import build_config
from pfedlvm.datagen import SceneConfig, generate_vehicle_dataset
from pfedlvm.experiment import build_datasets, evaluate
from pfedlvm.baselines import FederatedRun
from pfedlvm.protocol import Session

ACCEPTANCE_SEEDS = (0, 1, 2)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_datasets():
    """Three small vehicles with unequal sizes on 8x8 images."""
    scene = SceneConfig(image_size=8, seed=7)
    return [generate_vehicle_dataset(scene, v, n) for v, n in enumerate((5, 9, 12))]


class DefaultRun:
    """pFedLVM, FedAvg and a Last-selection pFedLVM on the default task for one seed."""

    def __init__(self, seed: int):
        cfg = build_config(overrides={"run.seed": str(seed)})
        self.seed = seed
        self.data = build_datasets(cfg)
        C = cfg["scene.class_count"]
        trains = [d.train for d in self.data]

        t0 = time.perf_counter()
        self.session = Session(cfg.pfedlvm(), trains)
        self.session.run()
        self.pfl, _ = evaluate(lambda v, im: self.session.predict(self.session.vehicles[v], im),
                               self.data, C)
        steps = self.session.s_max // cfg["train.batch_size"]
        self.fedavg_run = FederatedRun(cfg.fl(steps), trains)
        self.fedavg_run.run()
        self.fedavg, _ = evaluate(lambda v, im: self.fedavg_run.predict(im), self.data, C)
        self.comparison_seconds = time.perf_counter() - t0

        t0 = time.perf_counter()
        last_cfg = build_config(overrides={"run.seed": str(seed), "model.selection": "Last"})
        last = Session(last_cfg.pfedlvm(), trains)
        last.run()
        self.last, _ = evaluate(lambda v, im: last.predict(last.vehicles[v], im), self.data, C)
        self.layer_seconds = time.perf_counter() - t0

    @property
    def pfl_miou(self):
        return [s.miou for s in self.pfl]

    @property
    def fedavg_miou(self):
        return [s.miou for s in self.fedavg]

    @property
    def last_miou(self):
        return [s.miou for s in self.last]


@pytest.fixture(scope="session")
def default_runs():
    """Shared by the personalization, layer-selection and loss-descent checks."""
    return [DefaultRun(seed) for seed in ACCEPTANCE_SEEDS]


# ------------------------------------------------------------ acceptance lines

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, status: str, detail: str, seconds: float) -> str:
    """Store one acceptance verdict; all of them are printed in the terminal summary."""
    line = f"criterion {number} {status}: {title} | {detail} | {seconds:.2f} s"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
