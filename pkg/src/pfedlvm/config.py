"""Run configuration: flat ``section.key = value`` files with dotted sections.

Lines are ``key = value``; ``#`` starts a comment; blank lines are ignored.
Every key is declared once in ``SCHEMA`` with its parser, default and the
modes it affects.  Keys set explicitly for a mode they do not affect are
accepted but logged as ignored.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping

from .baselines import FLConfig
from .commcost import SweepGrid, TimeParams
from .datagen import DEFAULT_CLASS_WEIGHTS, SceneConfig
from .models import LayerSelection
from .protocol import PFedLVMConfig

log = logging.getLogger(__name__)

MODES = ("pfedlvm", "fedavg", "fedprox", "commsweep", "layersweep")
TRAINING_MODES = ("pfedlvm", "fedavg", "fedprox", "layersweep")
FEATURE_MODES = ("pfedlvm", "layersweep")
PARAMETER_MODES = ("fedavg", "fedprox")


class ConfigError(ValueError):
    """A config value failed to parse or validate; the message names the key."""

    def __init__(self, key: str, detail: str):
        super().__init__(f"{key}: {detail}")
        self.key = key


# ------------------------------------------------------------------- parsers

def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    return float(text)


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _str(text: str) -> str:
    return text.strip()


def _optional_int(text: str) -> int | None:
    return None if text.strip().lower() in ("", "none") else int(text)


def _int_list(text: str) -> tuple[int, ...]:
    out = tuple(int(t) for t in text.split(",") if t.strip())
    if not out:
        raise ValueError("expected at least one integer")
    return out


def _float_list(text: str) -> tuple[float, ...]:
    out = tuple(float(t) for t in text.split(",") if t.strip())
    if not out:
        raise ValueError("expected at least one number")
    return out


def _optional_float_list(text: str) -> tuple[float, ...] | None:
    return None if text.strip().lower() in ("", "none") else _float_list(text)


def _selection_list(text: str) -> tuple[str, ...]:
    out = tuple(LayerSelection.parse(t.strip()).value for t in text.split(",") if t.strip())
    if not out:
        raise ValueError("expected at least one layer selection")
    return out


def _class_weights(text: str) -> tuple[tuple[float, ...], ...] | None:
    """``default`` (or ``none``) or per-vehicle weight lists separated by ``;``."""
    if text.strip().lower() in ("default", "none", ""):
        return None
    return tuple(_float_list(part) for part in text.split(";") if part.strip())


def _format(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        if value and isinstance(value[0], tuple):
            return ";".join(_format(v) for v in value)
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Field:
    parse: Callable[[str], Any]
    default: Any
    modes: tuple[str, ...]


_ALL = MODES
_TIME_DEFAULT = None

SCHEMA: dict[str, Field] = {
    "run.mode": Field(_str, "pfedlvm", _ALL),
    "run.seed": Field(_int, 0, _ALL),
    "run.eval_every": Field(_int, 10, TRAINING_MODES),
    "run.workers": Field(_int, 1, TRAINING_MODES),
    "run.selections": Field(_selection_list, tuple(s.value for s in LayerSelection), ("layersweep",)),
    "data.total_images": Field(_int, 600, TRAINING_MODES),
    "data.proportions": Field(_float_list, (128.0, 167.0, 305.0), TRAINING_MODES),
    "data.holdout": Field(_float, 0.15, TRAINING_MODES),
    "scene.image_size": Field(_int, 16, TRAINING_MODES),
    "scene.class_count": Field(_int, 4, TRAINING_MODES),
    "scene.shapes_min": Field(_int, 2, TRAINING_MODES),
    "scene.shapes_max": Field(_int, 5, TRAINING_MODES),
    "scene.noise_std": Field(_float, 0.05, TRAINING_MODES),
    "scene.class_weights": Field(_class_weights, None, TRAINING_MODES),
    "train.n_iterations": Field(_int, 30, TRAINING_MODES),
    "train.batch_size": Field(_int, 8, TRAINING_MODES),
    "train.learning_rate": Field(_float, 3e-4, TRAINING_MODES),
    "train.beta1": Field(_float, 0.9, TRAINING_MODES),
    "train.beta2": Field(_float, 0.999, TRAINING_MODES),
    "train.weight_decay": Field(_float, 1e-4, TRAINING_MODES),
    "model.selection": Field(_str, LayerSelection.MIDDLE4_CONCAT.value, ("pfedlvm",)),
    "model.feature_channels": Field(_int, 8, FEATURE_MODES),
    "model.compressor_hidden": Field(_int, 16, FEATURE_MODES),
    "model.head_hidden": Field(_int, 16, FEATURE_MODES),
    "model.backbone_depth": Field(_int, 8, FEATURE_MODES),
    "model.backbone_perturbation": Field(_float, 0.0, FEATURE_MODES),
    "model.backbone_seed": Field(_optional_int, None, FEATURE_MODES),
    "model.broadcast_full": Field(_bool, False, FEATURE_MODES),
    "model.baseline_hidden": Field(_int, 24, PARAMETER_MODES),
    "fl.sigma": Field(_int, 2, PARAMETER_MODES),
    "fl.mu": Field(_float, 0.01, ("fedprox",)),
    "comm.S_max": Field(_int_list, (100,), ("commsweep",)),
    "comm.N_b": Field(_int_list, (2, 4, 200), ("commsweep",)),
    "comm.B_s": Field(_int_list, (1, 2, 4, 8, 16, 32), ("commsweep",)),
    "comm.F_b": Field(_int_list, (10, 20), ("commsweep",)),
    "comm.M_b": Field(_int_list, (1000, 4000), ("commsweep",)),
    "comm.sigma": Field(_int_list, (2,), ("commsweep",)),
    "comm.V": Field(_int_list, (3,), ("commsweep",)),
    "time.tf_c": Field(_optional_float_list, None, FEATURE_MODES),
    "time.tb_c": Field(_optional_float_list, None, FEATURE_MODES),
    "time.tf_p": Field(_optional_float_list, None, FEATURE_MODES),
    "time.tb_p": Field(_optional_float_list, None, FEATURE_MODES),
    "time.tu": Field(_optional_float_list, None, FEATURE_MODES),
    "time.td": Field(_optional_float_list, None, FEATURE_MODES),
    "time.t_s": Field(_float, 0.0, FEATURE_MODES),
}

_TIME_KEYS = ("tf_c", "tb_c", "tf_p", "tb_p", "tu", "td")


# ------------------------------------------------------------------- reading

def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Split ``key = value`` lines into a dict of raw strings."""
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in pairs:
            raise ConfigError(key, f"set twice ({source}:{lineno})")
        pairs[key] = value
    return pairs


def read_pairs(path: str | Path) -> dict[str, str]:
    """Raw pairs from a config file or from a run manifest's resolved config."""
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        manifest = json.loads(text)
        try:
            return {k: str(v) for k, v in manifest["config"].items()}
        except (KeyError, AttributeError):
            raise ConfigError(str(path), "manifest has no 'config' mapping") from None
    return parse_text(text, str(path))


# -------------------------------------------------------------------- config

@dataclass
class RunConfig:
    values: dict[str, Any]
    explicit: frozenset[str] = field(default_factory=frozenset)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @property
    def mode(self) -> str:
        return self.values["run.mode"]

    @property
    def seed(self) -> int:
        return self.values["run.seed"]

    @property
    def num_vehicles(self) -> int:
        return len(self.values["data.proportions"])

    def to_pairs(self) -> dict[str, str]:
        return {k: _format(self.values[k]) for k in SCHEMA}

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in self.to_pairs().items())

    # ----------------------------------------------------- sub-configurations

    def scene(self) -> SceneConfig:
        v = self.values
        weights = v["scene.class_weights"]
        if weights is None:
            weights = DEFAULT_CLASS_WEIGHTS if v["scene.class_count"] == 4 else ()
        return SceneConfig(image_size=v["scene.image_size"], class_count=v["scene.class_count"],
                           shapes_per_image=(v["scene.shapes_min"], v["scene.shapes_max"]),
                           class_weights=tuple(tuple(w) for w in weights),
                           noise_std=v["scene.noise_std"], seed=self.seed)

    def proportions(self) -> tuple[float, ...]:
        raw = self.values["data.proportions"]
        total = sum(raw)
        return tuple(p / total for p in raw)

    def pfedlvm(self, selection: LayerSelection | None = None) -> PFedLVMConfig:
        v = self.values
        return PFedLVMConfig(
            n_iterations=v["train.n_iterations"], batch_size=v["train.batch_size"],
            selection=selection or LayerSelection.parse(v["model.selection"]),
            num_classes=v["scene.class_count"], feature_channels=v["model.feature_channels"],
            compressor_hidden=v["model.compressor_hidden"], head_hidden=v["model.head_hidden"],
            backbone_depth=v["model.backbone_depth"],
            backbone_perturbation=v["model.backbone_perturbation"],
            learning_rate=v["train.learning_rate"], beta1=v["train.beta1"], beta2=v["train.beta2"],
            weight_decay=v["train.weight_decay"], seed=self.seed,
            backbone_seed=v["model.backbone_seed"], broadcast_full=v["model.broadcast_full"],
            workers=v["run.workers"], time_params=self.time_params())

    def fl(self, steps_per_iteration: int, weights=None) -> FLConfig:
        v = self.values
        return FLConfig(
            sigma=v["fl.sigma"], mu=v["fl.mu"] if self.mode == "fedprox" else 0.0,
            n_iterations=v["train.n_iterations"], steps_per_iteration=steps_per_iteration,
            batch_size=v["train.batch_size"], num_classes=v["scene.class_count"],
            hidden=v["model.baseline_hidden"], learning_rate=v["train.learning_rate"],
            beta1=v["train.beta1"], beta2=v["train.beta2"], weight_decay=v["train.weight_decay"],
            seed=self.seed, workers=v["run.workers"], weights=weights)

    def sweep_grid(self) -> SweepGrid:
        v = self.values
        return SweepGrid(S_max=v["comm.S_max"], N_b=v["comm.N_b"], B_s=v["comm.B_s"],
                         F_b=v["comm.F_b"], M_b=v["comm.M_b"], sigma=v["comm.sigma"],
                         V=v["comm.V"])

    def time_params(self) -> TimeParams | None:
        v = self.values
        lists = {k: v[f"time.{k}"] for k in _TIME_KEYS}
        if all(x is None for x in lists.values()):
            return None
        n = self.num_vehicles
        resolved = {}
        for k, x in lists.items():
            if x is None:
                x = (0.0,)
            if len(x) == 1:
                x = x * n
            resolved[k] = list(x)
        return TimeParams(t_s=v["time.t_s"], **resolved)


def build_config(pairs: Mapping[str, str] | None = None,
                 overrides: Mapping[str, str] | None = None) -> RunConfig:
    """Resolve raw pairs (file first, then overrides) against the schema."""
    raw = dict(pairs or {})
    raw.update(overrides or {})
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(unknown[0], "unknown key")
    values = {}
    for key, spec in SCHEMA.items():
        if key in raw:
            try:
                values[key] = spec.parse(raw[key])
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
        else:
            values[key] = spec.default
    cfg = RunConfig(values, frozenset(raw))
    _validate(cfg)
    for key in sorted(cfg.explicit):
        if cfg.mode not in SCHEMA[key].modes:
            log.warning("%s is ignored in %s mode", key, cfg.mode)
    return cfg


def load_config(path: str | Path | None = None, overrides: Mapping[str, str] | None = None
                ) -> RunConfig:
    return build_config(read_pairs(path) if path is not None else {}, overrides)


def _check(ok: bool, key: str, detail: str) -> None:
    if not ok:
        raise ConfigError(key, detail)


def _positive(v: Mapping[str, Any], keys: Iterable[str]) -> None:
    for key in keys:
        value = v[key]
        items = value if isinstance(value, tuple) else (value,)
        _check(all(x > 0 for x in items), key, f"must be positive, got {_format(value)}")


def _validate(cfg: RunConfig) -> None:
    v = cfg.values
    _check(v["run.mode"] in MODES, "run.mode", f"must be one of {', '.join(MODES)}")
    _check(v["run.seed"] >= 0, "run.seed", "must be >= 0")
    _check(v["run.eval_every"] >= 0, "run.eval_every", "must be >= 0 (0 evaluates at the end only)")
    _positive(v, ("run.workers", "data.total_images", "data.proportions", "scene.image_size",
                  "scene.class_count", "scene.shapes_min", "train.n_iterations",
                  "train.batch_size", "train.learning_rate", "model.feature_channels",
                  "model.compressor_hidden", "model.head_hidden", "model.backbone_depth",
                  "model.baseline_hidden", "fl.sigma", "comm.S_max", "comm.N_b", "comm.B_s",
                  "comm.F_b", "comm.M_b", "comm.sigma", "comm.V"))
    _check(0 < v["data.holdout"] < 1, "data.holdout", "must lie strictly between 0 and 1")
    _check(v["scene.image_size"] % 2 == 0, "scene.image_size",
           "must be even (the compressor halves the resolution)")
    _check(v["scene.shapes_max"] >= v["scene.shapes_min"], "scene.shapes_max",
           "must be >= scene.shapes_min")
    _check(v["scene.noise_std"] >= 0, "scene.noise_std", "must be >= 0")
    _check(0 <= v["train.beta1"] < 1, "train.beta1", "must lie in [0, 1)")
    _check(0 <= v["train.beta2"] < 1, "train.beta2", "must lie in [0, 1)")
    _check(v["train.weight_decay"] >= 0, "train.weight_decay", "must be >= 0")
    _check(v["model.backbone_perturbation"] >= 0, "model.backbone_perturbation", "must be >= 0")
    _check(v["fl.mu"] >= 0, "fl.mu", "must be >= 0")
    _check(v["data.total_images"] >= 2 * cfg.num_vehicles, "data.total_images",
           "needs at least two images per vehicle (one train, one held out)")
    try:
        sel = LayerSelection.parse(v["model.selection"])
    except ValueError as exc:
        raise ConfigError("model.selection", str(exc)) from None
    v["model.selection"] = sel.value
    for key, selections in (("model.selection", (sel.value,)),
                            ("run.selections", v["run.selections"])):
        for name in selections:
            try:
                LayerSelection.parse(name).layer_indices(v["model.backbone_depth"])
            except ValueError as exc:
                raise ConfigError(key, str(exc)) from None
    weights = v["scene.class_weights"]
    if weights is not None:
        for i, w in enumerate(weights):
            _check(len(w) == v["scene.class_count"], "scene.class_weights",
                   f"vehicle {i} lists {len(w)} weights for {v['scene.class_count']} classes")
    elif v["scene.class_count"] != 4:
        log.info("no class weights for %d classes; vehicles draw Dirichlet weights",
                 v["scene.class_count"])
    for k in _TIME_KEYS:
        x = v[f"time.{k}"]
        if x is not None:
            _check(len(x) in (1, cfg.num_vehicles), f"time.{k}",
                   f"needs 1 or {cfg.num_vehicles} values, got {len(x)}")
            _check(all(t >= 0 for t in x), f"time.{k}", "durations must be >= 0")
    _check(v["time.t_s"] >= 0, "time.t_s", "must be >= 0")
    try:
        cfg.scene()
    except ValueError as exc:
        raise ConfigError("scene.class_weights", str(exc)) from None
