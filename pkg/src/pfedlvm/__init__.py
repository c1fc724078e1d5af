"""Feature-exchange personalized federated segmentation: a desk-scale simulator
with parameter-exchange baselines and closed-form cost models."""

__version__ = "0.1.0"

from .commcost import CommParams, TimeParams, m_fl, m_pfl, round_time, savings, savings_approx
from .config import ConfigError, RunConfig, build_config, load_config
from .metrics import ConfusionAccumulator, accumulate, summarize
from .models import LayerSelection
from .protocol import PFedLVMConfig, Session, run_training

__all__ = [
    "CommParams", "ConfigError", "ConfusionAccumulator", "LayerSelection", "PFedLVMConfig",
    "RunConfig", "Session", "TimeParams", "accumulate", "build_config", "load_config", "m_fl",
    "m_pfl", "round_time", "run_training", "savings", "savings_approx", "summarize",
]
