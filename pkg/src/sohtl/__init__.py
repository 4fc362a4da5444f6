"""Transfer-learning battery state-of-health estimation.

Each discharge cycle is aligned to a reference with dynamic time warping
and split into canonical and residual variates. A T²/Q control-limit gate
decides whether a source battery's model may be reused on a target. A GRU
regressor on the canonical part plus a residual GRU then estimate capacity.
"""

from .cva import LagSpec
from .dataset import BatteryRecord, DischargeCycle, SynthProfile, load_battery, save_battery, synth_battery
from .errors import SohError
from .nn import GruConfig, TrainConfig
from .pipeline import (
    estimate_cycles,
    estimate_online,
    evaluate_transferability,
    load_model,
    save_model,
    train_source,
    train_target,
)

__version__ = "0.1.0"

__all__ = [
    "BatteryRecord",
    "DischargeCycle",
    "GruConfig",
    "LagSpec",
    "SohError",
    "SynthProfile",
    "TrainConfig",
    "estimate_cycles",
    "estimate_online",
    "evaluate_transferability",
    "load_battery",
    "load_model",
    "save_battery",
    "save_model",
    "synth_battery",
    "train_source",
    "train_target",
]
