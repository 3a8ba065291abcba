"""Desk-scale lab for data reconstruction attacks against FedAvg updates."""

from . import autodiff, bayesopt, fedavg, metrics, models
from .attack import (AttackConfig, WeightVector, interpolate_updates,
                     make_target, matching_loss, reconstruct,
                     replicate_update, weighted_matching_loss)
from .fedavg import RoundRecord, Scenario, TrainingConfig, scenario_of
from .tuning import BoConfig, TuneResult, tune_attack

__all__ = [
    "autodiff",
    "bayesopt",
    "fedavg",
    "metrics",
    "models",
    "AttackConfig",
    "WeightVector",
    "interpolate_updates",
    "make_target",
    "matching_loss",
    "reconstruct",
    "replicate_update",
    "weighted_matching_loss",
    "RoundRecord",
    "Scenario",
    "TrainingConfig",
    "scenario_of",
    "BoConfig",
    "TuneResult",
    "tune_attack",
]
