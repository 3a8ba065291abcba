"""Experiment configuration: INI files, paper-case presets, seed fan-out.

A single master seed determines every random stream through labeled
derivation, so any subsystem can be reproduced in isolation.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .fedavg import TrainingConfig


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


def derive_seed(master_seed, label, *indices):
    """Stable 63-bit stream seed for (master seed, label, indices)."""
    text = ":".join([str(int(master_seed)), str(label)] +
                    [str(int(i)) for i in indices])
    digest = hashlib.sha256(text.encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


@dataclass
class ExperimentConfig:
    arch: str = "cnn_small"
    n_classes: int = 10
    channels: int = 3
    height: int = 8
    width: int = 8
    source: str = "synthetic"
    n: int = 4
    epochs: int = 1
    batches: int = 1
    eta: float = 0.001
    warmup_rounds: int = 0
    iterations: int = 1000
    eta_hat: float = 0.1
    loss: str = "weighted"
    target_epoch: int = 1
    optimize_labels: bool = False
    n_bo: int = 50
    n_init: int = 12
    master_seed: int = 0
    out_dir: str = "runs/out"
    q_fixed: tuple | None = None  # (q_cv, q_bn, q_fc, q_en, p_mean, p_var)
    init_truth: bool = False

    @property
    def image_shape(self):
        return (self.channels, self.height, self.width)

    @property
    def batch_size(self):
        return self.n // self.batches

    def validate(self):
        if self.n < 1:
            raise ConfigError("dataset size must be >= 1")
        if self.batches < 1 or self.n % self.batches != 0:
            raise ConfigError(
                f"dataset size {self.n} not divisible into {self.batches} "
                "mini-batches")
        if self.arch not in ("mlp_small", "cnn_small"):
            raise ConfigError(f"unknown architecture {self.arch!r}")
        if self.loss not in ("weighted", "unweighted"):
            raise ConfigError(f"unknown loss kind {self.loss!r}")
        if not 1 <= self.target_epoch <= self.epochs:
            raise ConfigError(
                f"target epoch {self.target_epoch} outside 1..{self.epochs}")
        if self.n_bo <= self.n_init or self.n_init < 2:
            raise ConfigError("need n_bo > n_init >= 2")
        if self.source != "synthetic" and not Path(self.source).is_dir():
            raise ConfigError(f"image directory {self.source!r} does not exist")
        if self.eta < 0 or self.eta_hat <= 0:
            raise ConfigError("learning rates out of range")
        if self.epochs < 1 or self.iterations < 1:
            raise ConfigError("epochs and attack iterations must be >= 1")
        return self

    def training_config(self):
        return TrainingConfig(epochs=self.epochs, batches=self.batches,
                              eta=self.eta, batch_size=self.batch_size,
                              shuffle_seed=derive_seed(self.master_seed,
                                                       "shuffle"))

    def seeds(self):
        return {
            "model-init": derive_seed(self.master_seed, "model-init"),
            "data": derive_seed(self.master_seed, "data"),
            "dummy-init": derive_seed(self.master_seed, "dummy-init"),
            "bo": derive_seed(self.master_seed, "bo"),
        }


# the four FedAvg regimes studied at N = 4
CASE_PRESETS = {
    1: {"n": 4, "epochs": 1, "batches": 1},
    2: {"n": 4, "epochs": 4, "batches": 1},
    3: {"n": 4, "epochs": 1, "batches": 4},
    4: {"n": 4, "epochs": 2, "batches": 2},
}


_SECTIONS = {
    "experiment": {"arch": str, "classes": int, "master_seed": int,
                   "out_dir": str},
    "data": {"source": str, "channels": int, "height": int, "width": int,
             "n": int},
    "federated": {"epochs": int, "batches": int, "eta": float,
                  "warmup_rounds": int},
    "attack": {"iterations": int, "eta_hat": float, "loss": str,
               "target_epoch": int, "optimize_labels": bool,
               "q_cv": float, "q_bn": float, "q_fc": float, "q_en": float,
               "p_mean": float, "p_var": float, "init_truth": bool},
    "tune": {"n_bo": int, "n_init": int},
}

_KEY_MAP = {
    ("experiment", "classes"): "n_classes",
}


def load_config(path, case=None, seed=None, out_dir=None) -> ExperimentConfig:
    """Load and validate an INI experiment file.

    ``case`` applies one of the four preset (N, E, B) regimes on top;
    ``seed``/``out_dir`` override the file.
    """
    cfg = ExperimentConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(path)
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        q_parts = {}
        for section in parser.sections():
            known = _SECTIONS.get(section)
            if known is None:
                raise ConfigError(f"unknown config section [{section}]")
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key {key!r} in [{section}]")
                kind = known[key]
                try:
                    if kind is bool:
                        value = parser.getboolean(section, key)
                    else:
                        value = kind(raw)
                except ValueError as exc:
                    raise ConfigError(
                        f"bad value for {key} in [{section}]: {raw!r}") from exc
                if key in ("q_cv", "q_bn", "q_fc", "q_en", "p_mean", "p_var"):
                    q_parts[key] = value
                    continue
                attr = _KEY_MAP.get((section, key), key)
                setattr(cfg, attr, value)
        if q_parts:
            names = ("q_cv", "q_bn", "q_fc", "q_en", "p_mean", "p_var")
            missing = [n for n in names if n not in q_parts]
            if missing:
                raise ConfigError(
                    f"fixed weight vector incomplete; missing {missing}")
            cfg.q_fixed = tuple(q_parts[n] for n in names)
    if case is not None:
        preset = CASE_PRESETS.get(case)
        if preset is None:
            raise ConfigError(f"unknown case {case}; choose 1-4")
        for key, value in preset.items():
            setattr(cfg, key, value)
        cfg.target_epoch = 1
    if seed is not None:
        cfg.master_seed = seed
    if out_dir is not None:
        cfg.out_dir = str(out_dir)
    return cfg.validate()
