"""Federated averaging: client local training and server aggregation.

Simulates what an honest-but-curious server observes for one training
round: the dispatched parameters, the returned parameters, and the local
training hyperparameters. The per-epoch shuffles are also recorded so
tests can replay a round exactly.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor
from .models import Architecture, ModelParams, ModelUpdate


class Scenario(enum.Enum):
    S1 = "S1"  # E = 1, B = 1
    S2 = "S2"  # E > 1, B = 1
    S3 = "S3"  # E = 1, B > 1
    S4 = "S4"  # E > 1, B > 1


@dataclass(frozen=True)
class TrainingConfig:
    """Local training hyperparameters; the dataset must have exactly
    ``dataset_size`` = batches * batch_size samples."""

    epochs: int
    batches: int
    eta: float
    batch_size: int
    shuffle_seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batches < 1 or self.batch_size < 1:
            raise ValueError("epochs, batches, and batch_size must be >= 1")
        if self.eta < 0:
            raise ValueError("learning rate must be non-negative")

    @property
    def dataset_size(self):
        return self.batches * self.batch_size


@dataclass
class ShuffleTrace:
    """The per-epoch permutations a client actually used."""

    permutations: list

    def __post_init__(self):
        for p in self.permutations:
            n = len(p)
            if sorted(p.tolist()) != list(range(n)):
                raise ValueError("each trace entry must be a permutation")


@dataclass
class RoundRecord:
    """Everything the server observes for one client round."""

    theta_start: ModelParams
    theta_end: ModelParams
    config: TrainingConfig
    n: int

    def __post_init__(self):
        if self.theta_start.arch.name != self.theta_end.arch.name:
            raise ValueError("round record parameters must share an architecture")
        if self.n != self.config.dataset_size:
            raise ValueError(
                f"dataset size {self.n} != batches*batch_size "
                f"{self.config.dataset_size}")


def epoch_permutation(shuffle_seed: int, round_index: int, epoch: int, n: int):
    """Deterministic permutation keyed by (seed, round, epoch)."""
    rng = np.random.default_rng([shuffle_seed, round_index, epoch])
    return rng.permutation(n)


def sgd_step(params: ModelParams, x_batch, y_batch, eta: float) -> ModelParams:
    """One mini-batch gradient descent step, returning fresh leaf parameters."""
    loss = models.forward_loss(params, x_batch, y_batch)
    tensors = list(params.tensors())
    grads = ad.grad(loss, tensors)
    flat = [Tensor(t.data - eta * g.data, requires_grad=True)
            for t, g in zip(tensors, grads)]
    it = iter(flat)
    return ModelParams(params.arch, [tuple(next(it) for _ in ts)
                                     for ts in params.layers])


def client_update(theta_t: ModelParams, x, y, config: TrainingConfig,
                  round_index: int = 0):
    """Local training: E epochs of B mini-batch SGD steps with per-epoch
    reshuffling. Returns the final parameters and the shuffle trace."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y)
    n = x.shape[0]
    if n != config.dataset_size:
        raise ValueError(
            f"client dataset of {n} samples does not split into "
            f"{config.batches} mini-batches of size {config.batch_size}")
    theta = theta_t
    m = config.batch_size
    perms = []
    for epoch in range(1, config.epochs + 1):
        perm = epoch_permutation(config.shuffle_seed, round_index, epoch, n)
        perms.append(perm)
        for b in range(config.batches):
            idx = perm[b * m:(b + 1) * m]
            theta = sgd_step(theta, x[idx], y[idx], config.eta)
    return theta, ShuffleTrace(perms)


def model_update(record: RoundRecord) -> ModelUpdate:
    """Per-layer difference theta_end - theta_start."""
    return models.params_sub(record.theta_end.detached(),
                             record.theta_start.detached())


def server_aggregate(updates) -> ModelParams:
    """Dataset-size weighted average of client parameters."""
    updates = list(updates)
    if not updates:
        raise ValueError("server_aggregate: no client updates")
    total = sum(n for _, n in updates)
    if any(n <= 0 for _, n in updates):
        raise ValueError("server_aggregate: dataset sizes must be positive")
    first, n0 = updates[0]
    acc = models.params_scale(first.detached(), n0 / total)
    for params, n in updates[1:]:
        acc = models.params_add(acc, models.params_scale(params.detached(),
                                                         n / total))
    return acc.detached(requires_grad=True)


def scenario_of(config: TrainingConfig) -> Scenario:
    if config.epochs == 1:
        return Scenario.S1 if config.batches == 1 else Scenario.S3
    return Scenario.S2 if config.batches == 1 else Scenario.S4


def simulate_round(theta_t: ModelParams, x, y, config: TrainingConfig,
                   round_index: int = 0):
    """Run one recorded round for a single client."""
    theta_next, trace = client_update(theta_t, x, y, config, round_index)
    record = RoundRecord(theta_t.detached(), theta_next.detached(), config,
                         x.shape[0])
    return record, trace


# ---------------------------------------------------------------------------
# persistence: two parameter binaries + a JSON sidecar

START_FILE = "theta_start.bin"
END_FILE = "theta_end.bin"
SIDECAR_FILE = "round.json"


def save_round(record: RoundRecord, out_dir, extra=None):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    models.save_params(record.theta_start, out / START_FILE)
    models.save_params(record.theta_end, out / END_FILE)
    sidecar = {
        "E": record.config.epochs,
        "B": record.config.batches,
        "eta": record.config.eta,
        "M": record.config.batch_size,
        "N": record.n,
        "shuffle_seed": record.config.shuffle_seed,
        "arch": record.theta_start.arch.name,
    }
    if extra:
        sidecar.update(extra)
    with open(out / SIDECAR_FILE, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def load_round(run_dir, arch: Architecture):
    run = Path(run_dir)
    with open(run / SIDECAR_FILE) as fh:
        sidecar = json.load(fh)
    config = TrainingConfig(epochs=sidecar["E"], batches=sidecar["B"],
                            eta=sidecar["eta"], batch_size=sidecar["M"],
                            shuffle_seed=sidecar["shuffle_seed"])
    theta_start = models.load_params(run / START_FILE, arch)
    theta_end = models.load_params(run / END_FILE, arch)
    record = RoundRecord(theta_start, theta_end, config, sidecar["N"])
    return record, sidecar
