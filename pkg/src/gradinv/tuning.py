"""Layer-weight tuning: Bayesian optimization wrapped around the attack.

Each trial runs a full reconstruction at a candidate weight vector and
reports the distance between the final replicated update and the target;
the best vector is then re-attacked to produce the final reconstruction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import bayesopt
from .attack import (Q_BOUNDS_HIGH, Q_BOUNDS_LOW, AttackConfig, AttackResult,
                     WeightVector, make_target, reconstruct)
from .config import derive_seed
from .fedavg import RoundRecord

# the four q dimensions and the two p dimensions get separate kernel scales
Q_DIM_GROUPS = ([0, 1, 2, 3], [4, 5])


@dataclass
class TuneTrial:
    index: int
    phase: str
    q: WeightVector
    f: float


@dataclass
class TuneResult:
    q_star: WeightVector
    final: AttackResult
    trials: list

    def cumulative_min(self):
        out, cur = [], float("inf")
        for t in self.trials:
            cur = min(cur, t.f)
            out.append(cur)
        return out


@dataclass(frozen=True)
class BoConfig:
    n_bo: int = 50
    n_init: int = 12
    seed: int = 0


def tune_attack(record: RoundRecord, atk: AttackConfig, bo: BoConfig,
                labels) -> TuneResult:
    """Search the weight box, then re-attack at the best vector found.

    Every trial gets its own dummy initialization stream; the whole run is
    deterministic given (record, atk, bo).
    """
    target = make_target(record, atk)
    trials = []

    def objective(unit_q):
        q = WeightVector.from_array(
            bayesopt.from_unit(unit_q, Q_BOUNDS_LOW, Q_BOUNDS_HIGH))
        trial_atk = replace(
            atk, loss_kind="weighted",
            init_seed=derive_seed(atk.init_seed, "trial", len(trials)))
        result = reconstruct(q, target.update, target.theta_start,
                             target.config, trial_atk, labels)
        trials.append(TuneTrial(len(trials), "", q, result.f_value))
        return result.f_value

    outcome = bayesopt.minimize(objective, dim=6, n_init=bo.n_init,
                                n_total=bo.n_bo, seed=bo.seed,
                                groups=Q_DIM_GROUPS)
    for trial, bo_trial in zip(trials, outcome.trials):
        trial.phase = bo_trial.phase
    finite = [t for t in trials if math.isfinite(t.f)]
    q_star = min(finite, key=lambda t: (t.f, t.index)).q
    final_atk = replace(atk, loss_kind="weighted",
                        init_seed=derive_seed(atk.init_seed, "final"))
    final = reconstruct(q_star, target.update, target.theta_start,
                        target.config, final_atk, labels)
    return TuneResult(q_star, final, trials)


def trial_rows(result: TuneResult):
    """Trial log rows: index, phase, the six weight components, the raw
    objective, and the cumulative minimum. Deterministic content only."""
    rows = []
    cum = float("inf")
    for t in result.trials:
        cum = min(cum, t.f)
        rows.append({
            "trial": t.index,
            "phase": t.phase,
            "q_cv": t.q.q_cv,
            "q_bn": t.q.q_bn,
            "q_fc": t.q.q_fc,
            "q_en": t.q.q_en,
            "p_mean": t.q.p_mean,
            "p_var": t.q.p_var,
            "f": t.f,
            "cumulative_min": cum,
        })
    return rows
