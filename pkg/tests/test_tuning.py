import math

import numpy as np
import pytest

from gradinv.attack import AttackConfig, WeightVector
from gradinv.data import synthetic_images, synthetic_labels
from gradinv.fedavg import TrainingConfig, simulate_round
from gradinv.models import build_model
from gradinv.tuning import BoConfig, trial_rows, tune_attack


@pytest.fixture(scope="module")
def small_round():
    arch, params = build_model("mlp_small", seed=30, input_shape=(1, 2, 2),
                               n_classes=3)
    x = synthetic_images(4, (1, 2, 2), seed=31)
    y = synthetic_labels(4, 3, seed=31)
    cfg = TrainingConfig(epochs=1, batches=1, eta=0.01, batch_size=4,
                         shuffle_seed=1)
    record, _ = simulate_round(params, x, y, cfg)
    return record, x, y


def quick_atk(**kw):
    defaults = dict(iterations=8, eta_hat=0.1, loss_kind="weighted",
                    init_seed=5)
    defaults.update(kw)
    return AttackConfig(**defaults)


class TestTuneAttack:
    def test_trial_count_and_phases(self, small_round):
        record, x, y = small_round
        result = tune_attack(record, quick_atk(), BoConfig(6, 3, seed=2), y)
        assert len(result.trials) == 6
        phases = [t.phase for t in result.trials]
        assert phases == ["random"] * 3 + ["guided"] * 3
        for t in result.trials:
            assert math.isfinite(t.f)

    def test_q_star_is_argmin(self, small_round):
        record, x, y = small_round
        result = tune_attack(record, quick_atk(), BoConfig(6, 3, seed=3), y)
        best = min(result.trials, key=lambda t: t.f)
        assert result.q_star == best.q

    def test_deterministic(self, small_round):
        record, x, y = small_round
        r1 = tune_attack(record, quick_atk(), BoConfig(5, 3, seed=4), y)
        r2 = tune_attack(record, quick_atk(), BoConfig(5, 3, seed=4), y)
        assert [t.f for t in r1.trials] == [t.f for t in r2.trials]
        assert r1.q_star == r2.q_star
        assert np.array_equal(r1.final.x, r2.final.x)

    def test_cumulative_min_nonincreasing(self, small_round):
        record, x, y = small_round
        result = tune_attack(record, quick_atk(), BoConfig(7, 3, seed=5), y)
        cum = result.cumulative_min()
        assert all(b <= a for a, b in zip(cum, cum[1:]))

    def test_trial_rows_columns(self, small_round):
        record, x, y = small_round
        result = tune_attack(record, quick_atk(), BoConfig(5, 2, seed=6), y)
        rows = trial_rows(result)
        assert len(rows) == 5
        assert list(rows[0]) == ["trial", "phase", "q_cv", "q_bn", "q_fc",
                                 "q_en", "p_mean", "p_var", "f",
                                 "cumulative_min"]
        cums = [r["cumulative_min"] for r in rows]
        assert cums == result.cumulative_min()

    def test_trials_respect_box(self, small_round):
        record, x, y = small_round
        result = tune_attack(record, quick_atk(), BoConfig(6, 3, seed=7), y)
        for t in result.trials:
            arr = t.q.as_array()
            assert np.all(arr[:4] >= 1.0) and np.all(arr[:4] <= 1000.0)
            assert np.all(arr[4:] >= 0.0) and np.all(arr[4:] <= 0.5)

    def test_s4_round_tunes_against_interpolated_epoch(self):
        arch, params = build_model("mlp_small", seed=33, input_shape=(1, 2, 2),
                                   n_classes=3)
        x = synthetic_images(4, (1, 2, 2), seed=34)
        y = synthetic_labels(4, 3, seed=34)
        cfg = TrainingConfig(epochs=2, batches=2, eta=0.01, batch_size=2,
                             shuffle_seed=2)
        record, _ = simulate_round(params, x, y, cfg)
        result = tune_attack(record, quick_atk(), BoConfig(5, 2, seed=8), y)
        assert len(result.trials) == 5
        assert result.final.x.shape == (4, 1, 2, 2)
