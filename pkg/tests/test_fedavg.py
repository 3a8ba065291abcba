import numpy as np
import pytest

from gradinv import autodiff as ad
from gradinv import fedavg, models
from gradinv.fedavg import (RoundRecord, Scenario, ShuffleTrace,
                            TrainingConfig, client_update, model_update,
                            scenario_of, server_aggregate, simulate_round)
from gradinv.models import build_model


@pytest.fixture(scope="module")
def world():
    arch, params = build_model("mlp_small", seed=10, input_shape=(1, 2, 2),
                               n_classes=3)
    rng = np.random.default_rng(4)
    x = rng.uniform(0, 1, (4, 1, 2, 2))
    y = rng.integers(0, 3, 4)
    return arch, params, x, y


class TestTrainingConfig:
    def test_validation(self):
        with pytest.raises(ValueError):
            TrainingConfig(epochs=0, batches=1, eta=0.1, batch_size=1)
        with pytest.raises(ValueError):
            TrainingConfig(epochs=1, batches=1, eta=-0.1, batch_size=1)
        cfg = TrainingConfig(epochs=2, batches=3, eta=0.1, batch_size=4)
        assert cfg.dataset_size == 12

    def test_indivisible_dataset_rejected(self, world):
        _, params, x, y = world
        cfg = TrainingConfig(epochs=1, batches=3, eta=0.1, batch_size=2)
        with pytest.raises(ValueError, match="does not split"):
            client_update(params, x, y, cfg)


class TestClientUpdate:
    def test_single_step_closed_form(self, world):
        _, params, x, y = world
        cfg = TrainingConfig(epochs=1, batches=1, eta=0.05, batch_size=4)
        theta_next, trace = client_update(params, x, y, cfg)
        # bitwise equality needs the client's summation order (the epoch
        # shuffle permutes the full batch even when B = 1)
        perm = trace.permutations[0]
        loss = models.forward_loss(params, x[perm], y[perm])
        grads = ad.grad(loss, list(params.tensors()))
        for p, g, nxt in zip(params.tensors(), grads, theta_next.tensors()):
            assert np.array_equal(nxt.data, p.data - 0.05 * g.data)
        # and the unpermuted closed form agrees to float accumulation noise
        loss0 = models.forward_loss(params, x, y)
        grads0 = ad.grad(loss0, list(params.tensors()))
        for p, g, nxt in zip(params.tensors(), grads0, theta_next.tensors()):
            assert np.abs(nxt.data - (p.data - 0.05 * g.data)).max() < 1e-12

    def test_zero_eta_identity(self, world):
        _, params, x, y = world
        cfg = TrainingConfig(epochs=2, batches=2, eta=0.0, batch_size=2)
        theta_next, _ = client_update(params, x, y, cfg)
        for p, nxt in zip(params.tensors(), theta_next.tensors()):
            assert np.array_equal(nxt.data, p.data)

    def test_replay_oracle_e2_b2(self, world):
        _, params, x, y = world
        cfg = TrainingConfig(epochs=2, batches=2, eta=0.1, batch_size=2,
                             shuffle_seed=77)
        theta_next, trace = client_update(params, x, y, cfg)
        # chain the four single-batch steps manually with the traced perms
        theta = params
        for perm in trace.permutations:
            for b in range(2):
                idx = perm[b * 2:(b + 1) * 2]
                step_cfg = TrainingConfig(epochs=1, batches=1, eta=0.1,
                                          batch_size=2)
                theta, _ = client_update(theta, x[idx], y[idx], step_cfg)
        assert models.params_max_abs_diff(theta, theta_next) < 1e-10

    def test_trace_entries_are_permutations(self, world):
        _, params, x, y = world
        cfg = TrainingConfig(epochs=3, batches=2, eta=0.1, batch_size=2,
                             shuffle_seed=5)
        _, trace = client_update(params, x, y, cfg)
        assert len(trace.permutations) == 3
        for p in trace.permutations:
            assert sorted(p.tolist()) == [0, 1, 2, 3]

    def test_shuffle_deterministic_per_key(self):
        a = fedavg.epoch_permutation(9, 0, 1, 8)
        b = fedavg.epoch_permutation(9, 0, 1, 8)
        c = fedavg.epoch_permutation(9, 0, 2, 8)
        assert np.array_equal(a, b)
        assert not np.array_equal(a, c)


class TestModelUpdate:
    def test_zero_update(self, world):
        _, params, x, y = world
        cfg = TrainingConfig(epochs=1, batches=1, eta=0.0, batch_size=4)
        record, _ = simulate_round(params, x, y, cfg)
        delta = model_update(record)
        assert np.all(delta.flat() == 0.0)

    def test_arithmetic(self, world):
        arch = models.make_fc_single((1, 1, 2), 1)
        p0 = models.ModelParams(arch, [
            (ad.Tensor(np.array([[1.0], [1.0]]), requires_grad=True),
             ad.Tensor(np.array([0.0]), requires_grad=True))])
        p1 = models.ModelParams(arch, [
            (ad.Tensor(np.array([[3.0], [0.0]]), requires_grad=True),
             ad.Tensor(np.array([0.0]), requires_grad=True))])
        cfg = TrainingConfig(epochs=1, batches=1, eta=0.1, batch_size=2)
        record = RoundRecord(p0, p1, cfg, 2)
        delta = model_update(record)
        assert np.array_equal(delta.layers[0][0].data, [[2.0], [-1.0]])

    def test_single_step_update_is_minus_eta_grad(self, world):
        _, params, x, y = world
        eta = 0.02
        cfg = TrainingConfig(epochs=1, batches=1, eta=eta, batch_size=4)
        record, _ = simulate_round(params, x, y, cfg)
        delta = model_update(record)
        loss = models.forward_loss(params, x, y)
        grads = ad.grad(loss, list(params.tensors()))
        flat_grad = np.concatenate([g.data.reshape(-1) for g in grads])
        assert np.abs(delta.flat() + eta * flat_grad).max() < 1e-12

    def test_decomposition_over_steps(self, world):
        _, params, x, y = world
        cfg = TrainingConfig(epochs=2, batches=2, eta=0.1, batch_size=2,
                             shuffle_seed=3)
        record, trace = client_update_record(params, x, y, cfg)
        delta = model_update(record)
        theta = params
        acc = np.zeros_like(delta.flat())
        for perm in trace.permutations:
            for b in range(2):
                idx = perm[b * 2:(b + 1) * 2]
                loss = models.forward_loss(theta, x[idx], y[idx])
                grads = ad.grad(loss, list(theta.tensors()))
                step = -0.1 * np.concatenate([g.data.reshape(-1) for g in grads])
                acc += step
                theta = apply_flat_step(theta, step)
        assert np.abs(acc - delta.flat()).max() < 1e-10


def client_update_record(params, x, y, cfg):
    theta_next, trace = client_update(params, x, y, cfg)
    return RoundRecord(params.detached(), theta_next.detached(), cfg,
                       x.shape[0]), trace


def apply_flat_step(params, flat_step):
    out = []
    pos = 0
    for ts in params.layers:
        layer = []
        for t in ts:
            n = t.data.size
            layer.append(ad.Tensor(
                t.data + flat_step[pos:pos + n].reshape(t.data.shape),
                requires_grad=True))
            pos += n
        out.append(tuple(layer))
    return models.ModelParams(params.arch, out)


class TestServerAggregate:
    def test_equal_sizes_mean(self, world):
        _, params, _, _ = world
        _, other = build_model("mlp_small", seed=11, input_shape=(1, 2, 2),
                               n_classes=3)
        agg = server_aggregate([(params, 5), (other, 5)])
        expected = 0.5 * (params.flat() + other.flat())
        assert np.allclose(agg.flat(), expected, atol=1e-15)

    def test_weights_follow_sizes(self, world):
        _, params, _, _ = world
        _, other = build_model("mlp_small", seed=11, input_shape=(1, 2, 2),
                               n_classes=3)
        agg = server_aggregate([(params, 1), (other, 3)])
        expected = 0.25 * params.flat() + 0.75 * other.flat()
        assert np.allclose(agg.flat(), expected, atol=1e-15)

    def test_single_client_identity(self, world):
        _, params, _, _ = world
        agg = server_aggregate([(params, 7)])
        assert np.array_equal(agg.flat(), params.flat())

    def test_empty_rejected(self):
        with pytest.raises(ValueError, match="no client updates"):
            server_aggregate([])


class TestScenarioOf:
    @pytest.mark.parametrize("e,b,expected", [
        (1, 1, Scenario.S1),
        (4, 1, Scenario.S2),
        (1, 4, Scenario.S3),
        (2, 2, Scenario.S4),
    ])
    def test_mapping(self, e, b, expected):
        cfg = TrainingConfig(epochs=e, batches=b, eta=0.1, batch_size=4)
        assert scenario_of(cfg) is expected


class TestRoundPersistence:
    def test_roundtrip(self, world, tmp_path):
        arch, params, x, y = world
        cfg = TrainingConfig(epochs=2, batches=2, eta=0.01, batch_size=2,
                             shuffle_seed=9)
        record, _ = simulate_round(params, x, y, cfg)
        fedavg.save_round(record, tmp_path / "round", extra={"note": 1})
        loaded, sidecar = fedavg.load_round(tmp_path / "round", arch)
        assert sidecar["E"] == 2 and sidecar["B"] == 2 and sidecar["N"] == 4
        assert sidecar["note"] == 1
        assert models.params_max_abs_diff(loaded.theta_start,
                                          record.theta_start) == 0.0
        assert models.params_max_abs_diff(loaded.theta_end,
                                          record.theta_end) == 0.0
