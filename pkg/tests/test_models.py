import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradinv import autodiff as ad
from gradinv import models
from gradinv.autodiff import Tensor
from gradinv.models import (build_model, forward_loss, init_params,
                            layer_partition, load_params, make_fc_single,
                            save_params)


class TestBuildModel:
    def test_cnn_small_layer_kind_counts(self):
        arch, _ = build_model("cnn_small", seed=0)
        kinds = [spec.kind for spec in arch.layers]
        assert kinds.count(models.CONV) == 2
        assert kinds.count(models.BATCH_NORM) == 2
        assert kinds.count(models.FULLY_CONNECTED) == 1
        assert arch.n_layers == 5

    def test_same_seed_bit_identical(self):
        _, p1 = build_model("cnn_small", seed=123)
        _, p2 = build_model("cnn_small", seed=123)
        for a, b in zip(p1.tensors(), p2.tensors()):
            assert np.array_equal(a.data, b.data)
        _, p3 = build_model("cnn_small", seed=124)
        assert not all(np.array_equal(a.data, b.data)
                       for a, b in zip(p1.tensors(), p3.tensors()))

    def test_mlp_small_param_count(self):
        # d_x = 12, 4 classes: 12*32 + 32 + 32*4 + 4
        _, params = build_model("mlp_small", seed=0, input_shape=(3, 2, 2),
                                n_classes=4)
        assert params.n_params == 12 * 32 + 32 + 32 * 4 + 4

    def test_unknown_arch(self):
        with pytest.raises(ValueError, match="unknown architecture"):
            build_model("resnet18", seed=0)

    def test_init_bounds(self):
        arch, params = build_model("mlp_small", seed=5, input_shape=(3, 4, 4))
        w = params.layers[0][0].data
        a = 1.0 / math.sqrt(arch.layers[0].fan_in())
        assert np.all(np.abs(w) <= a)


class TestForwardLoss:
    def test_uniform_logits_loss_is_log_classes(self):
        arch = make_fc_single((1, 2, 2), 10)
        params = models.ModelParams(arch, [
            (Tensor(np.zeros((4, 10)), requires_grad=True),
             Tensor(np.zeros(10), requires_grad=True))])
        x = np.random.default_rng(0).uniform(0, 1, (3, 1, 2, 2))
        loss = forward_loss(params, x, np.array([0, 5, 9]))
        assert loss.item() == pytest.approx(math.log(10.0), abs=1e-12)

    def test_duplicated_sample_batch(self):
        arch, params = build_model("mlp_small", seed=2, input_shape=(1, 2, 2),
                                   n_classes=3)
        rng = np.random.default_rng(1)
        x = rng.uniform(0, 1, (1, 1, 2, 2))
        single = forward_loss(params, x, np.array([1])).item()
        double = forward_loss(params, np.concatenate([x, x]),
                              np.array([1, 1])).item()
        assert double == pytest.approx(single, abs=1e-14)

    def test_label_out_of_range(self):
        arch, params = build_model("mlp_small", seed=2, input_shape=(1, 2, 2),
                                   n_classes=3)
        with pytest.raises(ValueError, match="label out of range"):
            forward_loss(params, np.zeros((1, 1, 2, 2)), np.array([3]))

    def test_grad_wrt_input_vs_fd(self):
        arch, params = build_model("mlp_small", seed=3, input_shape=(1, 2, 2),
                                   n_classes=3)
        rng = np.random.default_rng(2)
        x0 = rng.uniform(0, 1, (2, 1, 2, 2))
        y = np.array([0, 2])

        def f(t):
            return forward_loss(params, t, y)

        x = Tensor(x0, requires_grad=True)
        (g,) = ad.grad(f(x), [x])
        fd = ad.finite_diff_gradient(f, x)
        assert np.abs(g.data - fd.data).max() / np.abs(fd.data).max() < 1e-4

    def test_loss_nonnegative(self):
        arch, params = build_model("cnn_small", seed=4)
        rng = np.random.default_rng(3)
        x = rng.uniform(0, 1, (4, 3, 8, 8))
        y = rng.integers(0, 10, 4)
        assert forward_loss(params, x, y).item() >= 0.0

    @settings(max_examples=10, deadline=None)
    @given(st.integers(0, 2**16))
    def test_mlp_loss_permutation_invariant(self, seed):
        arch, params = build_model("mlp_small", seed=9, input_shape=(1, 2, 2),
                                   n_classes=3)
        rng = np.random.default_rng(seed)
        x = rng.uniform(0, 1, (4, 1, 2, 2))
        y = rng.integers(0, 3, 4)
        perm = rng.permutation(4)
        a = forward_loss(params, x, y).item()
        b = forward_loss(params, x[perm], y[perm]).item()
        assert a == pytest.approx(b, abs=1e-12)

    def test_cnn_loss_permutation_invariant(self):
        arch, params = build_model("cnn_small", seed=9)
        rng = np.random.default_rng(12)
        x = rng.uniform(0, 1, (4, 3, 8, 8))
        y = rng.integers(0, 10, 4)
        perm = np.array([2, 0, 3, 1])
        a = forward_loss(params, x, y).item()
        b = forward_loss(params, x[perm], y[perm]).item()
        assert a == pytest.approx(b, abs=1e-12)


class TestLayerPartition:
    def test_cnn_small_positions(self):
        arch, _ = build_model("cnn_small", seed=0)
        conv, bn, fc = layer_partition(arch)
        assert conv == [0, 2]
        assert bn == [1, 3]
        assert fc == [4]

    def test_mlp_small_positions(self):
        arch, _ = build_model("mlp_small", seed=0)
        assert layer_partition(arch) == ([], [], [0, 1])

    def test_partition_property(self):
        for name in ("mlp_small", "cnn_small"):
            arch, _ = build_model(name, seed=0)
            conv, bn, fc = layer_partition(arch)
            assert sorted(conv + bn + fc) == list(range(arch.n_layers))
            assert conv == sorted(conv) and bn == sorted(bn) and fc == sorted(fc)


class TestSerialization:
    def test_roundtrip_bit_exact(self, tmp_path):
        arch, params = build_model("cnn_small", seed=21)
        path = tmp_path / "params.bin"
        save_params(params, path)
        loaded = load_params(path, arch)
        for a, b in zip(params.tensors(), loaded.tensors()):
            assert np.array_equal(a.data, b.data)

    def test_deterministic_bytes(self, tmp_path):
        arch, params = build_model("mlp_small", seed=8, input_shape=(1, 3, 3))
        p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
        save_params(params, p1)
        save_params(params, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_arch_mismatch_rejected(self, tmp_path):
        arch, params = build_model("cnn_small", seed=1)
        other, _ = build_model("mlp_small", seed=1)
        path = tmp_path / "params.bin"
        save_params(params, path)
        with pytest.raises(ValueError, match="expected"):
            load_params(path, other)


class TestParamsArithmetic:
    def test_sub_add_scale(self):
        arch, a = build_model("mlp_small", seed=1, input_shape=(1, 2, 2))
        _, b = build_model("mlp_small", seed=2, input_shape=(1, 2, 2))
        diff = models.params_sub(b, a)
        back = models.params_add(a, diff)
        assert models.params_max_abs_diff(back, b) < 1e-15
        twice = models.params_scale(diff, 2.0)
        assert np.allclose(twice.flat(), 2.0 * diff.flat())

    def test_mismatched_arch_rejected(self):
        _, a = build_model("mlp_small", seed=1, input_shape=(1, 2, 2))
        _, b = build_model("cnn_small", seed=1)
        with pytest.raises(ValueError, match="architecture mismatch"):
            models.params_sub(a, b)
