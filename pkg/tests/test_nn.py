import math

import numpy as np
import pytest

from crq.errors import DataError, DimensionError, StaleStateError
from crq.nn import (
    Batch,
    Conv2d,
    Dense,
    Flatten,
    Network,
    Relu,
    mean_loss_accuracy,
    network_from_spec,
    softmax_cross_entropy,
)
from crq.numeric import make_rng

from helpers import assert_grads_close, fd_loss_grads, loop_mlp_loss, two_blob_batch


def small_mlp(dims, seed=0, bias=True):
    layers = []
    for i in range(len(dims) - 1):
        layers.append(Dense(dims[i], dims[i + 1], bias=bias))
        if i < len(dims) - 2:
            layers.append(Relu())
    net = Network(layers)
    net.init_params(make_rng(seed))
    return net


def small_cnn(padding="valid", seed=0):
    net = Network(
        [
            Conv2d(1, 2, 3, padding=padding),
            Relu(),
            Conv2d(2, 3, 3, padding=padding),
            Relu(),
            Flatten(),
            Dense(3 * (2 * 2 if padding == "valid" else 6 * 6), 3),
        ]
    )
    net.init_params(make_rng(seed))
    return net


class TestForward:
    def test_uniform_logits_loss_is_log_c(self):
        for c in (2, 3, 7):
            logits = np.zeros((5, c))
            loss, _ = softmax_cross_entropy(logits, np.zeros(5, dtype=int))
            assert loss == pytest.approx(math.log(c), abs=1e-12)

    def test_confident_logits_beat_uniform(self):
        net = Network([Dense(3, 3, bias=False)])
        net.parameterized()[0].weights[...] = 5.0 * np.eye(3)
        batch = Batch(np.eye(3), np.array([0, 1, 2]))
        confident, _ = net.forward(batch)
        net.parameterized()[0].weights[...] = 0.0
        net.touch()
        uniform, _ = net.forward(batch)
        assert confident < uniform

    def test_matches_scalar_loop_oracle(self):
        net = small_mlp([4, 6, 3], seed=8)
        rng = make_rng(9)
        batch = Batch(rng.normal(size=(7, 4)), rng.integers(0, 3, size=7))
        loss, _ = net.forward(batch)
        params = net.parameterized()
        oracle = loop_mlp_loss(
            [l.weights for l in params], [l.bias for l in params], batch.inputs, batch.labels
        )
        assert loss == pytest.approx(oracle, abs=1e-10)

    def test_shape_mismatch(self):
        net = small_mlp([4, 3])
        with pytest.raises(DimensionError):
            net.forward(Batch(np.zeros((2, 5)), np.zeros(2, dtype=int)))

    def test_label_out_of_range(self):
        net = small_mlp([2, 3])
        with pytest.raises(DataError):
            net.forward(Batch(np.zeros((1, 2)), np.array([3])))


class TestBackward:
    def test_dense_net_matches_finite_differences(self):
        net = small_mlp([2, 16, 3], seed=1)
        rng = make_rng(2)
        batch = Batch(rng.normal(size=(10, 2)), rng.integers(0, 3, size=10))
        _, cache = net.forward(batch)
        analytic = net.backward(cache)
        numeric = fd_loss_grads(net, batch)
        assert_grads_close(analytic, numeric)

    @pytest.mark.parametrize("padding", ["valid", "same"])
    def test_cnn_matches_finite_differences(self, padding):
        net = small_cnn(padding=padding, seed=3)
        rng = make_rng(4)
        batch = Batch(rng.normal(size=(4, 1, 6, 6)), rng.integers(0, 3, size=4))
        _, cache = net.forward(batch)
        analytic = net.backward(cache)
        numeric = fd_loss_grads(net, batch)
        assert_grads_close(analytic, numeric)

    def test_zero_input_gives_zero_weight_gradient(self):
        net = Network([Dense(3, 2, bias=False)])
        net.init_params(make_rng(0))
        batch = Batch(np.zeros((5, 3)), np.zeros(5, dtype=int))
        _, cache = net.forward(batch)
        (grad_w, _), = net.backward(cache)
        np.testing.assert_array_equal(grad_w, 0.0)

    def test_backprop_is_linear_in_loss_scale(self):
        net = small_mlp([3, 5, 2], seed=6)
        rng = make_rng(7)
        batch = Batch(rng.normal(size=(6, 3)), rng.integers(0, 2, size=6))
        _, cache = net.forward(batch)
        base = net.backward(cache)
        cache.grad_logits *= 2.0
        doubled = net.backward(cache)
        for (gw, gb), (gw2, gb2) in zip(base, doubled):
            np.testing.assert_allclose(gw2, 2.0 * gw, rtol=1e-12)
            np.testing.assert_allclose(gb2, 2.0 * gb, rtol=1e-12)

    def test_stale_cache_rejected(self):
        net = small_mlp([2, 2], seed=5)
        batch = Batch(np.ones((1, 2)), np.array([0]))
        _, cache = net.forward(batch)
        grads = net.backward(cache)
        net.sgd_step(grads, 0.1)
        with pytest.raises(StaleStateError):
            net.backward(cache)


class TestSgdStep:
    def test_zero_gradient_is_fixed_point(self):
        net = small_mlp([2, 2], seed=1)
        before = net.parameterized()[0].weights.copy()
        grads = [(np.zeros_like(before), np.zeros(2))]
        net.sgd_step(grads, 0.5)
        np.testing.assert_array_equal(net.parameterized()[0].weights, before)

    def test_direct_arithmetic(self):
        net = Network([Dense(1, 1, bias=False)])
        net.parameterized()[0].weights[...] = 1.0
        net.sgd_step([(np.array([[0.5]]), None)], 0.1)
        assert net.parameterized()[0].weights[0, 0] == pytest.approx(0.95, abs=1e-15)

    def test_two_half_steps_equal_one_step(self):
        grad = np.array([[0.37]])
        a = Network([Dense(1, 1, bias=False)])
        a.parameterized()[0].weights[...] = 1.0
        a.sgd_step([(grad, None)], 0.2)
        b = Network([Dense(1, 1, bias=False)])
        b.parameterized()[0].weights[...] = 1.0
        b.sgd_step([(grad, None)], 0.1)
        b.sgd_step([(grad, None)], 0.1)
        assert b.parameterized()[0].weights[0, 0] == pytest.approx(
            a.parameterized()[0].weights[0, 0], abs=1e-15
        )

    def test_rejects_bad_eta(self):
        net = small_mlp([2, 2])
        with pytest.raises(ValueError):
            net.sgd_step([(np.zeros((2, 2)), np.zeros(2))], 0.0)


class TestTraining:
    def train(self, seed, epochs=30):
        net = small_mlp([2, 8, 2], seed=seed)
        batch = two_blob_batch()
        for _ in range(epochs):
            _, cache = net.forward(batch)
            net.sgd_step(net.backward(cache), 0.1)
        return net

    def test_deterministic_training(self):
        a = self.train(seed=12)
        b = self.train(seed=12)
        for la, lb in zip(a.parameterized(), b.parameterized()):
            np.testing.assert_array_equal(la.weights, lb.weights)
            np.testing.assert_array_equal(la.bias, lb.bias)

    def test_separable_data_reaches_low_loss(self):
        net = small_mlp([2, 8, 2], seed=12)
        batch = two_blob_batch()
        loss = None
        for _ in range(200):
            loss, cache = net.forward(batch)
            net.sgd_step(net.backward(cache), 0.1)
        assert loss < 0.1


class TestStructure:
    def test_spec_round_trip(self):
        net = small_cnn(padding="same", seed=2)
        rebuilt = network_from_spec(net.spec())
        assert rebuilt.spec() == net.spec()

    def test_clone_is_deep(self):
        net = small_mlp([2, 3], seed=2)
        other = net.clone()
        other.parameterized()[0].weights[...] = 0.0
        assert not np.array_equal(net.parameterized()[0].weights, 0.0)

    def test_weights_view_is_flat_row_major(self):
        conv = Conv2d(2, 3, 3)
        assert conv.weights.shape == (3, 2, 3, 3)
        assert conv.weights.ravel().size == 54
        dense = Dense(4, 5)
        assert dense.weights.shape == (4, 5)

    def test_mean_loss_accuracy(self):
        net = small_mlp([2, 2], seed=0)
        batch = two_blob_batch(n_per_class=5)
        loss, acc = mean_loss_accuracy(net, [batch])
        assert 0.0 <= acc <= 1.0
        assert loss > 0.0
