"""Shared test oracles: finite differences and loop-based reimplementations."""

import math

import numpy as np

from crq.nn import Batch, Network


def fd_objective_grads(net: Network, objective, step: float = 1e-5):
    """Central finite differences of a scalar objective() w.r.t. every weight.

    ``objective`` is a zero-argument callable evaluating the current
    parameters.  Returns (grad_w, grad_b) pairs per parameterized layer.
    """
    grads = []
    for layer in net.parameterized():
        grad_w = np.zeros_like(layer.weights)
        flat_w, flat_g = layer.weights.ravel(), grad_w.ravel()
        for i in range(flat_w.size):
            orig = flat_w[i]
            flat_w[i] = orig + step
            net.touch()
            plus = objective()
            flat_w[i] = orig - step
            net.touch()
            minus = objective()
            flat_w[i] = orig
            net.touch()
            flat_g[i] = (plus - minus) / (2.0 * step)
        grad_b = None
        if layer.bias is not None:
            grad_b = np.zeros_like(layer.bias)
            for i in range(layer.bias.size):
                orig = layer.bias[i]
                layer.bias[i] = orig + step
                net.touch()
                plus = objective()
                layer.bias[i] = orig - step
                net.touch()
                minus = objective()
                layer.bias[i] = orig
                net.touch()
                grad_b[i] = (plus - minus) / (2.0 * step)
        grads.append((grad_w, grad_b))
    return grads


def fd_loss_grads(net: Network, batch: Batch, step: float = 1e-5):
    return fd_objective_grads(net, lambda: net.forward(batch)[0], step)


def assert_grads_close(analytic, numeric, rtol=1e-4, atol=1e-7):
    assert len(analytic) == len(numeric)
    for (aw, ab), (nw, nb) in zip(analytic, numeric):
        np.testing.assert_allclose(aw, nw, rtol=rtol, atol=atol)
        if ab is not None or nb is not None:
            np.testing.assert_allclose(ab, nb, rtol=rtol, atol=atol)


def loop_mlp_loss(weights, biases, inputs, labels):
    """Scalar-loop forward for a dense/relu/.../dense net with CE loss.

    Pure Python arithmetic: independent of the package's vectorized path.
    """
    n = len(labels)
    total = 0.0
    for s in range(n):
        act = [float(v) for v in inputs[s]]
        for li, (w, b) in enumerate(zip(weights, biases)):
            rows, cols = w.shape
            out = []
            for j in range(cols):
                acc = b[j] if b is not None else 0.0
                for i in range(rows):
                    acc += act[i] * w[i, j]
                out.append(acc)
            if li < len(weights) - 1:
                out = [v if v > 0 else 0.0 for v in out]
            act = out
        m = max(act)
        z = sum(math.exp(v - m) for v in act)
        log_prob = act[labels[s]] - m - math.log(z)
        total -= log_prob
    return total / n


def two_blob_batch(n_per_class=20, gap=4.0, seed=99):
    """Linearly separable two-class toy data as a single batch."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(n_per_class, 2)) + [gap / 2, 0.0]
    b = rng.normal(size=(n_per_class, 2)) + [-gap / 2, 0.0]
    inputs = np.concatenate([a, b])
    labels = np.array([0] * n_per_class + [1] * n_per_class)
    order = rng.permutation(len(labels))
    return Batch(inputs[order], labels[order])
