"""Minimal feed-forward stack with manual backpropagation and plain SGD.

Dense and direct 2-D convolution layers plus ReLU and flatten, trained
with softmax cross-entropy.  Everything runs in float64 and is
deterministic for a fixed seed and data order: no dropout, no hidden
global state, no reshuffling inside the training loop.

Weight layout: dense weights are (in, out); convolution weights are
(out_channels, in_channels, kh, kw), row-major, so ``layer.weights.ravel()``
is the flattened per-layer weight vector the clustering solver works on.
Biases are full precision always and are never part of that view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DataError, DimensionError, StaleStateError
from .numeric import DTYPE, as_dense


@dataclass(frozen=True)
class Batch:
    """A batch of inputs with integer class labels."""

    inputs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "inputs", as_dense(self.inputs))
        labels = np.asarray(self.labels, dtype=np.int64)
        if labels.ndim != 1:
            raise DimensionError(f"labels must be 1-D, got shape {labels.shape}")
        if self.inputs.shape[0] != labels.shape[0]:
            raise DimensionError(
                f"{self.inputs.shape[0]} inputs vs {labels.shape[0]} labels"
            )
        if labels.size and labels.min() < 0:
            raise DataError("negative class label")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.shape[0]


def _uniform_init(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(DTYPE)


class Dense:
    """Fully connected layer, weights (in, out)."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.weights = np.zeros((self.in_features, self.out_features), dtype=DTYPE)
        self.bias = np.zeros(self.out_features, dtype=DTYPE) if bias else None

    def spec(self) -> dict:
        return {
            "kind": self.kind,
            "in": self.in_features,
            "out": self.out_features,
            "bias": self.bias is not None,
        }

    def init_params(self, rng: np.random.Generator) -> None:
        self.weights[...] = _uniform_init(
            rng, self.weights.shape, self.in_features, self.out_features
        )
        if self.bias is not None:
            self.bias[...] = 0.0

    def forward(self, x: np.ndarray):
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise DimensionError(
                f"dense layer expects (batch, {self.in_features}), got {x.shape}"
            )
        y = x @ self.weights
        if self.bias is not None:
            y = y + self.bias
        return y, x

    def backward(self, grad_y: np.ndarray, cache):
        x = cache
        grad_w = x.T @ grad_y
        grad_b = grad_y.sum(axis=0) if self.bias is not None else None
        grad_x = grad_y @ self.weights.T
        return grad_x, grad_w, grad_b


class Conv2d:
    """Direct 2-D convolution, stride 1, weights (out_ch, in_ch, kh, kw).

    ``padding`` is "valid" (no padding) or "same" (output keeps the
    input's spatial size).  Direct summation over kernel offsets; at the
    scales this package targets that is plenty fast and easy to audit.
    """

    kind = "conv2d"

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int | tuple[int, int],
        padding: str = "valid",
        bias: bool = True,
    ):
        if isinstance(kernel_size, int):
            kernel_size = (kernel_size, kernel_size)
        if padding not in ("valid", "same"):
            raise ValueError(f"padding must be 'valid' or 'same', got {padding!r}")
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel_size = (int(kernel_size[0]), int(kernel_size[1]))
        self.padding = padding
        kh, kw = self.kernel_size
        self.weights = np.zeros((self.out_channels, self.in_channels, kh, kw), dtype=DTYPE)
        self.bias = np.zeros(self.out_channels, dtype=DTYPE) if bias else None

    def spec(self) -> dict:
        return {
            "kind": self.kind,
            "in_channels": self.in_channels,
            "out_channels": self.out_channels,
            "kernel_size": list(self.kernel_size),
            "padding": self.padding,
            "bias": self.bias is not None,
        }

    def init_params(self, rng: np.random.Generator) -> None:
        kh, kw = self.kernel_size
        fan_in = self.in_channels * kh * kw
        fan_out = self.out_channels * kh * kw
        self.weights[...] = _uniform_init(rng, self.weights.shape, fan_in, fan_out)
        if self.bias is not None:
            self.bias[...] = 0.0

    def _pad(self, x: np.ndarray) -> np.ndarray:
        if self.padding == "valid":
            return x
        kh, kw = self.kernel_size
        top, left = (kh - 1) // 2, (kw - 1) // 2
        bottom, right = kh - 1 - top, kw - 1 - left
        return np.pad(x, ((0, 0), (0, 0), (top, bottom), (left, right)))

    def forward(self, x: np.ndarray):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"conv2d expects (batch, {self.in_channels}, h, w), got {x.shape}"
            )
        kh, kw = self.kernel_size
        xp = self._pad(x)
        ho, wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
        if ho <= 0 or wo <= 0:
            raise DimensionError(f"kernel {self.kernel_size} larger than input {x.shape[2:]}")
        y = np.zeros((x.shape[0], self.out_channels, ho, wo), dtype=DTYPE)
        for ki in range(kh):
            for kj in range(kw):
                patch = xp[:, :, ki : ki + ho, kj : kj + wo]
                y += np.einsum("bchw,oc->bohw", patch, self.weights[:, :, ki, kj])
        if self.bias is not None:
            y += self.bias[None, :, None, None]
        return y, (xp, x.shape)

    def backward(self, grad_y: np.ndarray, cache):
        xp, x_shape = cache
        kh, kw = self.kernel_size
        ho, wo = grad_y.shape[2], grad_y.shape[3]
        grad_w = np.zeros_like(self.weights)
        grad_xp = np.zeros_like(xp)
        for ki in range(kh):
            for kj in range(kw):
                patch = xp[:, :, ki : ki + ho, kj : kj + wo]
                grad_w[:, :, ki, kj] = np.einsum("bohw,bchw->oc", grad_y, patch)
                grad_xp[:, :, ki : ki + ho, kj : kj + wo] += np.einsum(
                    "bohw,oc->bchw", grad_y, self.weights[:, :, ki, kj]
                )
        grad_b = grad_y.sum(axis=(0, 2, 3)) if self.bias is not None else None
        if self.padding == "same":
            top = (kh - 1) // 2
            left = (kw - 1) // 2
            grad_x = grad_xp[:, :, top : top + x_shape[2], left : left + x_shape[3]]
        else:
            grad_x = grad_xp
        return grad_x, grad_w, grad_b


class Relu:
    kind = "relu"
    weights = None
    bias = None

    def spec(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x: np.ndarray):
        return np.maximum(x, 0.0), x

    def backward(self, grad_y: np.ndarray, cache):
        return grad_y * (cache > 0), None, None


class Flatten:
    kind = "flatten"
    weights = None
    bias = None

    def spec(self) -> dict:
        return {"kind": self.kind}

    def forward(self, x: np.ndarray):
        return x.reshape(x.shape[0], -1), x.shape

    def backward(self, grad_y: np.ndarray, cache):
        return grad_y.reshape(cache), None, None


_LAYER_KINDS = {"dense": Dense, "conv2d": Conv2d, "relu": Relu, "flatten": Flatten}


def layer_from_spec(spec: dict):
    kind = spec.get("kind")
    if kind == "dense":
        return Dense(spec["in"], spec["out"], bias=spec.get("bias", True))
    if kind == "conv2d":
        return Conv2d(
            spec["in_channels"],
            spec["out_channels"],
            tuple(spec["kernel_size"]),
            padding=spec.get("padding", "valid"),
            bias=spec.get("bias", True),
        )
    if kind == "relu":
        return Relu()
    if kind == "flatten":
        return Flatten()
    raise ValueError(f"unknown layer kind {kind!r}")


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. logits."""
    n, c = logits.shape
    if labels.size and labels.max() >= c:
        raise DataError(f"label {labels.max()} out of range for {c} classes")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_z
    loss = -float(log_probs[np.arange(n), labels].mean())
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    grad /= n
    return loss, grad


@dataclass
class ForwardCache:
    """Activation record from one forward pass, consumed by backward."""

    version: int
    layer_caches: list
    grad_logits: np.ndarray
    logits: np.ndarray


class Network:
    """Ordered layer list trained with softmax cross-entropy."""

    def __init__(self, layers):
        self.layers = list(layers)
        self._param_version = 0

    # -- structure -------------------------------------------------------

    def spec(self) -> list[dict]:
        return [layer.spec() for layer in self.layers]

    def parameterized(self) -> list:
        """Layers holding weights, in network order."""
        return [layer for layer in self.layers if layer.weights is not None]

    @property
    def param_version(self) -> int:
        return self._param_version

    def touch(self) -> None:
        """Mark parameters as externally modified (invalidates caches)."""
        self._param_version += 1

    def init_params(self, rng: np.random.Generator) -> None:
        for layer in self.parameterized():
            layer.init_params(rng)
        self.touch()

    # -- compute ---------------------------------------------------------

    def logits(self, inputs: np.ndarray) -> np.ndarray:
        x = np.asarray(inputs, dtype=DTYPE)
        for layer in self.layers:
            x, _ = layer.forward(x)
        return x

    def forward(self, batch: Batch):
        """Mean cross-entropy loss plus the cache backward needs."""
        x = batch.inputs
        caches = []
        for layer in self.layers:
            x, cache = layer.forward(x)
            caches.append(cache)
        loss, grad_logits = softmax_cross_entropy(x, batch.labels)
        return loss, ForwardCache(self._param_version, caches, grad_logits, x)

    def backward(self, cache: ForwardCache):
        """Gradients per parameterized layer as (grad_w, grad_b) pairs."""
        if cache.version != self._param_version:
            raise StaleStateError("forward cache predates a parameter update")
        grad = cache.grad_logits
        grads = []
        for layer, layer_cache in zip(reversed(self.layers), reversed(cache.layer_caches)):
            grad, grad_w, grad_b = layer.backward(grad, layer_cache)
            if layer.weights is not None:
                grads.append((grad_w, grad_b))
        grads.reverse()
        return grads

    def sgd_step(self, grads, eta: float) -> None:
        """Plain descent: W <- W - eta * grad for every parameter."""
        if not eta > 0:
            raise ValueError(f"learning rate must be positive, got {eta}")
        params = self.parameterized()
        if len(grads) != len(params):
            raise DimensionError(f"{len(grads)} gradients for {len(params)} layers")
        for layer, (grad_w, grad_b) in zip(params, grads):
            layer.weights -= eta * grad_w
            if layer.bias is not None:
                layer.bias -= eta * grad_b
        self.touch()

    def clone(self) -> "Network":
        """Deep copy with identical parameters."""
        other = network_from_spec(self.spec())
        for src, dst in zip(self.parameterized(), other.parameterized()):
            dst.weights[...] = src.weights
            if src.bias is not None:
                dst.bias[...] = src.bias
        return other


def network_from_spec(specs: list[dict]) -> Network:
    return Network([layer_from_spec(s) for s in specs])


def mean_loss_accuracy(net: Network, batches) -> tuple[float, float]:
    """Sample-weighted mean loss and accuracy over a list of batches."""
    if not batches:
        raise ValueError("no batches to evaluate")
    total = 0
    loss_sum = 0.0
    correct = 0
    for batch in batches:
        logits = net.logits(batch.inputs)
        loss, _ = softmax_cross_entropy(logits, batch.labels)
        n = len(batch)
        total += n
        loss_sum += loss * n
        correct += int((logits.argmax(axis=1) == batch.labels).sum())
    return loss_sum / total, correct / total
