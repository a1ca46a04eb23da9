"""Hard ternary quantization, 2-bit code packing, and fine-tuning.

``quantize`` replaces every included layer's weights with alpha * codes
from the clustering solver; excluded layers stay full precision.
``finetune`` then trains the quantized model straight-through: each
step projects a full-precision shadow copy onto ternary centers, runs
forward/backward with the projected weights, and applies the raw
gradient back to the shadow copy.

Code packing (normative, see docs/FORMAT.md): 2 bits per code with
00 -> 0, 01 -> +1, 10 -> -1, 11 reserved; four codes per byte starting
at the least significant bit pair; final byte zero-padded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cluster import SolverConfig, solve, update_alpha
from .errors import CorruptModelError, DimensionError
from .nn import Batch, Network, mean_loss_accuracy, network_from_spec
from .train import EpochLog, TrainConfig, default_exclusions, included_indices

FLOAT_BITS = 32  # storage convention for the uncompressed reference


def pack_codes(codes) -> bytes:
    """Pack ternary codes at 2 bits each.

    [+1, -1, 0, +1] packs to the single byte 0x49 (pairs read from the
    least significant end: 01, 10, 00, 01).
    """
    codes = np.asarray(codes).ravel()
    if codes.size == 0:
        return b""
    if not np.isin(codes, (-1, 0, 1)).all():
        raise ValueError("codes must take values in {-1, 0, +1}")
    u = np.zeros(codes.size, dtype=np.uint8)
    u[codes == 1] = 0b01
    u[codes == -1] = 0b10
    pad = (-codes.size) % 4
    if pad:
        u = np.concatenate([u, np.zeros(pad, dtype=np.uint8)])
    quads = u.reshape(-1, 4)
    packed = quads[:, 0] | quads[:, 1] << 2 | quads[:, 2] << 4 | quads[:, 3] << 6
    return packed.astype(np.uint8).tobytes()


def unpack_codes(data: bytes, n: int) -> np.ndarray:
    """Inverse of ``pack_codes`` for a known code count ``n``."""
    if n < 0:
        raise ValueError("code count must be nonnegative")
    expected = (n + 3) // 4
    if len(data) != expected:
        raise CorruptModelError(f"packed payload is {len(data)} bytes, expected {expected}")
    if n == 0:
        return np.zeros(0, dtype=np.int8)
    raw = np.frombuffer(data, dtype=np.uint8)
    pairs = np.stack([(raw >> s) & 0b11 for s in (0, 2, 4, 6)], axis=1).reshape(-1)
    if np.any(pairs[:n] == 0b11):
        raise CorruptModelError("reserved bit pair 11 in packed codes")
    if np.any(pairs[n:] != 0):
        raise CorruptModelError("nonzero padding in final packed byte")
    codes = np.zeros(n, dtype=np.int8)
    codes[pairs[:n] == 0b01] = 1
    codes[pairs[:n] == 0b10] = -1
    return codes


@dataclass(frozen=True)
class QuantizedLayer:
    """One parameterized layer of a quantized model.

    Included layers carry packed ternary codes plus their scale;
    excluded layers carry the full-precision weights unchanged.  Biases
    are always full precision.
    """

    kind: str
    shape: tuple[int, ...]
    excluded: bool
    packed_codes: bytes | None = None
    alpha: float | None = None
    weights: np.ndarray | None = None
    bias: np.ndarray | None = None

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def codes(self) -> np.ndarray:
        if self.excluded:
            raise ValueError("excluded layer has no ternary codes")
        return unpack_codes(self.packed_codes, self.size)

    def dequantized_weights(self) -> np.ndarray:
        if self.excluded:
            return self.weights.copy()
        return (self.alpha * self.codes().astype(np.float64)).reshape(self.shape)


@dataclass(frozen=True)
class QuantizedModel:
    """Ordered quantized layers plus enough structure to rebuild a Network."""

    architecture: tuple[dict, ...]  # Network.spec() of the source network
    layers: tuple[QuantizedLayer, ...]  # one per parameterized layer
    provenance: dict = field(default_factory=dict)  # seed, config_hash, ...

    def excluded_indices(self) -> frozenset[int]:
        return frozenset(i for i, l in enumerate(self.layers) if l.excluded)

    def to_network(self) -> Network:
        """Network with dequantized weights, usable for inference/metrics."""
        net = network_from_spec(list(self.architecture))
        params = net.parameterized()
        if len(params) != len(self.layers):
            raise DimensionError("architecture/layer count mismatch")
        for layer, qlayer in zip(params, self.layers):
            layer.weights[...] = qlayer.dequantized_weights()
            if qlayer.bias is not None:
                layer.bias[...] = qlayer.bias
        net.touch()
        return net


def quantize(
    net: Network,
    solver: SolverConfig | None = None,
    exclude: frozenset[int] | None = None,
    provenance: dict | None = None,
) -> QuantizedModel:
    """Hard-quantize every included layer to alpha * codes.

    ``exclude`` indexes parameterized layers; None keeps the first and
    last at full precision.  The solver runs to convergence per layer,
    so quantizing an already-ternary network is the identity.
    """
    params = net.parameterized()
    excluded = default_exclusions(len(params)) if exclude is None else frozenset(exclude)
    layers = []
    for i, layer in enumerate(params):
        bias = None if layer.bias is None else layer.bias.copy()
        if i in excluded:
            layers.append(
                QuantizedLayer(
                    kind=layer.kind,
                    shape=layer.weights.shape,
                    excluded=True,
                    weights=layer.weights.copy(),
                    bias=bias,
                )
            )
        else:
            sol = solve(layer.weights.ravel(), solver)
            layers.append(
                QuantizedLayer(
                    kind=layer.kind,
                    shape=layer.weights.shape,
                    excluded=False,
                    packed_codes=pack_codes(sol.codes),
                    alpha=sol.alpha,
                    bias=bias,
                )
            )
    return QuantizedModel(tuple(net.spec()), tuple(layers), dict(provenance or {}))


@dataclass
class ShadowState:
    """Full-precision weights maintained alongside the quantized model."""

    weights: list[np.ndarray]  # per parameterized layer
    biases: list[np.ndarray | None]

    @classmethod
    def from_network(cls, net: Network) -> "ShadowState":
        params = net.parameterized()
        return cls(
            weights=[l.weights.copy() for l in params],
            biases=[None if l.bias is None else l.bias.copy() for l in params],
        )


def _project(shadow_w: np.ndarray, solver: SolverConfig, frozen_codes, freeze: bool):
    """Ternary projection of one shadow weight tensor.

    Returns (projected weights, codes, alpha).  With freeze=True the
    codes are pinned and only alpha is refit in closed form.
    """
    flat = shadow_w.ravel()
    if freeze and frozen_codes is not None:
        alpha = update_alpha(flat, frozen_codes)
        if alpha is None or alpha < 0:
            alpha = 0.0
        codes = frozen_codes
    else:
        sol = solve(flat, solver)
        codes, alpha = sol.codes, sol.alpha
    return (alpha * codes.astype(np.float64)).reshape(shadow_w.shape), codes, alpha


def finetune(
    model: QuantizedModel,
    shadow: ShadowState,
    batches,
    config: TrainConfig,
    val_batches=None,
) -> tuple[QuantizedModel, list[EpochLog]]:
    """Straight-through fine-tuning of a quantized model.

    Per step: project the shadow weights of every included layer onto
    ternary centers, forward/backward with the projected weights, and
    apply the gradients unchanged to the shadow copy.  Excluded layers
    and biases train at full precision.  The returned model is the
    projection of the final shadow state; the log mirrors ``retrain``'s
    with metrics measured on the projected (quantized) network.
    """
    batches = list(batches)
    if not batches:
        raise ValueError("empty batch stream")
    net = network_from_spec(list(model.architecture))
    params = net.parameterized()
    if len(params) != len(shadow.weights):
        raise DimensionError("shadow state does not match model architecture")
    excluded = model.excluded_indices()
    included = [i for i in range(len(params)) if i not in excluded]

    # Excluded weights and all biases alias the shadow arrays, so their
    # plain SGD updates are visible to the working network immediately.
    for i, layer in enumerate(params):
        if i in excluded:
            layer.weights = shadow.weights[i]
        if layer.bias is not None:
            layer.bias = shadow.biases[i]

    frozen: dict[int, np.ndarray] = {}
    if config.freeze_codes:
        for i in included:
            frozen[i] = solve(shadow.weights[i].ravel(), config.solver).codes

    def project_included() -> dict[int, tuple[np.ndarray, float]]:
        out = {}
        for i in included:
            projected, codes, alpha = _project(
                shadow.weights[i], config.solver, frozen.get(i), config.freeze_codes
            )
            params[i].weights = projected
            out[i] = (codes, alpha)
        net.touch()
        return out

    logs: list[EpochLog] = []
    solutions = project_included()
    for epoch in range(1, config.epochs + 1):
        eta = config.eta
        for batch in batches:
            solutions = project_included()
            _, cache = net.forward(batch)
            grads = net.backward(cache)
            for i in range(len(params)):
                grad_w, grad_b = grads[i]
                shadow.weights[i] -= eta * grad_w
                if shadow.biases[i] is not None:
                    shadow.biases[i] -= eta * grad_b
            net.touch()
        solutions = project_included()
        loss, acc = mean_loss_accuracy(net, batches)
        val_acc = mean_loss_accuracy(net, val_batches)[1] if val_batches else None
        alphas = tuple(solutions[i][1] for i in included)
        total_j = float(
            sum(
                np.sum((shadow.weights[i].ravel() - solutions[i][1] * solutions[i][0]) ** 2)
                for i in included
            )
        )
        logs.append(EpochLog(epoch, loss, acc, total_j, alphas, val_acc))

    solutions = project_included()
    layers = []
    for i, qlayer in enumerate(model.layers):
        bias = None if shadow.biases[i] is None else shadow.biases[i].copy()
        if i in excluded:
            layers.append(
                QuantizedLayer(
                    kind=qlayer.kind,
                    shape=qlayer.shape,
                    excluded=True,
                    weights=shadow.weights[i].copy(),
                    bias=bias,
                )
            )
        else:
            codes, alpha = solutions[i]
            layers.append(
                QuantizedLayer(
                    kind=qlayer.kind,
                    shape=qlayer.shape,
                    excluded=False,
                    packed_codes=pack_codes(codes),
                    alpha=alpha,
                    bias=bias,
                )
            )
    return QuantizedModel(model.architecture, tuple(layers), dict(model.provenance)), logs


def compression_ratio(model: QuantizedModel) -> float:
    """Float32 storage bits over quantized storage bits.

    Included layers cost 2 bits per weight plus one float32 scale;
    excluded layers count at full precision on both sides.  Exact code
    bits (2 per weight), not padded bytes.
    """
    numerator = 0
    denominator = 0
    for layer in model.layers:
        numerator += layer.size * FLOAT_BITS
        if layer.excluded:
            denominator += layer.size * FLOAT_BITS
        else:
            denominator += 2 * layer.size + FLOAT_BITS
    if denominator == 0:
        raise ValueError("model has no weights")
    return numerator / denominator
