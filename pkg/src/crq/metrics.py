"""Quantization-error metrics and the no-retraining baseline.

Two error views per layer: the mean squared gap between full-precision
and quantized weights, and the mean squared gap between the layer
outputs the two weight sets produce on the same input.  Layer inputs
for the output metric come from the full-precision network's forward
pass, so each layer's number is isolated from upstream quantization
error.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from .cluster import SolverConfig
from .errors import DimensionError
from .nn import Batch, Network
from .quantize import QuantizedModel, quantize


def direct_quantize(
    net: Network,
    solver: SolverConfig | None = None,
    exclude: frozenset[int] | None = None,
    provenance: dict | None = None,
) -> QuantizedModel:
    """Quantize a trained network as-is: the no-retraining baseline.

    Same mechanics as ``quantize``; per layer this directly minimizes
    the weight approximation error over ternary weight sets with a
    shared scale.
    """
    return quantize(net, solver=solver, exclude=exclude, provenance=provenance)


def weight_mse(net: Network, model: QuantizedModel) -> dict[int, float]:
    """Per-layer (1/2N) * sum((W - W_q)^2), N = weight count."""
    params = net.parameterized()
    if len(params) != len(model.layers):
        raise DimensionError(f"{len(params)} network layers vs {len(model.layers)} model layers")
    out = {}
    for i, (layer, qlayer) in enumerate(zip(params, model.layers)):
        if layer.weights.shape != tuple(qlayer.shape):
            raise DimensionError(
                f"layer {i}: network shape {layer.weights.shape} vs model shape {qlayer.shape}"
            )
        diff = layer.weights - qlayer.dequantized_weights()
        out[i] = float(np.sum(diff * diff)) / (2 * layer.weights.size)
    return out


def output_mse(net: Network, model: QuantizedModel, batch: Batch) -> dict[int, float]:
    """Per-layer (1/2N) * sum((X W - X W_q)^2), N = output element count.

    X is the layer's input under the full-precision network, fed through
    both weight versions (biases identical, so they cancel).
    """
    qnet = model.to_network()
    fp_params = net.parameterized()
    q_params = qnet.parameterized()
    if len(fp_params) != len(q_params):
        raise DimensionError("model does not match network")
    out = {}
    x = batch.inputs
    param_index = 0
    for layer in net.layers:
        if layer.weights is not None:
            y_fp, _ = layer.forward(x)
            y_q, _ = q_params[param_index].forward(x)
            diff = y_fp - y_q
            out[param_index] = float(np.sum(diff * diff)) / (2 * diff.size)
            x = y_fp
            param_index += 1
        else:
            x, _ = layer.forward(x)
    return out


def _as_batches(data) -> list[Batch]:
    return [data] if isinstance(data, Batch) else list(data)


def evaluate(model_or_net, data, k: int = 1) -> float:
    """Top-k error rate in percent over labeled data.

    ``data`` is a Batch or an iterable of them; k defaults to top-1 and
    must be smaller than the class count.
    """
    batches = _as_batches(data)
    if not batches or all(len(b) == 0 for b in batches):
        raise ValueError("no samples to evaluate")
    net = model_or_net.to_network() if isinstance(model_or_net, QuantizedModel) else model_or_net
    total = 0
    wrong = 0
    for batch in batches:
        logits = net.logits(batch.inputs)
        if k >= logits.shape[1]:
            raise ValueError(f"top-{k} undefined for {logits.shape[1]} classes")
        if k == 1:
            hits = logits.argmax(axis=1) == batch.labels
        else:
            topk = np.argsort(logits, axis=1)[:, -k:]
            hits = (topk == batch.labels[:, None]).any(axis=1)
        total += len(batch)
        wrong += int((~hits).sum())
    return 100.0 * wrong / total


@dataclass(frozen=True)
class ErrorReport:
    """Per-layer quantization errors plus the model's error rate (%)."""

    weight_mse: dict[int, float]
    output_mse: dict[int, float]
    error_rate: float

    def to_dict(self) -> dict:
        return {
            "weight_mse": {str(k): v for k, v in self.weight_mse.items()},
            "output_mse": {str(k): v for k, v in self.output_mse.items()},
            "error_rate": self.error_rate,
        }


def error_report(net: Network, model: QuantizedModel, batches) -> ErrorReport:
    """Full report: weight/output errors against ``net``, error rate on ``batches``."""
    batches = _as_batches(batches)
    merged = Batch(
        np.concatenate([b.inputs for b in batches]),
        np.concatenate([b.labels for b in batches]),
    )
    return ErrorReport(
        weight_mse=weight_mse(net, model),
        output_mse=output_mse(net, model, merged),
        error_rate=evaluate(model, batches),
    )


def write_error_report_json(path, report: ErrorReport) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_error_report_csv(path, report: ErrorReport) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "weight_mse", "output_mse"])
        for i in sorted(report.weight_mse):
            omse = report.output_mse.get(i)
            writer.writerow([i, repr(report.weight_mse[i]), "" if omse is None else repr(omse)])
        writer.writerow(["error_rate_percent", repr(report.error_rate), ""])
