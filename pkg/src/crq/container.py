"""On-disk container for quantized models and training checkpoints.

One binary layout (documented bit-exactly in docs/FORMAT.md) serves
both artifact kinds, extension ``.crq``:

    bytes 0..3    magic b"CRQ1"
    bytes 4..11   header length H, unsigned 64-bit little-endian
    bytes 12..    header: canonical JSON (utf-8, sorted keys, no spaces)
    then          payload blobs, concatenated in header order

Header kinds: "model" (2-bit packed ternary codes for included layers,
raw float64 for excluded ones) and "checkpoint" (raw float64 weights
for every layer, plus epoch counter and generator state).  Biases are
always raw float64.  Writers emit canonical JSON so identical inputs
produce byte-identical files.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CorruptModelError
from .nn import Network, network_from_spec
from .quantize import QuantizedLayer, QuantizedModel

MAGIC = b"CRQ1"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    """Full-precision training snapshot: network, progress, generator state."""

    network: Network
    epoch: int = 0
    seed: int = 0
    config_hash: str = ""
    rng_state: dict | None = field(default=None)


def _canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _write(path, header: dict, payloads: list[bytes]) -> None:
    header_bytes = _canonical_json(header)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header_bytes).to_bytes(8, "little"))
        fh.write(header_bytes)
        for blob in payloads:
            fh.write(blob)


def _read(path) -> tuple[dict, bytes]:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != MAGIC:
        raise CorruptModelError(f"{path}: not a CRQ container")
    header_len = int.from_bytes(data[4:12], "little")
    if 12 + header_len > len(data):
        raise CorruptModelError(f"{path}: truncated header")
    try:
        header = json.loads(data[12 : 12 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptModelError(f"{path}: bad header: {exc}") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CorruptModelError(f"{path}: unsupported format version {header.get('version')}")
    return header, data[12 + header_len :]


def _bias_entry(bias: np.ndarray | None) -> dict | None:
    if bias is None:
        return None
    return {"dtype": "float64", "bytes": bias.size * 8}


def _take(payload: bytes, offset: int, n: int, path) -> tuple[bytes, int]:
    if offset + n > len(payload):
        raise CorruptModelError(f"{path}: truncated payload")
    return payload[offset : offset + n], offset + n


def save_model(path, model: QuantizedModel) -> None:
    """Write a quantized model container."""
    entries = []
    payloads: list[bytes] = []
    for i, layer in enumerate(model.layers):
        if layer.excluded:
            blob = np.ascontiguousarray(layer.weights, dtype=np.float64).tobytes()
            entry = {
                "index": i,
                "kind": layer.kind,
                "shape": list(layer.shape),
                "excluded": True,
                "payload": {"dtype": "float64", "bytes": len(blob)},
            }
        else:
            blob = layer.packed_codes
            entry = {
                "index": i,
                "kind": layer.kind,
                "shape": list(layer.shape),
                "excluded": False,
                "alpha": layer.alpha,
                "payload": {"dtype": "codes2bit", "bytes": len(blob)},
            }
        payloads.append(blob)
        entry["bias"] = _bias_entry(layer.bias)
        if layer.bias is not None:
            payloads.append(np.ascontiguousarray(layer.bias, dtype=np.float64).tobytes())
        entries.append(entry)
    header = {
        "format": "crq-container",
        "version": FORMAT_VERSION,
        "kind": "model",
        "architecture": list(model.architecture),
        "provenance": model.provenance,
        "layers": entries,
    }
    _write(path, header, payloads)


def load_model(path) -> QuantizedModel:
    header, payload = _read(path)
    if header.get("kind") != "model":
        raise CorruptModelError(f"{path}: expected a model container, got {header.get('kind')!r}")
    layers = []
    offset = 0
    for entry in header["layers"]:
        shape = tuple(entry["shape"])
        n = math.prod(shape)
        blob, offset = _take(payload, offset, entry["payload"]["bytes"], path)
        bias = None
        if entry.get("bias") is not None:
            bias_blob, offset = _take(payload, offset, entry["bias"]["bytes"], path)
            bias = np.frombuffer(bias_blob, dtype=np.float64).copy()
        if entry["excluded"]:
            if len(blob) != n * 8:
                raise CorruptModelError(f"{path}: float payload size mismatch")
            weights = np.frombuffer(blob, dtype=np.float64).reshape(shape).copy()
            layers.append(
                QuantizedLayer(
                    kind=entry["kind"], shape=shape, excluded=True, weights=weights, bias=bias
                )
            )
        else:
            if len(blob) != (n + 3) // 4:
                raise CorruptModelError(f"{path}: packed payload size mismatch")
            layers.append(
                QuantizedLayer(
                    kind=entry["kind"],
                    shape=shape,
                    excluded=False,
                    packed_codes=blob,
                    alpha=float(entry["alpha"]),
                    bias=bias,
                )
            )
    if offset != len(payload):
        raise CorruptModelError(f"{path}: {len(payload) - offset} trailing payload bytes")
    return QuantizedModel(
        tuple(header["architecture"]), tuple(layers), dict(header.get("provenance", {}))
    )


def save_checkpoint(path, checkpoint: Checkpoint) -> None:
    """Write a full-precision checkpoint container."""
    net = checkpoint.network
    entries = []
    payloads: list[bytes] = []
    for i, layer in enumerate(net.parameterized()):
        blob = np.ascontiguousarray(layer.weights, dtype=np.float64).tobytes()
        entry = {
            "index": i,
            "kind": layer.kind,
            "shape": list(layer.weights.shape),
            "payload": {"dtype": "float64", "bytes": len(blob)},
            "bias": _bias_entry(layer.bias),
        }
        payloads.append(blob)
        if layer.bias is not None:
            payloads.append(np.ascontiguousarray(layer.bias, dtype=np.float64).tobytes())
        entries.append(entry)
    header = {
        "format": "crq-container",
        "version": FORMAT_VERSION,
        "kind": "checkpoint",
        "architecture": net.spec(),
        "epoch": checkpoint.epoch,
        "seed": checkpoint.seed,
        "config_hash": checkpoint.config_hash,
        "rng_state": checkpoint.rng_state,
        "layers": entries,
    }
    _write(path, header, payloads)


def load_checkpoint(path) -> Checkpoint:
    header, payload = _read(path)
    if header.get("kind") != "checkpoint":
        raise CorruptModelError(
            f"{path}: expected a checkpoint container, got {header.get('kind')!r}"
        )
    net = network_from_spec(header["architecture"])
    params = net.parameterized()
    if len(params) != len(header["layers"]):
        raise CorruptModelError(f"{path}: layer count mismatch")
    offset = 0
    for layer, entry in zip(params, header["layers"]):
        shape = tuple(entry["shape"])
        n = math.prod(shape)
        blob, offset = _take(payload, offset, entry["payload"]["bytes"], path)
        if len(blob) != n * 8:
            raise CorruptModelError(f"{path}: float payload size mismatch")
        layer.weights[...] = np.frombuffer(blob, dtype=np.float64).reshape(shape)
        if entry.get("bias") is not None:
            bias_blob, offset = _take(payload, offset, entry["bias"]["bytes"], path)
            layer.bias[...] = np.frombuffer(bias_blob, dtype=np.float64)
    if offset != len(payload):
        raise CorruptModelError(f"{path}: {len(payload) - offset} trailing payload bytes")
    net.touch()
    return Checkpoint(
        network=net,
        epoch=int(header.get("epoch", 0)),
        seed=int(header.get("seed", 0)),
        config_hash=str(header.get("config_hash", "")),
        rng_state=header.get("rng_state"),
    )


def export_dequantized(path, model: QuantizedModel, epoch: int = 0) -> None:
    """Write a model's dequantized weights as a checkpoint container.

    The result loads through ``load_checkpoint`` and trains like any
    other full-precision network.
    """
    provenance = model.provenance
    checkpoint = Checkpoint(
        network=model.to_network(),
        epoch=epoch,
        seed=int(provenance.get("seed", 0)),
        config_hash=str(provenance.get("config_hash", "")),
        rng_state=None,
    )
    save_checkpoint(path, checkpoint)
