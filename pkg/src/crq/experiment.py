"""Experiment configuration and stage orchestration.

Stages run in the fixed order pretrain -> retrain -> quantize ->
finetune -> evaluate -> compare; each one reads its predecessor's
artifact from the output directory and writes its own.  All randomness
flows from the single config seed through per-stage child generators
(see ``numeric.stage_rng``), so a stage rerun in isolation sees exactly
the stream it would inside a full run and identical configs produce
byte-identical artifacts.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .cluster import SolverConfig
from .container import Checkpoint, export_dequantized, load_checkpoint, load_model, save_checkpoint, save_model
from .datasets import DataSplit, build_split, load_csv, load_idx, make_blobs, make_spirals
from .errors import ConfigError
from .metrics import ErrorReport, direct_quantize, evaluate, output_mse, weight_mse, write_error_report_csv, write_error_report_json
from .nn import Batch, Conv2d, Dense, Flatten, Network, Relu
from .numeric import stage_rng
from .quantize import QuantizedModel, ShadowState, finetune, quantize
from .train import EpochLog, TrainConfig, included_indices, read_training_log_csv, retrain, write_training_log_csv

STAGES = ("pretrain", "retrain", "quantize", "finetune", "evaluate", "compare")

ARTIFACTS = {
    "pretrain": "pretrain_checkpoint.crq",
    "pretrain_log": "pretrain_log.csv",
    "retrain": "retrain_checkpoint.crq",
    "retrain_log": "retrain_log.csv",
    "quantize": "quantized_model.crq",
    "dequantized": "quantized_model_dequantized.crq",
    "finetune": "finetuned_model.crq",
    "finetune_log": "finetune_log.csv",
    "eval_json": "eval_report.json",
    "eval_csv": "eval_report.csv",
    "comparison_csv": "comparison.csv",
    "comparison_json": "comparison.json",
    "curves": "curves.csv",
}

_DATASET_KEYS = {
    "blobs": {"type", "classes", "samples", "radius", "spread"},
    "spirals": {"type", "classes", "samples", "noise", "turns"},
    "csv": {"type", "path"},
    "idx": {"type", "images", "labels"},
}

_ARCH_KEYS = {
    "mlp": {"type", "dims"},
    "cnn": {"type", "conv_channels", "kernel", "padding", "hidden"},
}

_SOLVER_KEYS = {"alpha_tolerance", "max_iterations", "alpha_floor"}

_TOP_KEYS = {
    "dataset",
    "architecture",
    "seed",
    "out_dir",
    "stages",
    "lam",
    "eta",
    "batch_size",
    "pretrain_epochs",
    "retrain_epochs",
    "finetune_epochs",
    "val_fraction",
    "exclude_layers",
    "solver",
    "decay_epochs",
    "refresh",
    "freeze_codes",
}


def _check_keys(mapping: dict, allowed: set, where: str) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ConfigError(f"unknown {where} keys: {', '.join(unknown)}")


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated description of one experiment run."""

    dataset: dict = field(default_factory=lambda: {"type": "blobs", "classes": 4, "samples": 800})
    architecture: dict = field(default_factory=lambda: {"type": "mlp", "dims": [2, 32, 32, 4]})
    seed: int = 0
    out_dir: str = "out"
    stages: tuple[str, ...] = STAGES
    lam: float = 0.001
    eta: float = 0.2
    batch_size: int = 32
    pretrain_epochs: int = 150
    retrain_epochs: int = 200
    finetune_epochs: int = 20
    val_fraction: float = 0.2
    exclude_layers: tuple[int, ...] | None = None
    solver: SolverConfig = field(default_factory=SolverConfig)
    decay_epochs: tuple[int, ...] = ()
    refresh: str = "batch"
    freeze_codes: bool = False

    def __post_init__(self):
        dtype = self.dataset.get("type")
        if dtype not in _DATASET_KEYS:
            raise ConfigError(f"unknown dataset type {dtype!r}")
        _check_keys(self.dataset, _DATASET_KEYS[dtype], f"dataset ({dtype})")
        atype = self.architecture.get("type")
        if atype not in _ARCH_KEYS:
            raise ConfigError(f"unknown architecture type {atype!r}")
        _check_keys(self.architecture, _ARCH_KEYS[atype], f"architecture ({atype})")
        bad = sorted(set(self.stages) - set(STAGES))
        if bad:
            raise ConfigError(f"unknown stages: {', '.join(bad)}")
        if self.lam < 0:
            raise ConfigError("lam must be nonnegative")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        for name in ("batch_size", "pretrain_epochs", "retrain_epochs", "finetune_epochs"):
            if getattr(self, name) < 0 or (name == "batch_size" and self.batch_size == 0):
                raise ConfigError(f"{name} must be positive")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must be in [0, 1)")
        if self.refresh not in ("batch", "epoch"):
            raise ConfigError("refresh must be 'batch' or 'epoch'")
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))
        if self.exclude_layers is not None:
            object.__setattr__(
                self, "exclude_layers", tuple(sorted(int(i) for i in self.exclude_layers))
            )

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        _check_keys(raw, _TOP_KEYS, "config")
        kwargs = dict(raw)
        if "solver" in kwargs:
            _check_keys(kwargs["solver"], _SOLVER_KEYS, "solver")
            kwargs["solver"] = SolverConfig(**kwargs["solver"])
        if "stages" in kwargs:
            kwargs["stages"] = tuple(kwargs["stages"])
        if "exclude_layers" in kwargs and kwargs["exclude_layers"] is not None:
            kwargs["exclude_layers"] = tuple(kwargs["exclude_layers"])
        return cls(**kwargs)

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset,
            "architecture": self.architecture,
            "seed": self.seed,
            "out_dir": self.out_dir,
            "stages": list(self.stages),
            "lam": self.lam,
            "eta": self.eta,
            "batch_size": self.batch_size,
            "pretrain_epochs": self.pretrain_epochs,
            "retrain_epochs": self.retrain_epochs,
            "finetune_epochs": self.finetune_epochs,
            "val_fraction": self.val_fraction,
            "exclude_layers": None if self.exclude_layers is None else list(self.exclude_layers),
            "solver": {
                "alpha_tolerance": self.solver.alpha_tolerance,
                "max_iterations": self.solver.max_iterations,
                "alpha_floor": self.solver.alpha_floor,
            },
            "decay_epochs": list(self.decay_epochs),
            "refresh": self.refresh,
            "freeze_codes": self.freeze_codes,
        }

    def config_hash(self) -> str:
        # out_dir and stage selection do not change what gets computed
        payload = self.to_dict()
        payload.pop("out_dir")
        payload.pop("stages")
        blob = json.dumps(payload, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def train_config(self, lam: float, epochs: int) -> TrainConfig:
        return TrainConfig(
            eta=self.eta,
            lam=lam,
            epochs=epochs,
            solver=self.solver,
            exclude_layers=None if self.exclude_layers is None else frozenset(self.exclude_layers),
            seed=self.seed,
            refresh=self.refresh,
            decay_epochs=self.decay_epochs,
            freeze_codes=self.freeze_codes,
        )

    def exclude_set(self) -> frozenset[int] | None:
        return None if self.exclude_layers is None else frozenset(self.exclude_layers)


# -- data and model construction ----------------------------------------


def ingest_dataset(config: ExperimentConfig) -> DataSplit:
    """Build the train/validation batch streams the config describes."""
    spec = config.dataset
    rng = stage_rng(config.seed, "data")
    kind = spec["type"]
    if kind == "blobs":
        inputs, labels = make_blobs(
            spec.get("samples", 800),
            spec.get("classes", 4),
            rng,
            radius=spec.get("radius", 2.0),
            spread=spec.get("spread", 0.6),
        )
    elif kind == "spirals":
        inputs, labels = make_spirals(
            spec.get("samples", 800),
            spec.get("classes", 2),
            rng,
            noise=spec.get("noise", 0.08),
            turns=spec.get("turns", 1.75),
        )
    elif kind == "csv":
        inputs, labels = load_csv(spec["path"])
        order = rng.permutation(len(labels))
        inputs, labels = inputs[order], labels[order]
    else:  # idx
        inputs, labels = load_idx(spec["images"], spec["labels"])
        order = rng.permutation(len(labels))
        inputs, labels = inputs[order], labels[order]
    return build_split(inputs, labels, config.batch_size, config.val_fraction)


def build_network(config: ExperimentConfig, data: DataSplit) -> Network:
    """Uninitialized network matching the architecture and the data."""
    arch = config.architecture
    n_features = int(np.prod(data.input_shape))
    if arch["type"] == "mlp":
        dims = list(arch["dims"])
        if len(dims) < 2:
            raise ConfigError("mlp dims need at least input and output sizes")
        if dims[0] != n_features:
            raise ConfigError(f"mlp input dim {dims[0]} but data has {n_features} features")
        if dims[-1] != data.n_classes:
            raise ConfigError(f"mlp output dim {dims[-1]} but data has {data.n_classes} classes")
        layers = []
        if len(data.input_shape) > 1:
            layers.append(Flatten())
        for i in range(len(dims) - 1):
            layers.append(Dense(dims[i], dims[i + 1]))
            if i < len(dims) - 2:
                layers.append(Relu())
        return Network(layers)

    if len(data.input_shape) != 3:
        raise ConfigError(f"cnn needs (channels, h, w) inputs, got shape {data.input_shape}")
    channels, h, w = data.input_shape
    kernel = int(arch.get("kernel", 3))
    padding = arch.get("padding", "same")
    layers = []
    for out_channels in arch.get("conv_channels", [4]):
        layers.append(Conv2d(channels, int(out_channels), kernel, padding=padding))
        layers.append(Relu())
        channels = int(out_channels)
        if padding == "valid":
            h, w = h - kernel + 1, w - kernel + 1
            if h <= 0 or w <= 0:
                raise ConfigError("cnn spatial size exhausted by valid padding")
    layers.append(Flatten())
    width = channels * h * w
    for hidden in arch.get("hidden", []):
        layers.append(Dense(width, int(hidden)))
        layers.append(Relu())
        width = int(hidden)
    layers.append(Dense(width, data.n_classes))
    return Network(layers)


# -- paired comparison ----------------------------------------------------


@dataclass
class ArmResult:
    """One quantization route measured on the shared data split."""

    name: str
    retrain_logs: list[EpochLog]
    weight_mse: dict[int, float]  # vs the arm's pre-quantization network
    postq_error: float  # validation error % straight after quantization
    finetune_logs: list[EpochLog]
    final_error: float  # validation error % after fine-tuning
    model: QuantizedModel


@dataclass
class ComparisonResult:
    """Reference plus all arms of the paired experiment."""

    ref_error: float
    pretrain_logs: list[EpochLog]
    arms: dict[str, ArmResult]

    def rows(self) -> list[dict]:
        out = []
        for name in ("direct", "lambda0", "crq"):
            arm = self.arms[name]
            out.append(
                {
                    "method": name,
                    "ref_error_percent": self.ref_error,
                    "error_percent": arm.final_error,
                    "error_drop_percent": self.ref_error - arm.final_error,
                }
            )
        return out


def _run_arm(
    name: str,
    pretrained: Network,
    data: DataSplit,
    config: ExperimentConfig,
    lam: float | None,
) -> ArmResult:
    """lam None = direct quantization of the pretrained network."""
    provenance = {"seed": config.seed, "config_hash": config.config_hash()}
    if lam is None:
        source = pretrained.clone()
        retrain_logs: list[EpochLog] = []
    else:
        source = pretrained.clone()
        source, retrain_logs = retrain(
            source, data.train, config.train_config(lam, config.retrain_epochs), data.val
        )
    model = quantize(source, config.solver, config.exclude_set(), provenance)
    mse = weight_mse(source, model)
    postq_error = evaluate(model, data.val)
    shadow = ShadowState.from_network(source)
    model_ft, ft_logs = finetune(
        model, shadow, data.train, config.train_config(config.lam, config.finetune_epochs), data.val
    )
    return ArmResult(name, retrain_logs, mse, postq_error, ft_logs, evaluate(model_ft, data.val), model_ft)


def run_comparison(
    config: ExperimentConfig, pretrained: Network, data: DataSplit, pretrain_logs: list[EpochLog]
) -> ComparisonResult:
    """CRQ vs plain-retrain (lam = 0) vs direct quantization, shared pretrain."""
    return ComparisonResult(
        ref_error=evaluate(pretrained, data.val),
        pretrain_logs=pretrain_logs,
        arms={
            "direct": _run_arm("direct", pretrained, data, config, None),
            "lambda0": _run_arm("lambda0", pretrained, data, config, 0.0),
            "crq": _run_arm("crq", pretrained, data, config, config.lam),
        },
    )


# -- report emission ------------------------------------------------------

CURVE_SERIES = ("full_precision", "lambda0", "crq")


def emit_report(
    training_logs: dict[str, list[EpochLog]],
    comparison_rows: list[dict],
    out_dir,
) -> list[str]:
    """Write the training-curve CSV and the comparison table (CSV + JSON).

    ``training_logs`` maps series name -> per-epoch logs; accuracy is
    emitted in percent.  Returns a list of warnings (empty logs still
    produce header-only files).
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    warnings = []

    series = {name: training_logs.get(name, []) for name in CURVE_SERIES}
    for name, logs in series.items():
        if not logs:
            warnings.append(f"empty training log for series {name!r}")
    depth = max((len(logs) for logs in series.values()), default=0)
    with open(out_dir / ARTIFACTS["curves"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch"] + [f"train_acc_percent_{name}" for name in CURVE_SERIES])
        for row_idx in range(depth):
            row = [row_idx + 1]
            for name in CURVE_SERIES:
                logs = series[name]
                row.append(repr(100.0 * logs[row_idx].train_acc) if row_idx < len(logs) else "")
            writer.writerow(row)

    if not comparison_rows:
        warnings.append("no comparison rows")
    with open(out_dir / ARTIFACTS["comparison_csv"], "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["method", "ref_error_percent", "error_percent", "error_drop_percent"])
        for row in comparison_rows:
            writer.writerow(
                [
                    row["method"],
                    repr(row["ref_error_percent"]),
                    repr(row["error_percent"]),
                    repr(row["error_drop_percent"]),
                ]
            )
    with open(out_dir / ARTIFACTS["comparison_json"], "w") as fh:
        json.dump(comparison_rows, fh, sort_keys=True, indent=2)
        fh.write("\n")

    for warning in warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return warnings


# -- stages ---------------------------------------------------------------


def _require(out_dir: Path, artifact: str, stage: str, producer: str) -> Path:
    path = out_dir / ARTIFACTS[artifact]
    if not path.exists():
        raise ConfigError(
            f"stage '{stage}' needs {path.name}; run the '{producer}' stage first"
        )
    return path


def _stage_pretrain(config: ExperimentConfig, out_dir: Path, data: DataSplit) -> None:
    net = build_network(config, data)
    init_rng = stage_rng(config.seed, "init")
    net.init_params(init_rng)
    tc = config.train_config(0.0, config.pretrain_epochs)
    net, logs = retrain(net, data.train, tc, data.val)
    checkpoint = Checkpoint(
        network=net,
        epoch=config.pretrain_epochs,
        seed=config.seed,
        config_hash=config.config_hash(),
        rng_state=init_rng.bit_generator.state,
    )
    save_checkpoint(out_dir / ARTIFACTS["pretrain"], checkpoint)
    write_training_log_csv(out_dir / ARTIFACTS["pretrain_log"], logs, included_indices(net, tc))


def _stage_retrain(config: ExperimentConfig, out_dir: Path, data: DataSplit) -> None:
    checkpoint = load_checkpoint(_require(out_dir, "pretrain", "retrain", "pretrain"))
    tc = config.train_config(config.lam, config.retrain_epochs)
    net, logs = retrain(checkpoint.network, data.train, tc, data.val)
    save_checkpoint(
        out_dir / ARTIFACTS["retrain"],
        Checkpoint(
            network=net,
            epoch=checkpoint.epoch + config.retrain_epochs,
            seed=config.seed,
            config_hash=config.config_hash(),
            rng_state=checkpoint.rng_state,
        ),
    )
    write_training_log_csv(out_dir / ARTIFACTS["retrain_log"], logs, included_indices(net, tc))


def _stage_quantize(config: ExperimentConfig, out_dir: Path, data: DataSplit) -> None:
    checkpoint = load_checkpoint(_require(out_dir, "retrain", "quantize", "retrain"))
    model = quantize(
        checkpoint.network,
        config.solver,
        config.exclude_set(),
        {"seed": config.seed, "config_hash": config.config_hash()},
    )
    save_model(out_dir / ARTIFACTS["quantize"], model)
    export_dequantized(out_dir / ARTIFACTS["dequantized"], model, epoch=checkpoint.epoch)


def _stage_finetune(config: ExperimentConfig, out_dir: Path, data: DataSplit) -> None:
    model = load_model(_require(out_dir, "quantize", "finetune", "quantize"))
    checkpoint = load_checkpoint(_require(out_dir, "retrain", "finetune", "retrain"))
    shadow = ShadowState.from_network(checkpoint.network)
    tc = config.train_config(config.lam, config.finetune_epochs)
    model_ft, logs = finetune(model, shadow, data.train, tc, data.val)
    save_model(out_dir / ARTIFACTS["finetune"], model_ft)
    included = [i for i in range(len(model_ft.layers)) if not model_ft.layers[i].excluded]
    write_training_log_csv(out_dir / ARTIFACTS["finetune_log"], logs, included)


def _stage_evaluate(config: ExperimentConfig, out_dir: Path, data: DataSplit) -> None:
    finetuned = out_dir / ARTIFACTS["finetune"]
    quantized = out_dir / ARTIFACTS["quantize"]
    if finetuned.exists():
        model = load_model(finetuned)
    elif quantized.exists():
        model = load_model(quantized)
    else:
        raise ConfigError(
            "stage 'evaluate' needs a model; run the 'quantize' (or 'finetune') stage first"
        )
    reference = None
    for artifact in ("retrain", "pretrain"):
        path = out_dir / ARTIFACTS[artifact]
        if path.exists():
            reference = load_checkpoint(path).network
            break
    merged = Batch(
        np.concatenate([b.inputs for b in data.val]),
        np.concatenate([b.labels for b in data.val]),
    )
    report = ErrorReport(
        weight_mse=weight_mse(reference, model) if reference is not None else {},
        output_mse=output_mse(reference, model, merged) if reference is not None else {},
        error_rate=evaluate(model, data.val),
    )
    write_error_report_json(out_dir / ARTIFACTS["eval_json"], report)
    write_error_report_csv(out_dir / ARTIFACTS["eval_csv"], report)


def _stage_compare(config: ExperimentConfig, out_dir: Path, data: DataSplit) -> None:
    checkpoint = load_checkpoint(_require(out_dir, "pretrain", "compare", "pretrain"))
    pretrain_logs = read_training_log_csv(
        _require(out_dir, "pretrain_log", "compare", "pretrain")
    )
    result = run_comparison(config, checkpoint.network, data, pretrain_logs)
    for name, arm in result.arms.items():
        write_training_log_csv(
            out_dir / f"compare_{name}_finetune_log.csv",
            arm.finetune_logs,
            sorted(i for i in range(len(arm.model.layers)) if not arm.model.layers[i].excluded),
        )
    emit_report(
        {
            "full_precision": result.pretrain_logs,
            "lambda0": result.arms["lambda0"].finetune_logs,
            "crq": result.arms["crq"].finetune_logs,
        },
        result.rows(),
        out_dir,
    )


def _stage_report(config: ExperimentConfig, out_dir: Path, data: DataSplit) -> None:
    pretrain_log = _require(out_dir, "pretrain_log", "report", "pretrain")
    logs = {"full_precision": read_training_log_csv(pretrain_log)}
    for name in ("lambda0", "crq"):
        path = out_dir / f"compare_{name}_finetune_log.csv"
        if path.exists():
            logs[name] = read_training_log_csv(path)
    comparison = out_dir / ARTIFACTS["comparison_json"]
    rows = []
    if comparison.exists():
        with open(comparison) as fh:
            rows = json.load(fh)
    emit_report(logs, rows, out_dir)


_STAGE_FUNCS = {
    "pretrain": _stage_pretrain,
    "retrain": _stage_retrain,
    "quantize": _stage_quantize,
    "finetune": _stage_finetune,
    "evaluate": _stage_evaluate,
    "compare": _stage_compare,
    "report": _stage_report,
}


def run(config: ExperimentConfig) -> dict[str, Path]:
    """Execute the config's enabled stages in canonical order.

    Returns the artifact paths present in the output directory when the
    run finishes.
    """
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = ingest_dataset(config)
    ordered = [s for s in STAGES if s in config.stages]
    if not ordered and config.stages:
        ordered = list(config.stages)
    for stage in ordered:
        _STAGE_FUNCS[stage](config, out_dir, data)
    return {
        name: out_dir / fname
        for name, fname in ARTIFACTS.items()
        if (out_dir / fname).exists()
    }


def run_stage(config: ExperimentConfig, stage: str) -> dict[str, Path]:
    """Run one named stage (or 'report') against the config's out_dir."""
    if stage not in _STAGE_FUNCS:
        raise ConfigError(f"unknown stage {stage!r}")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    data = ingest_dataset(config)
    _STAGE_FUNCS[stage](config, out_dir, data)
    return {
        name: out_dir / fname
        for name, fname in ARTIFACTS.items()
        if (out_dir / fname).exists()
    }
