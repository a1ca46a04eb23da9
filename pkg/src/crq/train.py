"""Cluster-regularized retraining.

Each step re-solves the ternary clustering for every included layer
from that layer's current weights, then applies the regularized update

    W <- W - eta * (dL/dW + lam * (W - alpha * codes)),

which pulls every weight toward its assigned center while the task loss
is still steering.  Excluded layers (by default the first and last
parameterized ones) and all biases take the plain SGD step.

The regularization term in the update carries coefficient ``lam``
exactly as written above; the full objective L + lam * J used for
gradient checking differentiates to dL/dW + 2 * lam * (W - alpha*codes),
see ``objective_gradients``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .cluster import ClusterSolution, SolverConfig, solve
from .errors import ConfigError, StaleStateError
from .nn import Batch, Network, mean_loss_accuracy


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for pretraining, retraining, and fine-tuning."""

    eta: float = 0.1
    lam: float = 0.001
    epochs: int = 100
    solver: SolverConfig = field(default_factory=SolverConfig)
    # None = exclude the first and last parameterized layers; pass an
    # explicit (possibly empty) collection to override.
    exclude_layers: frozenset[int] | None = None
    seed: int = 0
    # "batch": re-solve (codes, alpha) every step; "epoch": once per epoch.
    refresh: str = "batch"
    # Step decay: eta is multiplied by 0.1 at the start of these epochs.
    decay_epochs: tuple[int, ...] = ()
    # Fine-tuning ablation: keep the codes from the first projection and
    # only refit alpha each step.
    freeze_codes: bool = False

    def __post_init__(self):
        if self.lam < 0:
            raise ConfigError("lam must be nonnegative")
        if not self.eta > 0:
            raise ConfigError("eta must be positive")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.refresh not in ("batch", "epoch"):
            raise ConfigError(f"refresh must be 'batch' or 'epoch', got {self.refresh!r}")
        if self.exclude_layers is not None:
            object.__setattr__(self, "exclude_layers", frozenset(int(i) for i in self.exclude_layers))
        object.__setattr__(self, "decay_epochs", tuple(int(e) for e in self.decay_epochs))


def default_exclusions(num_param_layers: int) -> frozenset[int]:
    """First and last parameterized layers, the common full-precision set."""
    if num_param_layers == 0:
        return frozenset()
    return frozenset({0, num_param_layers - 1})


def included_indices(net: Network, config: TrainConfig) -> list[int]:
    """Parameterized-layer indices subject to regularization/quantization."""
    n = len(net.parameterized())
    excluded = config.exclude_layers if config.exclude_layers is not None else default_exclusions(n)
    bad = [i for i in excluded if i < 0 or i >= n]
    if bad:
        raise ConfigError(f"excluded layer indices {bad} out of range for {n} layers")
    return [i for i in range(n) if i not in excluded]


@dataclass
class RegularizerState:
    """Per-layer cluster solutions, tied to the weights they were solved on."""

    solutions: dict[int, ClusterSolution]
    version: int


def solve_state(net: Network, config: TrainConfig) -> RegularizerState:
    """Solve (codes, alpha) for every included layer at the current weights."""
    params = net.parameterized()
    solutions = {
        i: solve(params[i].weights.ravel(), config.solver) for i in included_indices(net, config)
    }
    return RegularizerState(solutions, net.param_version)


def regularizer_value(net: Network, state: RegularizerState) -> float:
    """Sum of cluster objectives over included layers.

    The total retraining objective is loss + lam * this value.  Raises
    if the state was solved against older weights.
    """
    if state.version != net.param_version:
        raise StaleStateError("regularizer state predates a parameter update")
    return float(sum(sol.objective for sol in state.solutions.values()))


@dataclass(frozen=True)
class StepRecord:
    """Everything needed to reconstruct one step's weight deltas."""

    eta: float
    lam: float
    loss: float
    # per parameterized layer, in order
    weights_before: tuple[np.ndarray, ...]
    grads: tuple[np.ndarray, ...]
    solutions: dict[int, ClusterSolution]  # included layers only


def crq_step(
    net: Network,
    batch: Batch,
    config: TrainConfig,
    state: RegularizerState | None = None,
    record: bool = False,
):
    """One regularized SGD step, in place.

    When ``state`` is None the cluster solutions are re-solved from the
    pre-update weights (the default, and what keeps every step
    well-defined); passing a state reuses its solutions, which is the
    per-epoch refresh ablation.  Returns (loss, state, record_or_None).

    A degenerate layer (solved alpha = 0) contributes no regularization
    this step; training proceeds on the plain gradient.
    """
    loss, cache = net.forward(batch)
    grads = net.backward(cache)
    included = set(included_indices(net, config))
    if state is None:
        state = solve_state(net, config)

    rec = None
    if record:
        rec = StepRecord(
            eta=config.eta,
            lam=config.lam,
            loss=loss,
            weights_before=tuple(l.weights.copy() for l in net.parameterized()),
            grads=tuple(gw.copy() for gw, _ in grads),
            solutions=dict(state.solutions),
        )

    eta, lam = config.eta, config.lam
    for i, layer in enumerate(net.parameterized()):
        grad_w, grad_b = grads[i]
        sol = state.solutions.get(i)
        if i in included and lam != 0.0 and sol is not None and sol.alpha > 0.0:
            centers = sol.centers().reshape(layer.weights.shape)
            layer.weights -= eta * (grad_w + lam * (layer.weights - centers))
        else:
            layer.weights -= eta * grad_w
        if layer.bias is not None:
            layer.bias -= eta * grad_b
    net.touch()
    return loss, state, rec


@dataclass(frozen=True)
class EpochLog:
    """End-of-epoch measurement over the full training stream."""

    epoch: int
    train_loss: float
    train_acc: float
    total_j: float
    alphas: tuple[float, ...]  # per included layer, ascending layer index
    val_acc: float | None = None


def effective_eta(config: TrainConfig, epoch: int) -> float:
    eta = config.eta
    for boundary in config.decay_epochs:
        if epoch >= boundary:
            eta *= 0.1
    return eta


def retrain(
    net: Network,
    batches,
    config: TrainConfig,
    val_batches=None,
) -> tuple[Network, list[EpochLog]]:
    """Run ``config.epochs`` regularized epochs over ``batches`` in order.

    Returns the (in-place updated) network and a per-epoch log of
    training loss/accuracy, total cluster objective, and each included
    layer's alpha.  lam = 0 turns this into plain SGD pretraining.
    """
    batches = list(batches)
    if not batches:
        raise ValueError("empty batch stream")
    logs: list[EpochLog] = []
    for epoch in range(1, config.epochs + 1):
        epoch_config = replace(config, eta=effective_eta(config, epoch))
        state = solve_state(net, epoch_config) if config.refresh == "epoch" else None
        for batch in batches:
            crq_step(net, batch, epoch_config, state=state)
        logs.append(_measure_epoch(net, batches, epoch_config, epoch, val_batches))
    return net, logs


def _measure_epoch(net, batches, config, epoch, val_batches) -> EpochLog:
    loss, acc = mean_loss_accuracy(net, batches)
    state = solve_state(net, config)
    alphas = tuple(state.solutions[i].alpha for i in sorted(state.solutions))
    val_acc = mean_loss_accuracy(net, val_batches)[1] if val_batches else None
    return EpochLog(epoch, loss, acc, regularizer_value(net, state), alphas, val_acc)


def total_objective(net: Network, batches, config: TrainConfig) -> float:
    """loss + lam * J over the full stream, with a fresh cluster solve."""
    loss, _ = mean_loss_accuracy(net, batches)
    state = solve_state(net, config)
    return loss + config.lam * regularizer_value(net, state)


def objective_gradients(net: Network, batch: Batch, config: TrainConfig, state: RegularizerState):
    """Analytic gradient of loss + lam * J with (codes, alpha) held fixed.

    Per included layer this is dL/dW + 2 * lam * (W - alpha * codes);
    used by the finite-difference checks.  Returns (value, grads) with
    grads as (grad_w, grad_b) pairs per parameterized layer.
    """
    loss, cache = net.forward(batch)
    grads = net.backward(cache)
    params = net.parameterized()
    value = loss
    for i, sol in state.solutions.items():
        diff = params[i].weights.ravel() - sol.centers()
        value += config.lam * float(diff @ diff)
    out = []
    for i, (grad_w, grad_b) in enumerate(grads):
        sol = state.solutions.get(i)
        if sol is not None:
            centers = sol.centers().reshape(grad_w.shape)
            grad_w = grad_w + 2.0 * config.lam * (params[i].weights - centers)
        out.append((grad_w, grad_b))
    return value, out


def write_training_log_csv(path, logs: list[EpochLog], included: list[int]) -> None:
    """Row-per-epoch CSV: epoch, train_loss, train_acc, total_J, alpha_layer_k...

    A val_acc column is appended when any epoch has one.  Floats are
    written with repr so a re-parse reproduces them exactly.
    """
    has_val = any(log.val_acc is not None for log in logs)
    header = ["epoch", "train_loss", "train_acc", "total_J"]
    header += [f"alpha_layer_{i}" for i in included]
    if has_val:
        header.append("val_acc")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for log in logs:
            row = [log.epoch, repr(log.train_loss), repr(log.train_acc), repr(log.total_j)]
            row += [repr(a) for a in log.alphas]
            if has_val:
                row.append("" if log.val_acc is None else repr(log.val_acc))
            writer.writerow(row)


def read_training_log_csv(path) -> list[EpochLog]:
    """Parse a file written by ``write_training_log_csv``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty log file")
    header = rows[0]
    alpha_cols = [i for i, name in enumerate(header) if name.startswith("alpha_layer_")]
    has_val = "val_acc" in header
    logs = []
    for row in rows[1:]:
        val = None
        if has_val and row[header.index("val_acc")]:
            val = float(row[header.index("val_acc")])
        logs.append(
            EpochLog(
                epoch=int(row[0]),
                train_loss=float(row[1]),
                train_acc=float(row[2]),
                total_j=float(row[3]),
                alphas=tuple(float(row[i]) for i in alpha_cols),
                val_acc=val,
            )
        )
    return logs
