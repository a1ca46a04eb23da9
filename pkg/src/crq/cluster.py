"""Constrained three-center clustering of a weight vector.

Partitions a weight vector into three clusters whose centers are
restricted to {-alpha, 0, +alpha} for a single shared nonnegative scale
alpha.  The objective is the sum of squared residuals between each
weight and its assigned center.  Both sub-problems have exact
solutions:

* with alpha fixed, each weight independently takes the code of its
  nearest center, which reduces to thresholding |w_i| at alpha/2;
* with the assignment fixed, the optimal alpha is the mean of |w_i|
  over the two nonzero clusters.

``solve`` alternates the two from alpha = mean(|w|) until neither
changes, so the objective is non-increasing after every half-step.
Assignments are stored as per-weight codes in {-1, 0, +1} rather than
an indicator matrix; the two are equivalent and codes pack into 2 bits.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError

# Cluster centers in code units: a weight's center is alpha * code.
CENTERS = np.array([-1, 0, 1], dtype=np.int8)

# brute_force_solve enumerates 3^N assignments; refuse anything bigger.
MAX_BRUTE_FORCE_N = 12


@dataclass(frozen=True)
class SolverConfig:
    """Stopping rules for the alternating solver."""

    alpha_tolerance: float = 1e-8
    max_iterations: int = 100
    alpha_floor: float = 1e-12

    def __post_init__(self):
        if self.alpha_tolerance <= 0:
            raise ValueError("alpha_tolerance must be positive")
        if self.max_iterations <= 0:
            raise ValueError("max_iterations must be positive")
        if self.alpha_floor <= 0:
            raise ValueError("alpha_floor must be positive")


@dataclass(frozen=True)
class ClusterSolution:
    """Converged clustering of one weight vector.

    ``objective_trace`` records the objective after every half-step
    (assignment update, then scale update), which is what the monotone
    descent checks look at.
    """

    codes: np.ndarray  # int8 in {-1, 0, +1}, one per weight
    alpha: float  # nonnegative; sign lives in the codes
    objective: float  # sum of squared residuals at (codes, alpha)
    iterations: int  # full alternations performed
    objective_trace: tuple[float, ...] = ()

    def centers(self) -> np.ndarray:
        """Dequantized weights alpha * codes."""
        return self.alpha * self.codes.astype(np.float64)


def _as_weight_vector(w) -> np.ndarray:
    w = np.asarray(w, dtype=np.float64).ravel()
    if w.size == 0:
        raise ValueError("cannot cluster an empty weight vector")
    return w


def assign_codes(w, alpha: float) -> np.ndarray:
    """Nearest-center assignment: 0 where |w_i| <= alpha/2, else sign(w_i).

    A weight exactly on the boundary |w_i| = alpha/2 is equidistant from
    two centers; it goes to the zero cluster (deterministic, and favors
    sparsity).
    """
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    w = np.asarray(w, dtype=np.float64)
    codes = np.sign(w)
    codes[np.abs(w) <= 0.5 * alpha] = 0.0
    return codes.astype(np.int8)


def update_alpha(w, codes) -> float | None:
    """Closed-form optimal scale for a fixed assignment.

    Computes (sum of +1-coded weights - sum of -1-coded weights) divided
    by the number of nonzero codes.  When every nonzero code agrees with
    its weight's sign (always true for assignments from
    ``assign_codes``) this equals the mean of |w_i| over the nonzero
    clusters.  Returns None when all codes are zero: the scale is then
    unconstrained and the caller decides (``solve`` terminates with the
    degenerate all-zero solution).
    """
    w = np.asarray(w, dtype=np.float64)
    codes = np.asarray(codes)
    if codes.shape != w.shape:
        raise DimensionError(f"codes shape {codes.shape} does not match weights {w.shape}")
    nnz = int(np.count_nonzero(codes))
    if nnz == 0:
        return None
    return float(w @ codes.astype(np.float64)) / nnz


def cluster_objective(w, codes, alpha: float) -> float:
    """Sum of squared residuals between weights and assigned centers."""
    w = np.asarray(w, dtype=np.float64)
    codes = np.asarray(codes)
    if codes.shape != w.shape:
        raise DimensionError(f"codes shape {codes.shape} does not match weights {w.shape}")
    r = w - alpha * codes.astype(np.float64)
    return float(r @ r)


def _degenerate_solution(w: np.ndarray, iterations: int, trace: list[float]) -> ClusterSolution:
    codes = np.zeros(w.size, dtype=np.int8)
    j = float(w @ w)
    return ClusterSolution(codes, 0.0, j, iterations, tuple(trace) + (j,))


def solve(w, config: SolverConfig | None = None) -> ClusterSolution:
    """Alternating minimization from alpha = mean(|w|).

    Converged once the assignment stops changing and alpha moves by less
    than ``alpha_tolerance`` in one alternation; capped at
    ``max_iterations``.  An all-zero (or below-floor) input yields the
    degenerate solution alpha = 0 with every code zero.
    """
    config = config or SolverConfig()
    w = _as_weight_vector(w)
    if not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite")

    alpha = float(np.mean(np.abs(w)))
    if alpha < config.alpha_floor:
        return _degenerate_solution(w, 0, [])

    codes: np.ndarray | None = None
    trace: list[float] = []
    iterations = 0
    for iterations in range(1, config.max_iterations + 1):
        new_codes = assign_codes(w, alpha)
        trace.append(cluster_objective(w, new_codes, alpha))
        new_alpha = update_alpha(w, new_codes)
        if new_alpha is None:
            # Every weight fell inside the dead zone; treat the layer as
            # degenerate rather than divide by an empty cluster.
            return _degenerate_solution(w, iterations, trace)
        trace.append(cluster_objective(w, new_codes, new_alpha))
        converged = (
            codes is not None
            and np.array_equal(new_codes, codes)
            and abs(new_alpha - alpha) < config.alpha_tolerance
        )
        codes, alpha = new_codes, new_alpha
        if converged:
            break
    return ClusterSolution(codes, alpha, trace[-1], iterations, tuple(trace))


def brute_force_solve(w) -> ClusterSolution:
    """Global optimum by enumerating every assignment in {-1,0,+1}^N.

    Test oracle, independent of ``solve``: each assignment gets its own
    closed-form scale and the minimum objective over the enumeration is
    global by construction.  Refuses N > ``MAX_BRUTE_FORCE_N``.
    """
    w = _as_weight_vector(w)
    n = w.size
    if n > MAX_BRUTE_FORCE_N:
        raise ValueError(f"brute force over 3^{n} assignments refused (max N = {MAX_BRUTE_FORCE_N})")

    # All 3^n assignments as rows, via base-3 digits.
    idx = np.arange(3**n, dtype=np.int64)
    digits = (idx[:, None] // 3 ** np.arange(n, dtype=np.int64)) % 3
    codes = (digits - 1).astype(np.float64)

    dots = codes @ w
    nnz = np.count_nonzero(codes, axis=1)
    ww = float(w @ w)
    alphas = np.where(nnz > 0, dots / np.maximum(nnz, 1), 0.0)
    objectives = ww - 2.0 * alphas * dots + alphas * alphas * nnz

    best = int(np.argmin(objectives))
    best_codes = codes[best].astype(np.int8)
    alpha = float(alphas[best])
    if alpha < 0:
        # The mirrored assignment has the same objective and a
        # nonnegative scale; report that one.
        alpha, best_codes = -alpha, (-best_codes).astype(np.int8)
    j = cluster_objective(w, best_codes, alpha)
    return ClusterSolution(best_codes, alpha, j, 0, (j,))
