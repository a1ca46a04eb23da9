"""Dense-array substrate and seedable randomness, backed by numpy.

Solver code runs in float64 throughout: the clustering tolerances are
1e-9-scale and single precision would eat most of that budget.  This
module owns validation of external numeric input, the handful of
reductions the pipeline needs by name, and the seed-splitting scheme
that gives every pipeline stage its own reproducible stream.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError

DTYPE = np.float64

# Spawn keys for per-stage child generators.  One master seed plus a
# fixed key per stage means any stage can be rerun in isolation and
# still draw the exact stream it saw inside a full pipeline run.
STAGE_KEYS = {
    "data": 0,
    "init": 1,
    "pretrain": 2,
    "retrain": 3,
    "quantize": 4,
    "finetune": 5,
    "evaluate": 6,
    "compare": 7,
}


def as_dense(values, shape=None) -> np.ndarray:
    """Convert external input to a contiguous float64 array.

    Rejects NaN/Inf: everything downstream (thresholding, closed-form
    scales) silently misbehaves on non-finite values.
    """
    arr = np.ascontiguousarray(values, dtype=DTYPE)
    if shape is not None:
        arr = arr.reshape(shape)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite values in numeric input")
    return arr


def matmul(a, b) -> np.ndarray:
    """Matrix product of two 2-D arrays."""
    a = np.asarray(a, dtype=DTYPE)
    b = np.asarray(b, dtype=DTYPE)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def reduce_mean_abs(a) -> float:
    """Arithmetic mean of absolute values over all elements."""
    a = np.asarray(a, dtype=DTYPE)
    if a.size == 0:
        raise ValueError("mean of an empty array is undefined")
    return float(np.mean(np.abs(a)))


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator; equal seeds give bitwise-equal streams."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed)))


def stage_rng(seed: int, stage: str) -> np.random.Generator:
    """Child generator for one named pipeline stage."""
    if stage not in STAGE_KEYS:
        raise ValueError(f"unknown stage {stage!r}; known: {sorted(STAGE_KEYS)}")
    seq = np.random.SeedSequence(seed, spawn_key=(STAGE_KEYS[stage],))
    return np.random.Generator(np.random.PCG64(seq))
