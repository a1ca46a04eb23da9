"""Dataset generation and ingestion.

Builtins are seeded 2-D toy generators (Gaussian blobs on a circle,
interleaved spirals).  File ingestion covers numeric CSV (last column
is the integer class label) and the IDX image/label format used by
handwritten-digit corpora.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError
from .nn import Batch
from .numeric import DTYPE

IDX_IMAGES_MAGIC = 0x00000803  # 3-D unsigned-byte tensor
IDX_LABELS_MAGIC = 0x00000801  # 1-D unsigned-byte vector


def _class_counts(n_samples: int, n_classes: int) -> np.ndarray:
    counts = np.full(n_classes, n_samples // n_classes, dtype=np.int64)
    counts[: n_samples % n_classes] += 1
    return counts


def make_blobs(
    n_samples: int,
    n_classes: int,
    rng: np.random.Generator,
    radius: float = 2.0,
    spread: float = 0.6,
) -> tuple[np.ndarray, np.ndarray]:
    """Gaussian blobs centered on a circle, shuffled, labels balanced."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    angles = 2.0 * np.pi * np.arange(n_classes) / n_classes
    centers = radius * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    counts = _class_counts(n_samples, n_classes)
    labels = np.repeat(np.arange(n_classes), counts)
    points = centers[labels] + rng.normal(scale=spread, size=(n_samples, 2))
    order = rng.permutation(n_samples)
    return points[order].astype(DTYPE), labels[order]


def make_spirals(
    n_samples: int,
    n_classes: int,
    rng: np.random.Generator,
    noise: float = 0.08,
    turns: float = 1.75,
) -> tuple[np.ndarray, np.ndarray]:
    """Interleaved spiral arms, one per class, shuffled."""
    if n_classes < 2:
        raise ValueError("need at least two classes")
    counts = _class_counts(n_samples, n_classes)
    xs, ys = [], []
    for k in range(n_classes):
        t = np.linspace(0.15, 1.0, counts[k])
        angle = 2.0 * np.pi * (turns * t + k / n_classes)
        r = t
        arm = np.stack([r * np.cos(angle), r * np.sin(angle)], axis=1)
        xs.append(arm + rng.normal(scale=noise, size=arm.shape))
        ys.append(np.full(counts[k], k, dtype=np.int64))
    points = np.concatenate(xs)
    labels = np.concatenate(ys)
    order = rng.permutation(len(labels))
    return points[order].astype(DTYPE), labels[order]


def train_val_split(
    inputs: np.ndarray,
    labels: np.ndarray,
    fraction: float = 0.2,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic tail split: the last round(n * fraction) samples validate."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError("validation fraction must be in [0, 1)")
    n = len(labels)
    n_val = int(round(n * fraction))
    cut = n - n_val
    if cut == 0:
        raise DataError("validation split leaves no training samples")
    return inputs[:cut], labels[:cut], inputs[cut:], labels[cut:]


def as_batches(inputs: np.ndarray, labels: np.ndarray, batch_size: int) -> list[Batch]:
    """Fixed-order batches; the final one may be short."""
    if batch_size <= 0:
        raise ValueError("batch size must be positive")
    return [
        Batch(inputs[i : i + batch_size], labels[i : i + batch_size])
        for i in range(0, len(labels), batch_size)
    ]


def load_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Numeric CSV: features in all columns but the last, integer label last."""
    rows: list[list[float]] = []
    path = Path(path)
    with open(path, newline="") as fh:
        for row_num, row in enumerate(csv.reader(fh), start=1):
            if not row:
                continue
            values = []
            for col_num, cell in enumerate(row, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(
                        f"{path}: row {row_num}, column {col_num}: not a number: {cell!r}"
                    ) from None
            if rows and len(values) != len(rows[0]):
                raise DataError(
                    f"{path}: row {row_num}: {len(values)} columns, expected {len(rows[0])}"
                )
            if len(values) < 2:
                raise DataError(f"{path}: row {row_num}: need at least one feature and a label")
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.asarray(rows, dtype=DTYPE)
    features, raw_labels = table[:, :-1], table[:, -1]
    if not np.all(raw_labels == np.round(raw_labels)):
        bad = int(np.argmax(raw_labels != np.round(raw_labels))) + 1
        raise DataError(f"{path}: row {bad}: label {raw_labels[bad - 1]} is not an integer")
    labels = raw_labels.astype(np.int64)
    if labels.min() < 0:
        raise DataError(f"{path}: negative class label {labels.min()}")
    return features, labels


def _read_idx_header(data: bytes, path, expected_magic: int, dims: int) -> tuple[int, ...]:
    if len(data) < 4 + 4 * dims:
        raise DataError(f"{path}: truncated IDX header")
    magic = int.from_bytes(data[:4], "big")
    if magic != expected_magic:
        raise DataError(
            f"{path}: IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    return tuple(
        int.from_bytes(data[4 + 4 * i : 8 + 4 * i], "big") for i in range(dims)
    )


def load_idx(images_path, labels_path) -> tuple[np.ndarray, np.ndarray]:
    """IDX image/label pair -> inputs (n, 1, h, w) scaled to [0, 1], labels (n,)."""
    img_data = Path(images_path).read_bytes()
    n, h, w = _read_idx_header(img_data, images_path, IDX_IMAGES_MAGIC, 3)
    expected = 16 + n * h * w
    if len(img_data) != expected:
        raise DataError(f"{images_path}: {len(img_data)} bytes, expected {expected}")
    images = np.frombuffer(img_data, dtype=np.uint8, offset=16).reshape(n, 1, h, w)

    lbl_data = Path(labels_path).read_bytes()
    (n_labels,) = _read_idx_header(lbl_data, labels_path, IDX_LABELS_MAGIC, 1)
    if len(lbl_data) != 8 + n_labels:
        raise DataError(f"{labels_path}: {len(lbl_data)} bytes, expected {8 + n_labels}")
    if n_labels != n:
        raise DataError(f"{labels_path}: {n_labels} labels for {n} images")
    labels = np.frombuffer(lbl_data, dtype=np.uint8, offset=8).astype(np.int64)
    return images.astype(DTYPE) / 255.0, labels


@dataclass(frozen=True)
class DataSplit:
    """Train/validation batches plus what the model builder needs to know."""

    train: list[Batch]
    val: list[Batch]
    n_classes: int
    input_shape: tuple[int, ...]  # per-sample shape


def build_split(
    inputs: np.ndarray,
    labels: np.ndarray,
    batch_size: int,
    val_fraction: float = 0.2,
) -> DataSplit:
    n_classes = int(labels.max()) + 1 if len(labels) else 0
    if n_classes < 2:
        raise DataError("need at least two classes in the data")
    xtr, ytr, xval, yval = train_val_split(inputs, labels, val_fraction)
    return DataSplit(
        train=as_batches(xtr, ytr, batch_size),
        val=as_batches(xval, yval, batch_size),
        n_classes=n_classes,
        input_shape=tuple(inputs.shape[1:]),
    )
