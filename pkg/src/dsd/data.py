"""Datasets: IDX ingestion, synthetic generators, splitting and minibatching."""

from __future__ import annotations

import csv
import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataFormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, d) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    class_count: int

    def __post_init__(self):
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise DataFormatError(
                f"features {self.features.shape} and labels {self.labels.shape} disagree"
            )
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"label outside [0, {self.class_count})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.features[idx], self.labels[idx], self.class_count)

    def head(self, n: int) -> "Dataset":
        return self.take(np.arange(min(n, len(self))))


@dataclass(frozen=True)
class BatchPlan:
    batch_size: int
    shuffle_seed: int = 0
    drop_last: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")


# ---------------------------------------------------------------- IDX I/O


def _open(path):
    path = Path(path)
    if path.suffix == ".gz":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_idx(path, expected_magic: int, what: str) -> np.ndarray:
    with _open(path) as f:
        raw = f.read()
    if len(raw) < 8:
        raise DataFormatError(f"{what} file {path}: truncated header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic != expected_magic:
        raise DataFormatError(
            f"{what} file {path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise DataFormatError(f"{what} file {path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = math.prod(dims)
    payload = raw[header_len:]
    if len(payload) < count:
        raise DataFormatError(
            f"{what} file {path}: payload has {len(payload)} bytes, header promises {count}"
        )
    return np.frombuffer(payload, dtype=np.uint8, count=count).reshape(dims)


def load_idx(images_path, labels_path, class_count: int | None = None) -> Dataset:
    """Read an IDX image/label pair (e.g. MNIST) into a :class:`Dataset`.

    Pixels are flattened row-major and scaled by 1/255.  ``class_count``
    defaults to ``max(label) + 1`` but at least 10.
    """
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(
            f"count mismatch: images file has {images.shape[0]} items, "
            f"labels file has {labels.shape[0]}"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if class_count is None:
        class_count = max(10, int(y.max()) + 1 if len(y) else 10)
    return Dataset(features, y, class_count)


def write_idx(images: np.ndarray, labels: np.ndarray, images_path, labels_path) -> None:
    """Write uint8 images of shape (n, rows, cols) and labels of shape (n,)."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.ndim != 3 or labels.ndim != 1 or images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"cannot write images {images.shape} with labels {labels.shape}")
    if images.min(initial=0) < 0 or images.max(initial=0) > 255 or labels.max(initial=0) > 255:
        raise DataFormatError("IDX ubyte payload must lie in [0, 255]")
    opener = lambda p: gzip.open(p, "wb") if str(p).endswith(".gz") else open(p, "wb")
    with opener(images_path) as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.astype(np.uint8).tobytes())
    with opener(labels_path) as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.shape[0]))
        f.write(labels.astype(np.uint8).tobytes())


# -------------------------------------------------------------- synthetic


def _minmax(x: np.ndarray) -> np.ndarray:
    lo = x.min(axis=0)
    span = x.max(axis=0) - lo
    span[span == 0] = 1.0
    return (x - lo) / span


def make_synthetic(kind: str, n: int, noise_std: float = 0.1, seed: int = 0) -> Dataset:
    """Two-class 2-D toy data, min-max scaled into [0, 1].

    ``two_gaussians``: clusters centred at (-1, -1) and (1, 1).
    ``concentric_rings``: radius 1 (class 0) and radius 2 (class 1).
    Class sizes differ by at most one; examples are interleaved by class.
    """
    if n < 2:
        raise ConfigError(f"synthetic dataset needs n >= 2, got {n}")
    if noise_std < 0:
        raise ConfigError(f"noise_std must be >= 0, got {noise_std}")
    rng = np.random.default_rng(seed)
    labels = np.arange(n, dtype=np.int64) % 2
    if kind == "two_gaussians":
        centres = np.where(labels[:, None] == 0, -1.0, 1.0) * np.ones((n, 2))
        x = centres + rng.normal(0.0, noise_std, size=(n, 2))
    elif kind == "concentric_rings":
        angle = rng.uniform(0.0, 2 * np.pi, size=n)
        radius = 1.0 + labels + rng.normal(0.0, noise_std, size=n)
        x = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=1)
    else:
        raise ConfigError(f"unknown synthetic dataset kind {kind!r}")
    return Dataset(_minmax(x), labels, 2)


def export_csv(dataset: Dataset, path) -> None:
    """Write ``label,f1,...,fd`` rows."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["label"] + [f"f{i + 1}" for i in range(dataset.dim)])
        for x, y in zip(dataset.features, dataset.labels):
            w.writerow([int(y)] + [repr(float(v)) for v in x])


# ------------------------------------------------------ splits and batches


def split(dataset: Dataset, fractions, seed: int = 0) -> tuple[Dataset, ...]:
    """Shuffle once with ``seed`` and cut into len(fractions) disjoint parts.

    Part sizes are ``round(f * n)`` except the last, which takes the rest.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions):
        raise ConfigError(f"split fractions must be positive, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions must sum to 1, got {sum(fractions)}")
    n = len(dataset)
    sizes = [round(f * n) for f in fractions[:-1]]
    sizes.append(n - sum(sizes))
    if any(s < 1 for s in sizes):
        raise ConfigError(f"split of {n} examples by {fractions} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    bounds = np.cumsum([0] + sizes)
    return tuple(dataset.take(perm[bounds[i] : bounds[i + 1]]) for i in range(len(sizes)))


def epoch_order(n: int, plan: BatchPlan, epoch: int) -> np.ndarray:
    return np.random.default_rng([plan.shuffle_seed, epoch]).permutation(n)


def batches(dataset: Dataset, plan: BatchPlan, epoch: int):
    """Yield ``(features, labels)`` minibatches for one epoch.

    The order depends only on ``(plan.shuffle_seed, epoch)``.
    """
    n = len(dataset)
    if plan.batch_size > n:
        raise ConfigError(f"batch_size {plan.batch_size} exceeds dataset size {n}")
    order = epoch_order(n, plan, epoch)
    stop = n - n % plan.batch_size if plan.drop_last else n
    for lo in range(0, stop, plan.batch_size):
        idx = order[lo : lo + plan.batch_size]
        yield dataset.features[idx], dataset.labels[idx]
