"""Data ingestion and stream construction."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .numkit import RngStream

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
FSTR_MAGIC = b"FSTR"
FSTR_VERSION = 1


class DataFormatError(ValueError):
    """Base class for malformed dataset files."""


class BadMagicError(DataFormatError):
    pass


class TruncatedFileError(DataFormatError):
    pass


class CountMismatchError(DataFormatError):
    pass


class DimMismatchError(DataFormatError):
    pass


def _read_bytes(path) -> bytes:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _check_magic(path, buf, want, kind):
    if len(buf) < 4:
        raise TruncatedFileError(f"{path}: no room for a magic number")
    (magic,) = struct.unpack_from(">I", buf, 0)
    if magic != want:
        raise BadMagicError(f"{path}: bad magic {magic} for {kind} file (want {want})")


def read_idx_images(path) -> np.ndarray:
    buf = _read_bytes(path)
    _check_magic(path, buf, IDX_IMAGES_MAGIC, "an image")
    if len(buf) < 16:
        raise TruncatedFileError(f"{path}: header needs 16 bytes, got {len(buf)}")
    _, count, rows, cols = struct.unpack_from(">IIII", buf, 0)
    n = count * rows * cols
    if len(buf) - 16 < n:
        raise TruncatedFileError(f"{path}: {count} images declared, payload has {len(buf) - 16} bytes")
    return np.frombuffer(buf, np.uint8, n, 16).reshape(count, rows * cols)


def read_idx_labels(path) -> np.ndarray:
    buf = _read_bytes(path)
    _check_magic(path, buf, IDX_LABELS_MAGIC, "a label")
    if len(buf) < 8:
        raise TruncatedFileError(f"{path}: header needs 8 bytes, got {len(buf)}")
    _, count = struct.unpack_from(">II", buf, 0)
    if len(buf) - 8 < count:
        raise TruncatedFileError(f"{path}: {count} labels declared, payload has {len(buf) - 8} bytes")
    return np.frombuffer(buf, np.uint8, count, 8).astype(np.int64)


def parse_idx(images_file, labels_file) -> tuple[np.ndarray, np.ndarray]:
    """Read an IDX image/label pair; pixels are scaled to [0, 1]."""
    images = read_idx_images(images_file)
    labels = read_idx_labels(labels_file)
    if len(images) != len(labels):
        raise CountMismatchError(f"{len(images)} images but {len(labels)} labels")
    return images.astype(np.float64) / 255.0, labels


def write_idx(images_file, labels_file, images_u8, labels) -> None:
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    count = len(images_u8)
    side = int(round(np.sqrt(images_u8.shape[1])))
    rows, cols = (side, side) if side * side == images_u8.shape[1] else (1, images_u8.shape[1])
    Path(images_file).write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, count, rows, cols) + images_u8.tobytes())
    Path(labels_file).write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, len(labels)) + np.asarray(labels, dtype=np.uint8).tobytes()
    )


@dataclass(frozen=True)
class Standardizer:
    mean: float
    std: float

    @classmethod
    def fit(cls, x) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        return cls(float(x.mean()), float(x.std()))

    def __call__(self, x):
        return standardize(x, self.mean, self.std)


def standardize(images, mean: float, std: float) -> np.ndarray:
    if not std > 0:
        raise ValueError("std must be positive")
    return (np.asarray(images, dtype=np.float64) - mean) / std


def task_permutation(n: int, task_seed: int) -> np.ndarray:
    """Fisher-Yates permutation of ``n`` indices; seed 0 is the identity."""
    if task_seed == 0:
        return np.arange(n)
    return RngStream(task_seed, 0x7065726D).permutation(n)


def permuted_task(images, task_seed: int) -> np.ndarray:
    images = np.asarray(images)
    return images[..., task_permutation(images.shape[-1], task_seed)]


def read_features(path) -> tuple[np.ndarray, np.ndarray, int]:
    """Read an FSTR file; returns ``(features, labels, num_classes)``."""
    buf = _read_bytes(path)
    if buf[:4] != FSTR_MAGIC:
        raise BadMagicError(f"{path}: bad magic {buf[:4]!r} (want {FSTR_MAGIC!r})")
    if len(buf) < 20:
        raise TruncatedFileError(f"{path}: header needs 20 bytes, got {len(buf)}")
    version, dim, count, num_classes = struct.unpack_from("<IIII", buf, 4)
    if version != FSTR_VERSION:
        raise DataFormatError(f"{path}: unsupported FSTR version {version}")
    rec = np.dtype([("x", "<f4", (dim,)), ("y", "<u2")])
    payload = len(buf) - 20
    if payload < count * rec.itemsize:
        raise TruncatedFileError(f"{path}: {count} records of {rec.itemsize} bytes declared, payload has {payload}")
    if payload != count * rec.itemsize:
        raise DimMismatchError(f"{path}: payload of {payload} bytes is not {count} records of dim {dim}")
    data = np.frombuffer(buf, rec, count, 20)
    labels = data["y"].astype(np.int64)
    if count and labels.max() >= num_classes:
        raise DataFormatError(f"{path}: label {labels.max()} >= num_classes {num_classes}")
    return data["x"].astype(np.float64), labels, num_classes


def feature_subset(dim: int, k: int, seed: int) -> np.ndarray:
    """Fixed random subset of ``k`` column indices, sorted."""
    if not 0 < k <= dim:
        raise DimMismatchError(f"cannot select {k} of {dim} features")
    return np.sort(RngStream(seed, 0x73756273).permutation(dim)[:k])


def parse_features(path, subset: int | None = None, subset_seed: int = 0):
    """Read FSTR features, optionally keeping a seeded subset of columns."""
    x, y, num_classes = read_features(path)
    if subset is not None:
        x = x[:, feature_subset(x.shape[1], subset, subset_seed)]
    return x, y


def write_features(path, features, labels, num_classes: int) -> None:
    features = np.asarray(features, dtype="<f4")
    count, dim = features.shape
    rec = np.empty(count, dtype=[("x", "<f4", (dim,)), ("y", "<u2")])
    rec["x"] = features
    rec["y"] = labels
    Path(path).write_bytes(FSTR_MAGIC + struct.pack("<IIII", FSTR_VERSION, dim, count, num_classes) + rec.tobytes())


@dataclass
class StreamEvent:
    features: np.ndarray
    label: int
    task_id: int
    step: int


@dataclass
class Task:
    """One task: its training events (in stream order) and test split."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    name: str = ""


@dataclass
class TaskSequence:
    tasks: list[Task]
    num_classes: int
    class_counts: np.ndarray = field(default=None)
    low_freq: frozenset = frozenset()
    input_perms: list | None = None  # per-task pixel permutation, when inputs are permuted

    @property
    def n_tasks(self) -> int:
        return len(self.tasks)

    @property
    def dim(self) -> int:
        return self.tasks[0].x_train.shape[1]

    def events(self) -> Iterator[StreamEvent]:
        step = 0
        for t, task in enumerate(self.tasks):
            for x, y in zip(task.x_train, task.y_train):
                yield StreamEvent(x, int(y), t, step)
                step += 1

    def __len__(self) -> int:
        return sum(len(t.y_train) for t in self.tasks)


def stream_order(n_available: int, n_events: int, rng: RngStream) -> np.ndarray:
    """Seeded visiting order; passes over the data are reshuffled when
    ``n_events`` exceeds the number of available samples."""
    reps = -(-n_events // n_available)
    return np.concatenate([rng.permutation(n_available) for _ in range(reps)])[:n_events]


def permuted_mnist(
    x_train, y_train, x_test, y_test, n_tasks: int, seed: int, samples_per_task: int | None = None
) -> TaskSequence:
    """Permuted-MNIST tasks from standardized images. Task 0 is unpermuted."""
    root = RngStream(seed)
    n = samples_per_task or len(y_train)
    tasks, perms = [], []
    for t in range(n_tasks):
        task_seed = 0 if t == 0 else int(root.child("perm", t).integers(1, 2**63))
        perm = task_permutation(x_train.shape[1], task_seed)
        order = stream_order(len(y_train), n, root.child("order", t))
        tasks.append(
            Task(x_train[order][:, perm], y_train[order], x_test[:, perm], y_test, name=f"pmnist-{t}")
        )
        perms.append(perm)
    C = int(max(y_train.max(), y_test.max())) + 1
    counts = np.bincount(np.concatenate([t.y_train for t in tasks]), minlength=C)
    return TaskSequence(tasks, C, counts, input_perms=perms)


def sphere_means(C: int, dims: int, radius: float, rng: RngStream) -> np.ndarray:
    m = rng.normal((C, dims))
    return radius * m / np.linalg.norm(m, axis=1, keepdims=True)


def synthetic_imbalanced(
    C: int,
    dims: int,
    freq,
    noise_std: float,
    rng: RngStream,
    radius: float = 1.0,
    test_per_class: int = 0,
    low_freq_threshold: int = 0,
    means=None,
) -> TaskSequence:
    """Gaussian blobs with exact per-class counts, shuffled into one task."""
    freq = np.asarray(freq, dtype=np.int64)
    if len(freq) != C or freq.min() < 1:
        raise ValueError("freq needs C entries, each >= 1")
    if means is None:
        means = sphere_means(C, dims, radius, rng.child("means"))
    y = np.repeat(np.arange(C), freq)
    x = means[y] + noise_std * rng.child("noise").normal((len(y), dims))
    order = rng.child("order").permutation(len(y))
    y_test = np.repeat(np.arange(C), test_per_class)
    x_test = means[y_test] + noise_std * rng.child("test").normal((len(y_test), dims))
    low = frozenset(int(c) for c in np.flatnonzero(freq < low_freq_threshold))
    return TaskSequence([Task(x[order], y[order], x_test, y_test, "synthetic")], C, freq.copy(), low)


def subsample_low_freq(seq: TaskSequence, threshold_count: int, removal_range=(0.5, 0.8), rng: RngStream = None) -> TaskSequence:
    """Drop a random fraction (drawn per class from ``removal_range``) of the
    training events of every class with fewer than ``threshold_count`` of them."""
    lo, hi = removal_range
    if not 0.0 <= lo <= hi <= 1.0:
        raise ValueError("removal range must lie within [0, 1]")
    rng = rng or RngStream(0)
    tasks = []
    for ti, task in enumerate(seq.tasks):
        counts = np.bincount(task.y_train, minlength=seq.num_classes)
        keep = np.ones(len(task.y_train), dtype=bool)
        for c in np.flatnonzero((counts > 0) & (counts < threshold_count)):
            crng = rng.child("subsample", ti, int(c))
            frac = lo if lo == hi else float(crng.uniform(lo, hi))
            idx = np.flatnonzero(task.y_train == c)
            n_remove = int(round(frac * len(idx)))
            keep[idx[crng.permutation(len(idx))[:n_remove]]] = False
        tasks.append(Task(task.x_train[keep], task.y_train[keep], task.x_test, task.y_test, task.name))
    counts = sum(np.bincount(t.y_train, minlength=seq.num_classes) for t in tasks)
    low = frozenset(int(c) for c in np.flatnonzero(counts < threshold_count))
    return TaskSequence(tasks, seq.num_classes, counts, low | seq.low_freq)


def uniform_noise_images(n: int, dim: int, rng: RngStream) -> np.ndarray:
    """OOD fallback: i.i.d. uniform pixels in [0, 1]."""
    return rng.uniform01((n, dim))


def imbalanced_freq(C: int, majority: int, low_classes: int, low_fraction: float) -> np.ndarray:
    """Per-class counts: the last ``low_classes`` classes get ``low_fraction`` of the majority count."""
    if not 0 <= low_classes <= C:
        raise ValueError("low_classes must lie in [0, C]")
    freq = np.full(C, int(majority), dtype=np.int64)
    if low_classes:
        freq[C - low_classes :] = max(1, int(round(low_fraction * majority)))
    return freq


def synthetic_tasks(
    C: int,
    dims: int,
    freq,
    noise_std: float,
    rng: RngStream,
    n_tasks: int = 1,
    distinct_tasks: int | None = None,
    radius: float = 1.0,
    test_per_class: int = 0,
    low_freq_threshold: int = 0,
) -> TaskSequence:
    """Blob tasks sharing one set of class means.

    Task ``t`` is problem ``t % distinct_tasks``; problem 0 keeps the labels,
    problem ``p > 0`` relabels classes by a seeded permutation. Every task draws
    fresh training noise; each problem's test set is drawn once and reused.
    """
    distinct = distinct_tasks or n_tasks
    if not 1 <= distinct <= n_tasks:
        raise ValueError("distinct_tasks must lie in [1, n_tasks]")
    means = sphere_means(C, dims, radius, rng.child("means"))
    relabel = [np.arange(C)] + [rng.child("relabel", p).permutation(C) for p in range(1, distinct)]
    tests = [
        synthetic_imbalanced(C, dims, np.ones(C, np.int64), noise_std, rng.child("test", p), means=means,
                             test_per_class=test_per_class)
        for p in range(distinct)
    ]
    tasks = []
    for t in range(n_tasks):
        p = t % distinct
        base = synthetic_imbalanced(C, dims, freq, noise_std, rng.child("task", t), means=means,
                                    low_freq_threshold=low_freq_threshold).tasks[0]
        tst = tests[p].tasks[0]
        tasks.append(Task(base.x_train, relabel[p][base.y_train], tst.x_test, relabel[p][tst.y_test], f"blobs-{p}"))
    # low-frequency flags follow problem 0's labelling
    low = frozenset(int(c) for c in np.flatnonzero(np.asarray(freq) < low_freq_threshold))
    counts = sum(np.bincount(t.y_train, minlength=C) for t in tasks)
    return TaskSequence(tasks, C, counts, low)
