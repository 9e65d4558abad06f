"""Datasets, binary loaders, Dirichlet partitioning and per-class sampling."""
from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_IMAGE_BYTES = 3 * 32 * 32


class DataFormatError(ValueError):
    """A dataset file could not be parsed."""


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    num_classes: int
    name: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.x.shape[0] != self.y.shape[0]:
            raise ValueError(f"{self.x.shape[0]} examples but {self.y.shape[0]} labels")
        if self.y.size and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    def __len__(self):
        return self.y.shape[0]

    @property
    def example_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    @property
    def example_floats(self) -> int:
        return int(np.prod(self.example_shape))

    def subset(self, indices, name=None) -> "Dataset":
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.x[indices], self.y[indices], self.num_classes, name or self.name)

    def classes_present(self) -> list[int]:
        return [int(c) for c in np.unique(self.y)]

    def class_indices(self) -> dict[int, np.ndarray]:
        return {c: np.flatnonzero(self.y == c) for c in self.classes_present()}


@dataclass
class Partition:
    index_sets: list[np.ndarray]
    alpha: float
    seed: int

    @property
    def num_clients(self) -> int:
        return len(self.index_sets)

    @property
    def sizes(self) -> list[int]:
        return [len(s) for s in self.index_sets]

    def class_histograms(self, labels, num_classes) -> np.ndarray:
        labels = np.asarray(labels)
        return np.stack([np.bincount(labels[s], minlength=num_classes) for s in self.index_sets])


# generators ----------------------------------------------------------------------

def gen_1d_binary(n, seed, rule="flip"):
    """The 1-D binary problem: x ~ N(0, 1), labels follow sign(x) with 10% noise.

    ``rule="flip"``: y = 1 iff (x >= 0 and p >= 0.1) or (x < 0 and p < 0.1),
    so each label disagrees with sign(x) with probability 0.1.
    ``rule="literal"``: y = 1 iff (x >= 0 and p >= 0.9) or (x < 0 and p < 0.1),
    which makes y = 1 with probability 0.1 regardless of x.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    p = rng.uniform(0.0, 1.0, n)
    if rule == "flip":
        pos_thresh = 0.1
    elif rule == "literal":
        pos_thresh = 0.9
    else:
        raise ValueError(f"unknown label rule {rule!r}")
    y = ((x >= 0) & (p >= pos_thresh)) | ((x < 0) & (p < 0.1))
    return Dataset(x.reshape(n, 1), y.astype(np.int64), 2, name="1d-binary")


def blob_centers(num_classes, dim):
    if dim == 1:
        return (2.0 * np.arange(num_classes, dtype=np.float64)).reshape(-1, 1)
    radius = 2.0 * max(1.0, num_classes / 4.0)
    angles = 2.0 * np.pi * np.arange(num_classes) / num_classes
    centers = np.zeros((num_classes, dim))
    centers[:, 0] = radius * np.cos(angles)
    centers[:, 1] = radius * np.sin(angles)
    return centers


def gen_blobs(n_per_class, num_classes, dim, spread, seed):
    """Balanced isotropic Gaussian clusters at fixed, seed-independent centers."""
    if min(n_per_class, num_classes, dim) < 1 or spread < 0:
        raise ValueError("gen_blobs needs positive sizes and a non-negative spread")
    rng = np.random.default_rng(seed)
    centers = blob_centers(num_classes, dim)
    y = np.repeat(np.arange(num_classes), n_per_class)
    x = centers[y] + spread * rng.standard_normal((y.size, dim))
    order = rng.permutation(y.size)
    return Dataset(x[order], y[order], num_classes, name="blobs")


# IDX (MNIST) -----------------------------------------------------------------------

def _open_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def read_idx(path) -> np.ndarray:
    """Parse an unsigned-byte IDX file into a uint8 array."""
    raw = _open_bytes(path)
    if len(raw) < 4:
        raise DataFormatError(f"{path}: truncated IDX header at byte offset {len(raw)} (need 4 bytes)")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic >> 8 != 0x08 or magic & 0xFF == 0:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x} at byte offset 0")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataFormatError(f"{path}: truncated IDX header at byte offset {len(raw)} (need {header} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = int(np.prod(dims))
    body = len(raw) - header
    if body < expected:
        raise DataFormatError(
            f"{path}: truncated IDX data at byte offset {len(raw)}: expected {expected} bytes "
            f"after the header at offset {header}, found {body}")
    return np.frombuffer(raw, dtype=np.uint8, count=expected, offset=header).reshape(dims)


def write_idx(path, array) -> None:
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("write_idx only writes unsigned-byte arrays")
    header = struct.pack(">I", 0x0800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    Path(path).write_bytes(header + array.tobytes())


def load_idx(images_path, labels_path, num_classes=10, name="mnist") -> Dataset:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if 0x0800 | images.ndim != IDX_IMAGES_MAGIC:
        raise DataFormatError(f"{images_path}: expected a 3-D image file (magic 0x{IDX_IMAGES_MAGIC:08x}), "
                              f"got {images.ndim}-D")
    if labels.ndim != 1:
        raise DataFormatError(f"{labels_path}: expected a 1-D label file (magic 0x{IDX_LABELS_MAGIC:08x}), "
                              f"got {labels.ndim}-D")
    if images.shape[0] != labels.shape[0]:
        raise DataFormatError(f"image/label count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), num_classes, name=name)


# CIFAR binary ------------------------------------------------------------------------

def load_cifar_bin(paths, num_classes=10, label_bytes=1, name="cifar10") -> Dataset:
    """Read one or more CIFAR binary batch files.

    Each record is ``label_bytes`` label bytes followed by 3072 pixel bytes
    (channel-major 3x32x32). With ``label_bytes=2`` (CIFAR-100) the second
    (fine) label byte is used.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    record = label_bytes + CIFAR_IMAGE_BYTES
    xs, ys = [], []
    for path in paths:
        raw = _open_bytes(path)
        if len(raw) == 0 or len(raw) % record:
            raise DataFormatError(f"{path}: size {len(raw)} is not a positive multiple of the "
                                  f"{record}-byte record length")
        arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, record)
        ys.append(arr[:, label_bytes - 1].astype(np.int64))
        xs.append(arr[:, label_bytes:].reshape(-1, 3, 32, 32))
    x = np.concatenate(xs).astype(np.float64) / 255.0
    y = np.concatenate(ys)
    if y.max() >= num_classes:
        raise DataFormatError(f"label {int(y.max())} out of range for {num_classes} classes")
    return Dataset(x, y, num_classes, name=name)


def write_cifar_bin(path, images, labels) -> None:
    images = np.asarray(images, dtype=np.uint8).reshape(len(labels), CIFAR_IMAGE_BYTES)
    labels = np.asarray(labels, dtype=np.uint8).reshape(-1, 1)
    Path(path).write_bytes(np.hstack([labels, images]).tobytes())


def select_classes(dataset: Dataset, classes, per_class=None, seed=0) -> Dataset:
    """Keep only ``classes`` (relabelled 0..len-1), optionally ``per_class`` examples each."""
    rng = np.random.default_rng(seed)
    keep = []
    for c in classes:
        idx = np.flatnonzero(dataset.y == c)
        if per_class is not None and len(idx) > per_class:
            idx = np.sort(rng.choice(idx, per_class, replace=False))
        keep.append(idx)
    keep = np.sort(np.concatenate(keep))
    remap = {c: i for i, c in enumerate(classes)}
    y = np.array([remap[int(c)] for c in dataset.y[keep]], dtype=np.int64)
    return Dataset(dataset.x[keep], y, len(classes), name=dataset.name)


# partitioning ----------------------------------------------------------------------

def largest_remainder(proportions, total) -> np.ndarray:
    """Integer counts summing to ``total`` that best follow ``proportions``."""
    raw = np.asarray(proportions, dtype=np.float64) * total
    counts = np.floor(raw).astype(np.int64)
    short = int(total - counts.sum())
    if short:
        # stable sort: ties go to the lower client index
        order = np.argsort(-(raw - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def _dirichlet_once(labels, num_clients, alpha, rng):
    buckets = [[] for _ in range(num_clients)]
    for c in np.unique(labels):
        idx = rng.permutation(np.flatnonzero(labels == c))
        props = rng.dirichlet(np.full(num_clients, alpha))
        if not np.all(np.isfinite(props)) or props.sum() <= 0:
            # Tiny alpha can underflow every gamma draw; fall back to one random owner.
            props = np.zeros(num_clients)
            props[rng.integers(num_clients)] = 1.0
        counts = largest_remainder(props / props.sum(), len(idx))
        for k, chunk in enumerate(np.split(idx, np.cumsum(counts)[:-1])):
            buckets[k].append(chunk)
    return [np.sort(np.concatenate(b)) if b else np.zeros(0, dtype=np.int64) for b in buckets]


def dirichlet_partition(labels, num_clients, alpha, seed, max_retries=100) -> Partition:
    """Class-wise Dirichlet split of example indices across clients.

    Each class's indices are shuffled and divided by proportions drawn from
    Dir(alpha * 1_K), rounded with the largest-remainder rule. Draws that
    leave a client empty are retried up to ``max_retries`` times; after that
    single examples are moved from the largest client to each empty one.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    if num_clients < 1:
        raise ValueError("num_clients must be at least 1")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if n < num_clients:
        raise ValueError(f"cannot give each of {num_clients} clients an example from {n} examples")
    rng = np.random.default_rng(seed)
    for _ in range(max_retries + 1):
        sets = _dirichlet_once(labels, num_clients, alpha, rng)
        if all(len(s) for s in sets):
            break
    else:
        log.debug("dirichlet_partition: forcing transfers after %d retries", max_retries)
        for k in range(num_clients):
            if len(sets[k]) == 0:
                donor = int(np.argmax([len(s) for s in sets]))
                moved = sets[donor][-1]
                sets[donor] = sets[donor][:-1]
                sets[k] = np.array([moved], dtype=np.int64)
    return Partition([s.astype(np.int64) for s in sets], float(alpha), int(seed) if np.isscalar(seed) else 0)


def label_entropy(counts) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum()) + 0.0  # avoid -0.0 for single-class rows


# sampling ----------------------------------------------------------------------------

def sample_indices(population, size, rng) -> np.ndarray:
    """``size`` positions into ``population``: without replacement when possible,
    otherwise every element once (shuffled) plus a with-replacement top-up."""
    population = np.asarray(population)
    n = population.shape[0]
    if n == 0:
        raise ValueError("cannot sample from an empty population")
    if n >= size:
        return population[rng.choice(n, size, replace=False)]
    extra = rng.integers(0, n, size - n)
    return np.concatenate([population[rng.permutation(n)], population[extra]])


def sample_class_batch(dataset: Dataset, c, size, seed):
    """Uniform batch of class-``c`` examples from ``dataset``; returns ``(x, y)``."""
    idx = np.flatnonzero(dataset.y == c)
    if idx.size == 0:
        raise ValueError(f"class {c} is absent from {dataset.name or 'the dataset'}")
    picked = sample_indices(idx, size, np.random.default_rng(seed))
    return dataset.x[picked], dataset.y[picked]
