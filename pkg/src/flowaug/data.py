"""Dataset ingestion: synthetic 2-D generators, IDX files, stratified subsets."""
from __future__ import annotations

import gzip
import hashlib
import math
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES = 0x00000803
IDX_LABELS = 0x00000801
SYNTHETIC = ("gaussian_mixture", "two_arcs", "rings")


class DataError(ValueError):
    pass


@dataclass
class DatasetHandle:
    x: np.ndarray
    y: np.ndarray
    split: str
    n_classes: int
    provenance: dict = field(default_factory=dict)
    image_shape: tuple | None = None

    def __post_init__(self):
        self.y = np.asarray(self.y, dtype=np.int64)
        if self.split not in ("train", "test"):
            raise DataError(f"split must be train or test, got {self.split!r}")
        if len(self.x) == 0 or len(self.x) != len(self.y):
            raise DataError("dataset must be nonempty with one label per input")
        if self.y.min() < 0 or self.y.max() >= self.n_classes:
            raise DataError(f"labels must lie in [0, {self.n_classes})")
        if self.x.min() < 0 or self.x.max() > 1:
            raise DataError("inputs must be scaled to [0, 1]")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def dim(self) -> int:
        return self.x.shape[1]


def read_idx(path) -> np.ndarray:
    """Parse an IDX file (optionally gzipped) holding unsigned bytes."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return parse_idx(raw, source=str(path))


def parse_idx(raw: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(raw) < 4:
        raise DataError(f"{source}: truncated header: expected at least 4 bytes, got {len(raw)}")
    zero, dtype_code, ndim = struct.unpack(">HBB", raw[:4])
    if zero != 0 or dtype_code != 0x08 or ndim == 0:
        raise DataError(f"{source}: bad magic 0x{int.from_bytes(raw[:4], 'big'):08x} at offset 0 "
                        f"(expected 0x00000803 images or 0x00000801 labels)")
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise DataError(f"{source}: truncated header: expected {head} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    expected = head + math.prod(dims)
    if len(raw) != expected:
        raise DataError(f"{source}: truncated or oversized file: expected {expected} bytes, "
                        f"got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=head).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    header = struct.pack(">HBB", 0, 0x08, a.ndim) + struct.pack(f">{a.ndim}I", *a.shape)
    Path(path).write_bytes(header + a.tobytes())


def load_idx_pair(images_path, labels_path, n_classes: int, split: str) -> DatasetHandle:
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise DataError(f"{images_path}: image file must be 3-D (magic 0x00000803)")
    if labels.ndim != 1:
        raise DataError(f"{labels_path}: label file must be 1-D (magic 0x00000801)")
    if len(images) != len(labels):
        raise DataError(f"{len(images)} images but {len(labels)} labels")
    if labels.max() >= n_classes:
        raise DataError(f"{labels_path}: label {int(labels.max())} out of range for "
                        f"{n_classes} classes")
    n, h, w = images.shape
    x = images.reshape(n, h * w).astype(np.float64) / 255.0
    return DatasetHandle(x, labels.astype(np.int64), split, n_classes,
                         {"source": "idx", "images": str(images_path), "labels": str(labels_path)},
                         image_shape=(1, h, w))


def _to_unit(v: np.ndarray, half_width: float) -> np.ndarray:
    return np.clip(0.5 + v / (2 * half_width), 0.0, 1.0)


def gaussian_mixture(n: int, classes: int, noise: float, rng, radius: float = 1.0):
    """Isotropic Gaussian blobs centered evenly on a circle; one blob per class."""
    y = np.arange(n) % classes
    rng.shuffle(y)
    ang = 2 * np.pi * y / classes
    centers = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return centers + noise * rng.standard_normal((n, 2)), y


def two_arcs(n: int, classes: int, noise: float, rng):
    """Interleaved half circles (classes must be 2)."""
    if classes != 2:
        raise DataError("two_arcs has exactly 2 classes")
    y = np.arange(n) % 2
    rng.shuffle(y)
    t = rng.uniform(0, np.pi, n)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(t), np.sin(t)], 1),
                 np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1))
    x = x - np.array([0.5, 0.25])
    return x + noise * rng.standard_normal((n, 2)), y


def rings(n: int, classes: int, noise: float, rng):
    """Concentric rings with radii 1/classes, 2/classes, ..., 1."""
    y = np.arange(n) % classes
    rng.shuffle(y)
    r = (y + 1) / classes
    t = rng.uniform(0, 2 * np.pi, n)
    return r[:, None] * np.stack([np.cos(t), np.sin(t)], 1) + noise * rng.standard_normal((n, 2)), y


_GENERATORS = {"gaussian_mixture": gaussian_mixture, "two_arcs": two_arcs, "rings": rings}


def parse_synthetic_name(name: str, classes: int | None = None) -> tuple[str, int]:
    m = re.fullmatch(r"(gaussian_mixture|two_arcs|rings)(?:_(\d+))?", name)
    if not m:
        raise DataError(f"unknown synthetic dataset {name!r}")
    k = int(m.group(2)) if m.group(2) else classes
    if k is None:
        k = 2
    if classes is not None and m.group(2) and classes != k:
        raise DataError(f"{name!r} names {k} classes but classes={classes}")
    return m.group(1), k


def make_synthetic(name: str, n: int, seed: int, noise: float = 0.1, classes: int | None = None,
                   split: str = "train", half_width: float = 2.0) -> DatasetHandle:
    """Deterministic 2-D toy data mapped affinely from [-half_width, half_width] into [0, 1]."""
    base, k = parse_synthetic_name(name, classes)
    if n < 1:
        raise DataError("n must be >= 1")
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0 if split == "train" else 1]))
    x, y = _GENERATORS[base](n, k, noise, rng)
    prov = {"source": "synthetic", "generator": base, "classes": k, "noise": noise, "n": n,
            "seed": seed, "half_width": half_width}
    return DatasetHandle(_to_unit(x, half_width), y, split, k, prov)


def load_dataset(spec) -> tuple[DatasetHandle, DatasetHandle]:
    """Return (train, test) handles for a DatasetSpec-like object."""
    if spec.name == "idx":
        train = load_idx_pair(spec.train_images, spec.train_labels, spec.classes, "train")
        test = load_idx_pair(spec.test_images, spec.test_labels, spec.classes, "test")
        return train, test
    train = make_synthetic(spec.name, spec.n_train, spec.seed, spec.noise, spec.classes, "train")
    test = make_synthetic(spec.name, spec.n_test, spec.seed, spec.noise, spec.classes, "test")
    return train, test


def _content_keys(x: np.ndarray) -> list[bytes]:
    a = np.ascontiguousarray(x)
    return [hashlib.blake2b(row.tobytes(), digest_size=16).digest() for row in a]


def stratified_counts(class_sizes: np.ndarray, total: int) -> np.ndarray:
    """Largest-remainder allocation of ``total`` proportionally to class sizes."""
    n = class_sizes.sum()
    exact = class_sizes * total / n
    counts = np.floor(exact).astype(int)
    rest = total - counts.sum()
    order = np.lexsort((np.arange(len(exact)), -(exact - counts)))
    counts[order[:rest]] += 1
    return counts


def subset(data: DatasetHandle, fraction: float, seed: int) -> DatasetHandle:
    """Class-stratified subset of ``ceil(fraction * N)`` items.

    Within each class the items are ordered by a content hash before the
    seeded draw, so the selected items do not depend on the source order.
    The subset keeps the source order.
    """
    if not 0 < fraction <= 1:
        raise DataError(f"fraction must lie in (0, 1], got {fraction}")
    if fraction == 1:
        return data
    total = math.ceil(fraction * len(data))
    classes = np.arange(data.n_classes)
    sizes = np.array([np.sum(data.y == c) for c in classes])
    present = sizes > 0
    counts = np.zeros_like(sizes)
    counts[present] = stratified_counts(sizes[present], total)
    if np.any(counts[present] < 1):
        raise DataError(f"fraction {fraction} leaves a class without samples")
    keys = _content_keys(data.x)
    chosen = []
    for c in classes[present]:
        members = np.flatnonzero(data.y == c)
        members = sorted(members, key=lambda i: keys[i])
        rng = np.random.default_rng(np.random.SeedSequence([seed, int(c)]))
        pick = rng.permutation(len(members))[: counts[c]]
        chosen.extend(members[i] for i in pick)
    idx = np.sort(np.asarray(chosen, dtype=np.int64))
    prov = dict(data.provenance, subset_fraction=fraction, subset_seed=seed, subset_size=len(idx))
    return DatasetHandle(data.x[idx], data.y[idx], data.split, data.n_classes, prov,
                         data.image_shape)
