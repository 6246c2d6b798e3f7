"""Datasets: IDX files, synthetic generators, label noise, batching.

IDX is the classic big-endian binary layout: images carry magic
0x00000803 and dims (N, rows, cols), labels carry magic 0x00000801 and
dims (N,); payloads are unsigned bytes. Loaded pixels are scaled to
[0, 1] and then normalized by a supplied mean/std.

Synthetic datasets are generated in [0, 1] so they can round-trip through
the same uint8 files, which is how the desk-scale experiments build their
training corpora.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import seeding
from .errors import DataFormatError, ShapeError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


@dataclass(frozen=True)
class LabeledDataset:
    inputs: np.ndarray   # (N, ...) float64
    labels: np.ndarray   # (N,) int64 in [0, classes)
    classes: int

    def __post_init__(self):
        x = np.asarray(self.inputs, dtype=np.float64)
        y = np.asarray(self.labels, dtype=np.int64)
        if x.ndim < 2 or x.shape[0] == 0:
            raise ShapeError(f"inputs must be (N, ...) with N >= 1, got {x.shape}", name="inputs")
        if y.shape != (x.shape[0],):
            raise ShapeError(f"labels shape {y.shape} does not match {x.shape[0]} samples",
                             name="labels")
        if self.classes < 2:
            raise ShapeError(f"need at least 2 classes, got {self.classes}", name="classes")
        if y.size and (y.min() < 0 or y.max() >= self.classes):
            raise ShapeError(f"labels must lie in [0, {self.classes}), got range "
                             f"[{y.min()}, {y.max()}]", name="labels")
        object.__setattr__(self, "inputs", x)
        object.__setattr__(self, "labels", y)

    def __len__(self):
        return self.inputs.shape[0]


@dataclass(frozen=True)
class NoiseSpec:
    ratio: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise ShapeError(f"noise ratio must lie in [0, 1], got {self.ratio}", name="ratio")


def _read_idx_header(fh, path, expected_magic, expected_rank):
    head = fh.read(4)
    if len(head) != 4:
        raise DataFormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">i", head)
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}, "
                              f"expected 0x{expected_magic:08x}")
    dims = []
    for _ in range(expected_rank):
        raw = fh.read(4)
        if len(raw) != 4:
            raise DataFormatError(f"{path}: truncated IDX dimension header")
        (d,) = struct.unpack(">i", raw)
        if d <= 0:
            raise DataFormatError(f"{path}: non-positive IDX dimension {d}")
        dims.append(d)
    return tuple(dims)


def load_idx(images_path, labels_path, *, mean: float = 0.0, std: float = 1.0,
             classes: int | None = None) -> LabeledDataset:
    """Load an images/labels IDX pair into a normalized float dataset."""
    if std == 0:
        raise DataFormatError("normalization std must be nonzero")
    with open(images_path, "rb") as fh:
        n, rows, cols = _read_idx_header(fh, images_path, IDX_IMAGE_MAGIC, 3)
        raw = fh.read(n * rows * cols)
        if len(raw) != n * rows * cols:
            raise DataFormatError(f"{images_path}: expected {n * rows * cols} pixel bytes, "
                                  f"got {len(raw)}")
        if fh.read(1):
            raise DataFormatError(f"{images_path}: trailing bytes after pixel data")
        images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols)
    with open(labels_path, "rb") as fh:
        (n_labels,) = _read_idx_header(fh, labels_path, IDX_LABEL_MAGIC, 1)
        raw = fh.read(n_labels)
        if len(raw) != n_labels:
            raise DataFormatError(f"{labels_path}: expected {n_labels} label bytes, got {len(raw)}")
        if fh.read(1):
            raise DataFormatError(f"{labels_path}: trailing bytes after label data")
        labels = np.frombuffer(raw, dtype=np.uint8)
    if n != n_labels:
        raise DataFormatError(f"image count {n} does not match label count {n_labels}")
    inputs = (images.astype(np.float64) / 255.0 - mean) / std
    k = int(labels.max()) + 1 if classes is None else classes
    return LabeledDataset(inputs=inputs, labels=labels.astype(np.int64), classes=k)


def save_idx(dataset: LabeledDataset, images_path, labels_path):
    """Write a dataset whose inputs live in [0, 1] as a uint8 IDX pair."""
    x = dataset.inputs
    if x.ndim != 3:
        raise ShapeError(f"IDX export needs (N, rows, cols) inputs, got {x.shape}", name="inputs")
    if x.min() < 0.0 or x.max() > 1.0:
        raise ShapeError("IDX export needs inputs in [0, 1]", name="inputs")
    if dataset.classes > 256:
        raise ShapeError("IDX labels are bytes; need classes <= 256", name="classes")
    pixels = np.round(x * 255.0).astype(np.uint8)
    n, rows, cols = pixels.shape
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        fh.write(pixels.tobytes(order="C"))
    with open(labels_path, "wb") as fh:
        fh.write(struct.pack(">ii", IDX_LABEL_MAGIC, n))
        fh.write(dataset.labels.astype(np.uint8).tobytes())


def _balanced_labels(n: int, classes: int) -> np.ndarray:
    """Class counts within +-1, remainders assigned to the earliest classes."""
    counts = [n // classes + (1 if c < n % classes else 0) for c in range(classes)]
    return np.repeat(np.arange(classes, dtype=np.int64), counts)


def make_synthetic(kind: str, n: int, classes: int, seed: int, *,
                   shape: tuple[int, int] = (28, 28), noise: float = 0.25,
                   contrast: float = 0.3) -> LabeledDataset:
    """Synthetic classification data with inputs in [0, 1].

    gaussians: each class is a blocky low-frequency prototype image plus
    per-pixel gaussian noise, clipped to [0, 1]. ``noise`` sets the pixel
    noise scale, ``contrast`` the prototype amplitude around mid-gray.

    spirals: interleaved 2-D spiral arms mapped into the unit square,
    emitted with input shape (1, 2) so they export to rank-3 IDX files.
    """
    rng = np.random.default_rng(seed)
    labels = _balanced_labels(n, classes)
    if kind == "gaussians":
        rows, cols = shape
        base_r, base_c = max(1, rows // 4), max(1, cols // 4)
        protos = []
        for _ in range(classes):
            low = rng.uniform(-1.0, 1.0, size=(base_r, base_c))
            proto = 0.5 + contrast * np.kron(low, np.ones((rows // base_r + 1, cols // base_c + 1)))[:rows, :cols]
            protos.append(proto)
        protos = np.stack(protos)
        x = protos[labels] + noise * rng.standard_normal((n, rows, cols))
        x = np.clip(x, 0.0, 1.0)
    elif kind == "spirals":
        t = rng.uniform(0.25, 1.0, size=n)
        angle = 2.0 * np.pi * (1.75 * t + labels / classes)
        pts = np.stack([0.5 + 0.45 * t * np.cos(angle), 0.5 + 0.45 * t * np.sin(angle)], axis=1)
        pts += noise * 0.05 * rng.standard_normal((n, 2))
        x = np.clip(pts, 0.0, 1.0).reshape(n, 1, 2)
    else:
        raise ShapeError(f"unknown synthetic kind {kind!r}", name="kind")
    order = rng.permutation(n)
    return LabeledDataset(inputs=x[order], labels=labels[order], classes=classes)


def split(dataset: LabeledDataset, n_first: int) -> tuple[LabeledDataset, LabeledDataset]:
    """Cut one pool into (first n_first samples, the rest).

    Generating a single pool and splitting it keeps train and test on the
    same task; two independent generator calls would draw different class
    prototypes.
    """
    if not 0 < n_first < len(dataset):
        raise ShapeError(f"split point {n_first} outside (0, {len(dataset)})", name="n_first")
    a = LabeledDataset(inputs=dataset.inputs[:n_first], labels=dataset.labels[:n_first],
                       classes=dataset.classes)
    b = LabeledDataset(inputs=dataset.inputs[n_first:], labels=dataset.labels[n_first:],
                       classes=dataset.classes)
    return a, b


def inject_symmetric_noise(dataset: LabeledDataset, spec: NoiseSpec) -> LabeledDataset:
    """Replace round(ratio * N) labels, chosen without replacement, with
    draws uniform over all classes (the true class included). Inputs are
    shared, not copied; the original dataset is untouched."""
    n = len(dataset)
    m = int(round(spec.ratio * n))
    labels = dataset.labels.copy()
    if m:
        rng = np.random.default_rng(spec.seed)
        idx = rng.choice(n, size=m, replace=False)
        labels[idx] = rng.integers(0, dataset.classes, size=m)
    return LabeledDataset(inputs=dataset.inputs, labels=labels, classes=dataset.classes)


def batches(dataset: LabeledDataset, batch_size: int, epoch_seed: int, *,
            augment: bool = False):
    """Yield (inputs, labels) batches for one epoch.

    A full shuffle is drawn from ``epoch_seed``; the last batch keeps the
    remainder. With ``augment`` on, image-shaped samples are mirrored along
    their last axis with probability 0.5 each, seeded by the same stream.
    """
    if batch_size < 1:
        raise ShapeError(f"batch size must be >= 1, got {batch_size}", name="batch_size")
    n = len(dataset)
    rng = np.random.default_rng(epoch_seed)
    order = rng.permutation(n)
    flips = rng.random(n) < 0.5 if augment else None
    can_flip = dataset.inputs.ndim >= 3 and dataset.inputs.shape[-1] >= 2
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        x = dataset.inputs[idx]
        if augment and can_flip:
            take = flips[start : start + batch_size]
            if take.any():
                x = x.copy()
                x[take] = x[take][..., ::-1]
        yield x, dataset.labels[idx]


def epoch_seed(root_seed: int, epoch: int) -> int:
    """Stable per-epoch shuffle seed derived from the experiment seed."""
    return seeding.sub_seed(root_seed, seeding.BATCH, epoch)
