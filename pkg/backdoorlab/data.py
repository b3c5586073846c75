"""
Dataset ingestion, splits and subsampling.

Datasets are immutable: image and label arrays are marked read-only at
construction and every operation returns a new Dataset. Each dataset keeps
`source_indices` (positions in the dataset it was cut from) so partitions
can be checked for disjointness, and `original_labels` once labels have
been rewritten by poisoning or ASR-set construction.
"""

from __future__ import annotations

import gzip
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, NamedTuple, Optional

import numpy as np
import numpy.typing as npt

from .models import SplitSpec
from .nn_core import Batch


logger = logging.getLogger(__name__)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(Exception):
    """Base exception for dataset errors."""
    pass


class IdxFormatError(DatasetError):
    """Raised when an IDX file is malformed."""

    def __init__(self, path: Path, message: str) -> None:
        super().__init__(f"{path}: {message}")
        self.path = path


class CountMismatchError(DatasetError):
    """Raised when image and label files disagree on the number of samples."""
    pass


@dataclass(frozen=True)
class Dataset:
    """
    Labelled images.

    Attributes:
        images: (N, c, h, w) float32 in [0, 1]
        labels: (N,) int64 in [0, num_classes)
        num_classes: Class count k
        name: Human-readable name
        provenance: Where the data came from (file paths, generator seed, poisoning digest)
        source_indices: Position of each sample in the parent dataset
        original_labels: Labels before any rewrite, when they differ from `labels`
    """
    images: npt.NDArray[np.float32]
    labels: npt.NDArray[np.int64]
    num_classes: int
    name: str = "dataset"
    provenance: dict[str, Any] = field(default_factory=dict)
    source_indices: Optional[npt.NDArray[np.int64]] = None
    original_labels: Optional[npt.NDArray[np.int64]] = None

    def __post_init__(self) -> None:
        images = np.asarray(self.images, dtype=np.float32)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4:
            raise DatasetError(f"{self.name}: images must be (N, c, h, w), got {images.shape}")
        n = images.shape[0]
        if labels.shape != (n,):
            raise DatasetError(f"{self.name}: {n} images but labels of shape {labels.shape}")
        if self.num_classes < 2:
            raise DatasetError(f"{self.name}: need at least 2 classes, got {self.num_classes}")
        if n and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise DatasetError(f"{self.name}: labels must lie in [0, {self.num_classes})")
        if n and (not np.all(np.isfinite(images)) or images.min() < 0.0 or images.max() > 1.0):
            raise DatasetError(f"{self.name}: pixel values must lie in [0, 1]")

        indices = np.arange(n, dtype=np.int64) if self.source_indices is None \
            else np.asarray(self.source_indices, dtype=np.int64)
        if indices.shape != (n,):
            raise DatasetError(f"{self.name}: source_indices must have length {n}")
        originals = None if self.original_labels is None \
            else np.asarray(self.original_labels, dtype=np.int64)
        if originals is not None and originals.shape != (n,):
            raise DatasetError(f"{self.name}: original_labels must have length {n}")

        for array in (images, labels, indices, originals):
            if array is not None:
                array.flags.writeable = False
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "source_indices", indices)
        object.__setattr__(self, "original_labels", originals)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.images.shape[1:])  # type: ignore[return-value]

    @property
    def true_labels(self) -> npt.NDArray[np.int64]:
        return self.labels if self.original_labels is None else self.original_labels

    def class_counts(self) -> npt.NDArray[np.int64]:
        return np.bincount(self.labels, minlength=self.num_classes)

    def take(self, indices: npt.ArrayLike, name: Optional[str] = None) -> "Dataset":
        """Subset in the given order; source_indices keep pointing at the parent."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            images=self.images[idx],
            labels=self.labels[idx],
            num_classes=self.num_classes,
            name=name or self.name,
            provenance=dict(self.provenance),
            source_indices=self.source_indices[idx],
            original_labels=None if self.original_labels is None else self.original_labels[idx],
        )

    def batch(self, indices: npt.ArrayLike) -> Batch:
        idx = np.asarray(indices, dtype=np.int64)
        return Batch(self.images[idx], self.labels[idx])


def _open_idx(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path: Path, magic: int, ndims: int) -> tuple[tuple[int, ...], bytes]:
    if not path.exists():
        raise DatasetError(f"IDX file not found: {path}")
    with _open_idx(path) as f:
        raw = f.read()
    header_len = 4 + 4 * ndims
    if len(raw) < header_len:
        raise IdxFormatError(path, f"file is {len(raw)} bytes, shorter than its {header_len}-byte header")
    (found,) = struct.unpack_from(">I", raw, 0)
    if found != magic:
        raise IdxFormatError(path, f"magic 0x{found:08x} does not match expected 0x{magic:08x}")
    dims = struct.unpack_from(f">{ndims}I", raw, 4)
    body = raw[header_len:]
    expected = int(np.prod(dims)) if dims else 0
    if len(body) != expected:
        raise IdxFormatError(path, f"header declares {expected} data bytes but file holds {len(body)}")
    return dims, body


def load_idx(
    images_path: Path,
    labels_path: Path,
    num_classes: Optional[int] = None,
    name: Optional[str] = None,
) -> Dataset:
    """
    Load an MNIST-family image/label IDX pair; pixels are scaled by 1/255.

    Args:
        images_path: Image file (magic 0x00000803, dims N, h, w); `.gz` is decompressed
        labels_path: Label file (magic 0x00000801, dim N)
        num_classes: Class count; defaults to max(label) + 1 (at least 2)
        name: Dataset name

    Raises:
        IdxFormatError: Magic or length problems, naming the file
        CountMismatchError: Image and label counts differ
    """
    images_path, labels_path = Path(images_path), Path(labels_path)
    (n_images, rows, cols), pixel_bytes = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    (n_labels,), label_bytes = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if n_images != n_labels:
        raise CountMismatchError(
            f"{images_path} holds {n_images} images but {labels_path} holds {n_labels} labels"
        )
    images = np.frombuffer(pixel_bytes, dtype=np.uint8).reshape(n_images, 1, rows, cols)
    labels = np.frombuffer(label_bytes, dtype=np.uint8).astype(np.int64)
    k = num_classes if num_classes is not None else max(int(labels.max(initial=0)) + 1, 2)
    if labels.size and labels.max() >= k:
        raise IdxFormatError(labels_path, f"label {int(labels.max())} is outside {k} classes")

    logger.info("IDX dataset loaded", extra={
        "images": str(images_path), "labels": str(labels_path), "count": n_images
    })
    return Dataset(
        images=images.astype(np.float32) / 255.0,
        labels=labels,
        num_classes=k,
        name=name or images_path.stem,
        provenance={"images_path": str(images_path), "labels_path": str(labels_path)},
    )


def write_idx(dataset: Dataset, images_path: Path, labels_path: Path) -> None:
    """Write a single-channel dataset as an IDX pair (pixels rounded to bytes)."""
    n, c, h, w = dataset.images.shape
    if c != 1:
        raise DatasetError(f"IDX stores grayscale images only, dataset has {c} channels")
    pixels = np.rint(dataset.images[:, 0] * 255.0).astype(np.uint8)
    images_path.parent.mkdir(parents=True, exist_ok=True)
    labels_path.parent.mkdir(parents=True, exist_ok=True)
    images_path.write_bytes(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, h, w) + pixels.tobytes())
    labels_path.write_bytes(
        struct.pack(">II", IDX_LABELS_MAGIC, n) + dataset.labels.astype(np.uint8).tobytes()
    )


def gen_synthetic(
    k: int,
    n_per_class: int,
    image_size: int,
    seed: int,
    channels: int = 1,
    noise: float = 0.08,
    name: str = "synthetic",
    flip: float = 0.0,
) -> Dataset:
    """
    Class-conditional images: a per-class blocky base pattern plus seeded noise.

    Each class owns a distinct 4x4 grid of dark/bright cells upsampled to the
    image size; samples add Gaussian noise of std `noise` and are clipped.
    With `flip` > 0 every sample inverts each of its grid cells independently
    with that probability, so classes overlap and the data is not separable.
    """
    if k < 2:
        raise DatasetError(f"synthetic data needs k >= 2 classes, got {k}")
    if not 0.0 <= flip < 0.5:
        raise DatasetError(f"cell flip probability must be in [0, 0.5), got {flip}")
    rng = np.random.default_rng(seed)
    cells = 4
    levels = np.array([0.15, 0.6], dtype=np.float32)
    codes: set[bytes] = set()
    bases = []
    while len(bases) < k:
        grid = rng.integers(0, 2, size=(channels, cells, cells))
        key = grid.tobytes()
        if key in codes:
            continue
        codes.add(key)
        bases.append(grid)
    repeat = -(-image_size // cells)
    block = np.ones((1, 1, repeat, repeat), dtype=np.int64)

    def render(grids: npt.NDArray[np.int64]) -> npt.NDArray[np.float32]:
        return levels[np.kron(grids, block)[:, :, :image_size, :image_size]]

    labels = rng.permutation(np.repeat(np.arange(k, dtype=np.int64), n_per_class))
    jitter = noise * rng.standard_normal((labels.size, channels, image_size, image_size)).astype(np.float32)
    grids = np.stack(bases)[labels]
    if flip > 0.0:
        grids = grids ^ (rng.random(grids.shape) < flip)
    images = np.clip(render(grids) + jitter, 0.0, 1.0).astype(np.float32)
    return Dataset(
        images=images.reshape(labels.size, channels, image_size, image_size),
        labels=labels,
        num_classes=k,
        name=name,
        provenance={
            "generator": "synthetic", "seed": seed, "noise": noise, "flip": flip, "n_per_class": n_per_class,
        },
    )


class Partitions(NamedTuple):
    train: Dataset
    test: Dataset
    heldout: Dataset


def split(dataset: Dataset, spec: SplitSpec) -> Partitions:
    """
    Seeded shuffle into disjoint, exhaustive train/test/held-out parts.

    Test and held-out sizes are floor(fraction * N); train takes the rest.
    """
    n = len(dataset)
    order = np.random.default_rng(spec.seed).permutation(n)
    n_test = int(np.floor(spec.test * n))
    n_heldout = int(np.floor(spec.heldout * n))
    n_train = n - n_test - n_heldout
    return Partitions(
        train=dataset.take(order[:n_train], name=f"{dataset.name}-train"),
        test=dataset.take(order[n_train:n_train + n_test], name=f"{dataset.name}-test"),
        heldout=dataset.take(order[n_train + n_test:], name=f"{dataset.name}-heldout"),
    )


def subsample(dataset: Dataset, fraction: float, seed: int) -> Dataset:
    """
    Class-stratified seeded subsample of floor(fraction * N) samples.

    Each class receives floor(fraction * n_c) samples; the remainder goes to
    the classes with the largest fractional parts (seeded tie-break), so every
    class is within one sample of proportional.
    """
    if not 0.0 < fraction <= 1.0:
        raise DatasetError(f"subsample fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    n = len(dataset)
    total = int(np.floor(fraction * n))
    counts = dataset.class_counts()
    exact = fraction * counts
    quota = np.floor(exact).astype(np.int64)
    remainder = total - int(quota.sum())
    if remainder > 0:
        tiebreak = rng.random(counts.size)
        order = np.lexsort((tiebreak, -(exact - quota)))
        eligible = [c for c in order if quota[c] < counts[c]]
        for c in eligible[:remainder]:
            quota[c] += 1

    chosen = []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if quota[c]:
            chosen.append(rng.choice(members, size=int(quota[c]), replace=False))
    picked = np.concatenate(chosen) if chosen else np.zeros(0, dtype=np.int64)
    picked = rng.permutation(picked)
    logger.debug("Subsampled dataset", extra={"name": dataset.name, "fraction": fraction, "size": picked.size})
    return dataset.take(picked, name=f"{dataset.name}-sub{fraction:g}")
