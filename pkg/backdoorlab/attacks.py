"""
Trigger functions, dataset poisoning and triggered evaluation sets.

Triggers are deterministic for a fixed spec: seeded patterns (blend image,
DCT coefficients, warp field) are derived once per (spec, image shape) and
cached read-only.
"""

import logging
from functools import lru_cache
from typing import Union

import numpy as np
import numpy.typing as npt
from scipy import fft, ndimage

from .data import Dataset
from .models import (
    BlendedTrigger,
    LowFreqTrigger,
    PatchPosition,
    PatchTrigger,
    PoisonSpec,
    WarpTrigger,
)


logger = logging.getLogger(__name__)

Trigger = Union[PatchTrigger, BlendedTrigger, LowFreqTrigger, WarpTrigger]


class AttackError(Exception):
    """Base exception for attack errors."""
    pass


class TriggerGeometryError(AttackError):
    """Raised when a trigger does not fit the image."""
    pass


class EmptyEvaluationError(AttackError):
    """Raised when a triggered evaluation set would be empty."""
    pass


def patch_origin(trigger: PatchTrigger, height: int, width: int) -> tuple[int, int]:
    """Top-left corner of the patch inside an image of the given size."""
    size = trigger.size
    if size > height or size > width:
        raise TriggerGeometryError(
            f"{size}x{size} patch does not fit a {height}x{width} image"
        )
    position = trigger.position
    if isinstance(position, PatchPosition):
        row = 0 if position in (PatchPosition.TOP_LEFT, PatchPosition.TOP_RIGHT) else height - size
        col = 0 if position in (PatchPosition.TOP_LEFT, PatchPosition.BOTTOM_LEFT) else width - size
        return row, col
    row, col = position
    if row < 0 or col < 0 or row + size > height or col + size > width:
        raise TriggerGeometryError(
            f"{size}x{size} patch at ({row}, {col}) leaves the {height}x{width} image.\n"
            f"Pick a position with row, col in [0, {height - size}] x [0, {width - size}]."
        )
    return row, col


@lru_cache(maxsize=64)
def blend_pattern(seed: int, shape: tuple[int, int, int]) -> npt.NDArray[np.float32]:
    """Seeded uniform noise image blended in by the blended trigger."""
    pattern = np.random.default_rng(seed).random(shape).astype(np.float32)
    pattern.flags.writeable = False
    return pattern


def lowfreq_mask(bands: int, height: int, width: int) -> npt.NDArray[np.bool_]:
    """DCT coefficients (u, v) with 1 <= u + v <= bands; DC is excluded."""
    u = np.arange(height)[:, None]
    v = np.arange(width)[None, :]
    total = u + v
    return (total >= 1) & (total <= bands)


@lru_cache(maxsize=64)
def lowfreq_pattern(bands: int, amplitude: float, seed: int,
                    shape: tuple[int, int, int]) -> npt.NDArray[np.float64]:
    """
    Additive perturbation whose energy lies only in the lowest DCT bands.

    Seeded normal coefficients are placed in the band mask of each channel,
    transformed back with an orthonormal inverse DCT and scaled so the
    largest absolute value equals `amplitude`.
    """
    channels, height, width = shape
    rng = np.random.default_rng(seed)
    mask = lowfreq_mask(bands, height, width)
    coeffs = np.zeros(shape, dtype=np.float64)
    coeffs[:, mask] = rng.standard_normal((channels, int(mask.sum())))
    delta = fft.idctn(coeffs, type=2, norm="ortho", axes=(1, 2))
    peak = np.abs(delta).max()
    if peak > 0:
        delta *= amplitude / peak
    delta.flags.writeable = False
    return delta


@lru_cache(maxsize=64)
def warp_field(grid_size: int, strength: float, seed: int,
               height: int, width: int) -> npt.NDArray[np.float64]:
    """
    Dense (2, h, w) displacement in pixels, upsampled bilinearly from a
    seeded grid_size x grid_size field whose mean absolute value is `strength`.
    """
    coarse = np.random.default_rng(seed).uniform(-1.0, 1.0, size=(2, grid_size, grid_size))
    scale = np.abs(coarse).mean()
    coarse = coarse * (strength / scale) if scale > 0 else coarse * 0.0
    rows = np.linspace(0.0, grid_size - 1, height)
    cols = np.linspace(0.0, grid_size - 1, width)
    grid = np.stack(np.meshgrid(rows, cols, indexing="ij"))
    field = np.stack([
        ndimage.map_coordinates(coarse[axis], grid, order=1, mode="nearest")
        for axis in range(2)
    ])
    field.flags.writeable = False
    return field


def _warp(images: npt.NDArray[np.float32], trigger: WarpTrigger) -> npt.NDArray[np.float64]:
    n, c, h, w = images.shape
    field = warp_field(trigger.grid_size, float(trigger.strength), trigger.seed, h, w)
    base = np.stack(np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                                indexing="ij"))
    coords = base + field
    out = np.empty(images.shape, dtype=np.float64)
    for i in range(n):
        for ch in range(c):
            out[i, ch] = ndimage.map_coordinates(
                images[i, ch].astype(np.float64), coords, order=1, mode="nearest"
            )
    return out


def apply_trigger(image: npt.ArrayLike, trigger: Trigger) -> npt.NDArray[np.float32]:
    """
    Apply a trigger to one image (c, h, w) or a stack (n, c, h, w).

    Output is clamped to [0, 1] and returned as float32.

    Raises:
        TriggerGeometryError: If a patch does not fit the image
    """
    x = np.asarray(image, dtype=np.float32)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise TriggerGeometryError(f"expected (c, h, w) or (n, c, h, w) images, got shape {x.shape}")
    _, c, h, w = x.shape

    if isinstance(trigger, PatchTrigger):
        row, col = patch_origin(trigger, h, w)
        out = x.copy()
        out[:, :, row:row + trigger.size, col:col + trigger.size] = np.float32(trigger.value)
    elif isinstance(trigger, BlendedTrigger):
        pattern = blend_pattern(trigger.pattern_seed, (c, h, w))
        out = (1.0 - trigger.alpha) * x.astype(np.float64) + trigger.alpha * pattern[None]
    elif isinstance(trigger, LowFreqTrigger):
        delta = lowfreq_pattern(trigger.bands, float(trigger.amplitude), trigger.seed, (c, h, w))
        out = x.astype(np.float64) + delta[None]
    elif isinstance(trigger, WarpTrigger):
        out = _warp(x, trigger)
    else:
        raise AttackError(f"unknown trigger kind: {type(trigger).__name__}")

    out = np.clip(out, 0.0, 1.0).astype(np.float32)
    return out[0] if single else out


def poison_dataset(dataset: Dataset, spec: PoisonSpec) -> tuple[Dataset, npt.NDArray[np.int64]]:
    """
    Dirty-label poisoning.

    Exactly floor(poison_ratio * N) seeded-chosen samples receive the trigger
    and the target label; all other samples are left bit-identical. The
    returned dataset keeps the pre-poisoning labels in `original_labels`.

    Returns:
        (poisoned dataset, sorted poisoned indices)
    """
    if spec.target_label >= dataset.num_classes:
        raise AttackError(
            f"target label {spec.target_label} is not a class of {dataset.name} "
            f"({dataset.num_classes} classes)"
        )
    n = len(dataset)
    count = int(np.floor(spec.poison_ratio * n))
    rng = np.random.default_rng(spec.seed)
    chosen = np.sort(rng.choice(n, size=count, replace=False)).astype(np.int64)

    images = dataset.images.copy()
    labels = dataset.labels.copy()
    if count:
        images[chosen] = apply_trigger(images[chosen], spec.trigger)
        labels[chosen] = spec.target_label

    provenance = dict(dataset.provenance)
    provenance["poison"] = {"digest": spec.digest(), "count": count, "trigger": spec.trigger.kind}
    logger.info("Dataset poisoned", extra={
        "dataset": dataset.name,
        "trigger": spec.trigger.kind,
        "target_label": spec.target_label,
        "poisoned": count,
        "total": n,
    })
    poisoned = Dataset(
        images=images,
        labels=labels,
        num_classes=dataset.num_classes,
        name=f"{dataset.name}-poisoned",
        provenance=provenance,
        source_indices=dataset.source_indices,
        original_labels=dataset.true_labels,
    )
    return poisoned, chosen


def build_asr_testset(test: Dataset, trigger: Trigger, target_label: int) -> Dataset:
    """
    Triggered copies of every test sample whose original label is not the target.

    Labels are all set to `target_label`; `original_labels` keeps the true
    classes so the set's purity can be re-checked at scoring time.

    Raises:
        EmptyEvaluationError: If the test set is empty or holds only target-class samples
    """
    if len(test) == 0:
        raise EmptyEvaluationError(f"cannot build an ASR set from empty dataset {test.name}")
    keep = np.flatnonzero(test.true_labels != target_label)
    if keep.size == 0:
        raise EmptyEvaluationError(
            f"every sample of {test.name} belongs to target class {target_label}; "
            "nothing is left to trigger"
        )
    kept = test.take(keep)
    return Dataset(
        images=apply_trigger(kept.images, trigger),
        labels=np.full(keep.size, target_label, dtype=np.int64),
        num_classes=test.num_classes,
        name=f"{test.name}-asr-{trigger.kind}",
        provenance={**test.provenance, "asr_trigger": trigger.kind, "target_label": target_label},
        source_indices=kept.source_indices,
        original_labels=kept.true_labels,
    )
