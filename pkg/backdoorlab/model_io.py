"""
Model file format (BFM1).

Layout, all little-endian:
    b"BFM1"
    uint32 descriptor length, then the descriptor as JSON
        {"format_version", "arch", "shapes", "channel_masks": {layer: out_channels}}
    float32 data of every parameter tensor in declaration order
    packed mask bits: one bit per tensor (trainable), then every channel mask
    in ascending layer order
"""

import logging
import struct
from pathlib import Path

import numpy as np
import orjson
from pydantic import ValidationError

from .models import ArchSpec
from .nn_core import EngineError, Model


logger = logging.getLogger(__name__)

MAGIC = b"BFM1"
FORMAT_VERSION = 1


class ModelFormatError(EngineError):
    """Raised when a model file cannot be decoded."""

    def __init__(self, message: str, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedVersionError(ModelFormatError):
    """Raised when a model file declares a format version this build cannot read."""
    pass


def encode_model(model: Model) -> bytes:
    """Serialise a model to BFM1 bytes."""
    masks = dict(sorted(model.channel_masks.items()))
    descriptor = orjson.dumps({
        "format_version": FORMAT_VERSION,
        "arch": model.arch.model_dump(mode="json"),
        "shapes": [list(p.shape) for p in model.params],
        "channel_masks": {str(k): int(m.shape[0]) for k, m in masks.items()},
    })
    parts = [MAGIC, struct.pack("<I", len(descriptor)), descriptor]
    for p in model.params:
        parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    bits = np.concatenate(
        [np.asarray(model.trainable, dtype=bool)] + [m.astype(bool) for m in masks.values()]
    )
    parts.append(np.packbits(bits, bitorder="little").tobytes())
    return b"".join(parts)


def decode_model(data: bytes) -> Model:
    """
    Decode BFM1 bytes.

    Raises:
        ModelFormatError: On bad magic, truncation, malformed descriptor or trailing bytes
        UnsupportedVersionError: On a format version other than FORMAT_VERSION
    """
    if data[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {data[:4]!r}, expected {MAGIC!r}", 0)
    if len(data) < 8:
        raise ModelFormatError("file ends inside the descriptor length", len(data))
    (length,) = struct.unpack_from("<I", data, 4)
    offset = 8
    if len(data) < offset + length:
        raise ModelFormatError(f"descriptor of {length} bytes is truncated", len(data))
    try:
        descriptor = orjson.loads(data[offset:offset + length])
    except orjson.JSONDecodeError as e:
        raise ModelFormatError(f"descriptor is not valid JSON: {e}", offset) from e
    if not isinstance(descriptor, dict):
        raise ModelFormatError(f"descriptor must be a JSON object, got {type(descriptor).__name__}", offset)

    version = descriptor.get("format_version")
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(
            f"model file format version {version!r} is not supported (expected {FORMAT_VERSION})", offset
        )
    try:
        arch = ArchSpec(**descriptor["arch"])
        shapes = [tuple(s) for s in descriptor["shapes"]]
        mask_sizes = {int(k): int(v) for k, v in descriptor["channel_masks"].items()}
    except (KeyError, TypeError, ValueError, ValidationError) as e:
        raise ModelFormatError(f"descriptor is malformed: {e}", offset) from e
    if shapes != arch.param_shapes():
        raise ModelFormatError("tensor shapes disagree with the architecture", offset)
    offset += length

    params = []
    for shape in shapes:
        count = int(np.prod(shape))
        end = offset + 4 * count
        if len(data) < end:
            raise ModelFormatError(f"tensor data for shape {shape} is truncated", len(data))
        params.append(np.frombuffer(data, dtype="<f4", count=count, offset=offset).astype(np.float32).reshape(shape))
        offset = end

    n_bits = len(params) + sum(mask_sizes.values())
    n_bytes = (n_bits + 7) // 8
    if len(data) < offset + n_bytes:
        raise ModelFormatError("mask bits are truncated", len(data))
    if len(data) != offset + n_bytes:
        raise ModelFormatError(f"{len(data) - offset - n_bytes} unexpected trailing bytes", offset + n_bytes)
    bits = np.unpackbits(np.frombuffer(data, dtype=np.uint8, count=n_bytes, offset=offset),
                         bitorder="little")[:n_bits].astype(bool)
    trainable = [bool(b) for b in bits[:len(params)]]
    masks = {}
    cursor = len(params)
    for layer, size in sorted(mask_sizes.items()):
        masks[layer] = bits[cursor:cursor + size].copy()
        cursor += size

    try:
        return Model(
            arch=arch,
            params=params,
            momentum=[np.zeros_like(p) for p in params],
            trainable=trainable,
            channel_masks=masks,
        )
    except EngineError as e:
        raise ModelFormatError(f"decoded model is inconsistent: {e}", offset) from e


def save_model(model: Model, path: Path) -> None:
    """Write a model atomically (temp file, then rename)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    temp_path = path.parent / f"{path.name}.tmp"
    try:
        temp_path.write_bytes(encode_model(model))
        temp_path.replace(path)
    except Exception:
        if temp_path.exists():
            temp_path.unlink()
        raise
    logger.debug("Model saved", extra={"path": str(path), "tensors": len(model.params)})


def load_model(path: Path) -> Model:
    """Read a model file written by save_model."""
    model = decode_model(path.read_bytes())
    logger.debug("Model loaded", extra={"path": str(path)})
    return model
