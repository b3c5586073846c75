"""
Minimal deterministic neural-network engine.

Dense and convolutional forward passes, explicit backpropagation of a
softmax cross-entropy loss, SGD with momentum, per-tensor freezing and
per-channel pruning masks. Everything is plain numpy; training runs in
float32 and the finite-difference oracle promotes a copy to float64.

Parameter layout: for every conv/dense layer, in layer order, a weight
tensor followed by a bias tensor. Conv weights are (out, in, k, k), dense
weights are (out, in).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np
import numpy.typing as npt
from numpy.lib.stride_tricks import sliding_window_view

from .models import ArchSpec, LayerKind, conv, dense, flatten, maxpool, relu


logger = logging.getLogger(__name__)

Tensor = npt.NDArray[np.floating]


class EngineError(Exception):
    """Base exception for engine errors."""
    pass


class InputShapeError(EngineError):
    """Raised when a batch does not match the architecture's input shape."""
    pass


class NumericalOverflowError(EngineError):
    """Raised when the loss or its gradient stops being finite."""
    pass


class UnsupportedArchError(EngineError):
    """Raised when an operation needs an architecture feature that is missing."""
    pass


@dataclass
class Batch:
    """Images (n, c, h, w) in [0, 1] with their class indices."""
    images: Tensor
    labels: npt.NDArray[np.int64]

    def __post_init__(self) -> None:
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4:
            raise InputShapeError(f"images must be (n, c, h, w), got shape {self.images.shape}")
        if self.images.shape[0] != self.labels.shape[0]:
            raise InputShapeError(
                f"batch has {self.images.shape[0]} images but {self.labels.shape[0]} labels"
            )

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class Model:
    """
    Architecture, parameters, optimiser state and trainability.

    Attributes:
        arch: Architecture descriptor
        params: Parameter tensors in declaration order
        momentum: SGD velocity, same shapes as params
        trainable: Per-tensor flag; frozen tensors are never updated
        channel_masks: Conv layer index -> boolean keep-vector over output channels
    """
    arch: ArchSpec
    params: list[Tensor]
    momentum: list[Tensor]
    trainable: list[bool]
    channel_masks: dict[int, npt.NDArray[np.bool_]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        expected = self.arch.param_shapes()
        if not (len(self.params) == len(self.momentum) == len(self.trainable) == len(expected)):
            raise EngineError(
                f"params/momentum/trainable must each hold {len(expected)} tensors, got "
                f"{len(self.params)}/{len(self.momentum)}/{len(self.trainable)}"
            )
        for i, (p, v, shape) in enumerate(zip(self.params, self.momentum, expected)):
            if p.shape != shape or v.shape != shape:
                raise EngineError(f"tensor {i}: expected shape {shape}, got {p.shape} / {v.shape}")
        for layer_index, mask in self.channel_masks.items():
            layer = self.arch.layers[layer_index]
            if layer.kind != LayerKind.CONV or mask.shape != (layer.out_channels,):
                raise EngineError(f"channel mask for layer {layer_index} does not match a conv layer")

    @property
    def dtype(self) -> np.dtype:
        return self.params[0].dtype

    @property
    def head_indices(self) -> tuple[int, int]:
        """Indices of the final dense layer's weight and bias."""
        if self.arch.layers[-1].kind != LayerKind.DENSE:
            raise UnsupportedArchError("architecture has no dense head")
        n = len(self.params)
        return n - 2, n - 1

    def copy(self) -> "Model":
        return Model(
            arch=self.arch,
            params=[p.copy() for p in self.params],
            momentum=[v.copy() for v in self.momentum],
            trainable=list(self.trainable),
            channel_masks={k: m.copy() for k, m in self.channel_masks.items()},
        )

    def astype(self, dtype: npt.DTypeLike) -> "Model":
        return Model(
            arch=self.arch,
            params=[p.astype(dtype) for p in self.params],
            momentum=[v.astype(dtype) for v in self.momentum],
            trainable=list(self.trainable),
            channel_masks={k: m.copy() for k, m in self.channel_masks.items()},
        )

    def reset_momentum(self) -> None:
        self.momentum = [np.zeros_like(p) for p in self.params]

    def set_policy(self, head_only: bool) -> None:
        """Whole-model training, or everything frozen except the dense head."""
        if head_only:
            w, b = self.head_indices
            self.trainable = [i in (w, b) for i in range(len(self.params))]
        else:
            self.trainable = [True] * len(self.params)


def glorot_limit(shape: Sequence[int]) -> float:
    """Uniform init bound sqrt(6 / (fan_in + fan_out))."""
    if len(shape) == 4:
        receptive = shape[2] * shape[3]
        fan_in, fan_out = shape[1] * receptive, shape[0] * receptive
    else:
        fan_in, fan_out = shape[1], shape[0]
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _init_weight(rng: np.random.Generator, shape: tuple[int, ...], dtype: npt.DTypeLike) -> Tensor:
    limit = glorot_limit(shape)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def init_model(arch: ArchSpec, seed: int, dtype: npt.DTypeLike = np.float32) -> Model:
    """Seeded Glorot-uniform weights, zero biases, everything trainable."""
    rng = np.random.default_rng(seed)
    params: list[Tensor] = []
    for shape in arch.param_shapes():
        if len(shape) == 1:
            params.append(np.zeros(shape, dtype=dtype))
        else:
            params.append(_init_weight(rng, shape, dtype))
    return Model(
        arch=arch,
        params=params,
        momentum=[np.zeros_like(p) for p in params],
        trainable=[True] * len(params),
    )


# ---------------------------------------------------------------------------
# Forward / backward
# ---------------------------------------------------------------------------


def _check_input(model: Model, images: Tensor) -> None:
    expected = tuple(model.arch.input_shape)
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise InputShapeError(
            f"input shape {tuple(images.shape[1:]) if images.ndim == 4 else images.shape} "
            f"does not match architecture input {expected}"
        )


def _conv_forward(x: Tensor, w: Tensor, b: Tensor, stride: int) -> tuple[Tensor, Tensor]:
    k = w.shape[2]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = np.tensordot(windows, w, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    return out + b[None, :, None, None], windows


def _conv_backward(
    dout: Tensor, x_shape: tuple[int, ...], windows: Tensor, w: Tensor, stride: int
) -> tuple[Tensor, Tensor, Tensor]:
    k = w.shape[2]
    oh, ow = dout.shape[2], dout.shape[3]
    dw = np.tensordot(dout, windows, axes=([0, 2, 3], [0, 2, 3]))
    db = dout.sum(axis=(0, 2, 3))
    dx = np.zeros(x_shape, dtype=dout.dtype)
    for i in range(k):
        for j in range(k):
            contrib = np.tensordot(dout, w[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            dx[:, :, i:i + stride * (oh - 1) + 1:stride, j:j + stride * (ow - 1) + 1:stride] += contrib
    return dx, dw, db


def _pool_forward(x: Tensor, p: int) -> tuple[Tensor, npt.NDArray[np.intp]]:
    n, c, h, w = x.shape
    oh, ow = h // p, w // p
    blocks = (
        x[:, :, :oh * p, :ow * p]
        .reshape(n, c, oh, p, ow, p)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, oh, ow, p * p)
    )
    # argmax keeps the first maximum
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout: Tensor, x_shape: tuple[int, ...], idx: npt.NDArray[np.intp], p: int) -> Tensor:
    n, c, h, w = x_shape
    oh, ow = dout.shape[2], dout.shape[3]
    grad = np.zeros((n, c, oh, ow, p * p), dtype=dout.dtype)
    np.put_along_axis(grad, idx[..., None], dout[..., None], axis=-1)
    grad = grad.reshape(n, c, oh, ow, p, p).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * p, ow * p)
    dx = np.zeros(x_shape, dtype=dout.dtype)
    dx[:, :, :oh * p, :ow * p] = grad
    return dx


@dataclass
class _Trace:
    """Per-layer values kept for the backward pass."""
    caches: list[tuple] = field(default_factory=list)
    activations: list[Tensor] = field(default_factory=list)


def _run_forward(model: Model, x: Tensor, keep: bool = False) -> tuple[Tensor, _Trace]:
    trace = _Trace()
    params = iter(model.params)
    for i, layer in enumerate(model.arch.layers):
        cache: tuple = ()
        if layer.kind == LayerKind.CONV:
            w, b = next(params), next(params)
            in_shape = x.shape
            x, windows = _conv_forward(x, w, b, layer.stride)
            mask = model.channel_masks.get(i)
            if mask is not None:
                x = x * mask.astype(x.dtype)[None, :, None, None]
            cache = (in_shape, windows, w, mask)
        elif layer.kind == LayerKind.RELU:
            positive = x > 0
            x = np.where(positive, x, 0).astype(x.dtype, copy=False)
            cache = (positive,)
        elif layer.kind == LayerKind.MAXPOOL:
            in_shape = x.shape
            x, idx = _pool_forward(x, layer.pool)
            cache = (in_shape, idx)
        elif layer.kind == LayerKind.FLATTEN:
            in_shape = x.shape
            x = x.reshape(x.shape[0], -1)
            cache = (in_shape,)
        elif layer.kind == LayerKind.DENSE:
            w, b = next(params), next(params)
            cache = (x, w)
            x = x @ w.T + b
        if keep:
            trace.caches.append(cache)
            trace.activations.append(x)
    return x, trace


def _run_backward(model: Model, trace: _Trace, dlogits: Tensor) -> list[Tensor]:
    grads: list[Optional[Tensor]] = [None] * len(model.params)
    slot = len(model.params)
    d = dlogits
    for layer, cache in zip(reversed(model.arch.layers), reversed(trace.caches)):
        if layer.kind == LayerKind.DENSE:
            x, w = cache
            slot -= 2
            grads[slot] = d.T @ x
            grads[slot + 1] = d.sum(axis=0)
            d = d @ w
        elif layer.kind == LayerKind.FLATTEN:
            (in_shape,) = cache
            d = d.reshape(in_shape)
        elif layer.kind == LayerKind.MAXPOOL:
            in_shape, idx = cache
            d = _pool_backward(d, in_shape, idx, layer.pool)
        elif layer.kind == LayerKind.RELU:
            (positive,) = cache
            d = d * positive
        elif layer.kind == LayerKind.CONV:
            in_shape, windows, w, mask = cache
            if mask is not None:
                d = d * mask.astype(d.dtype)[None, :, None, None]
            slot -= 2
            d, grads[slot], grads[slot + 1] = _conv_backward(d, in_shape, windows, w, layer.stride)
    return [g.astype(p.dtype, copy=False) for g, p in zip(grads, model.params)]


def forward(model: Model, batch: Union[Batch, Tensor]) -> Tensor:
    """
    Compute logits (n, k).

    Raises:
        InputShapeError: If the images do not match the architecture input
    """
    images = batch.images if isinstance(batch, Batch) else batch
    _check_input(model, images)
    logits, _ = _run_forward(model, images.astype(model.dtype, copy=False))
    return logits


def argmax_predictions(logits: Tensor) -> npt.NDArray[np.int64]:
    """Index of the largest logit; ties resolve to the lowest index."""
    return logits.argmax(axis=1).astype(np.int64)


def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_cross_entropy(logits: Tensor, labels: npt.NDArray[np.int64]) -> tuple[float, Tensor]:
    """Mean cross-entropy and its gradient with respect to the logits."""
    n = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = float(-log_probs[rows, labels].mean())
    dlogits = np.exp(log_probs)
    dlogits[rows, labels] -= 1
    dlogits /= n
    return loss, dlogits.astype(logits.dtype, copy=False)


def predict_proba(model: Model, images: Tensor, batch_size: int = 256) -> Tensor:
    """Softmax posteriors, evaluated in chunks."""
    _check_input(model, images)
    chunks = [
        softmax(forward(model, images[start:start + batch_size]))
        for start in range(0, images.shape[0], batch_size)
    ]
    if not chunks:
        return np.zeros((0, model.arch.num_classes), dtype=model.dtype)
    return np.concatenate(chunks, axis=0)


def predict(model: Model, images: Tensor, batch_size: int = 256) -> npt.NDArray[np.int64]:
    _check_input(model, images)
    preds = [
        argmax_predictions(forward(model, images[start:start + batch_size]))
        for start in range(0, images.shape[0], batch_size)
    ]
    if not preds:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate(preds)


def layer_outputs(model: Model, images: Tensor, layer_indices: Sequence[int]) -> dict[int, Tensor]:
    """Activations after each requested layer for one chunk of images."""
    _check_input(model, images)
    _, trace = _run_forward(model, images.astype(model.dtype, copy=False), keep=True)
    return {i: trace.activations[i] for i in layer_indices}


def backward(
    model: Model, batch: Batch, labels: Optional[npt.ArrayLike] = None
) -> tuple[float, list[Tensor]]:
    """
    Loss and parameter gradients for one batch.

    Gradients are computed for frozen tensors too; sgd_step ignores them.

    Raises:
        InputShapeError: On shape mismatch
        NumericalOverflowError: If the loss is not finite
    """
    _check_input(model, batch.images)
    targets = batch.labels if labels is None else np.asarray(labels, dtype=np.int64)
    k = model.arch.num_classes
    if targets.shape[0] != batch.images.shape[0]:
        raise InputShapeError(f"{batch.images.shape[0]} images but {targets.shape[0]} labels")
    if targets.size and (targets.min() < 0 or targets.max() >= k):
        raise InputShapeError(f"labels must lie in [0, {k}), got range [{targets.min()}, {targets.max()}]")

    logits, trace = _run_forward(model, batch.images.astype(model.dtype, copy=False), keep=True)
    loss, dlogits = softmax_cross_entropy(logits, targets)
    if not np.isfinite(loss) or not np.all(np.isfinite(dlogits)):
        raise NumericalOverflowError(f"non-finite loss ({loss}) over a batch of {len(batch)}")
    return loss, _run_backward(model, trace, dlogits)


def sgd_step(model: Model, grads: Sequence[Tensor], lr: float, momentum: float = 0.9) -> Model:
    """
    One SGD-with-momentum update, in place.

    For trainable tensors: v <- momentum * v + g, p <- p - lr * v. Frozen
    tensors (and their velocity) are left untouched. Pruned conv channels
    receive no update.
    """
    if lr < 0:
        raise EngineError(f"learning rate must be >= 0, got {lr}")
    if len(grads) != len(model.params):
        raise EngineError(f"expected {len(model.params)} gradients, got {len(grads)}")
    owners = model.arch.param_layer_indices()
    step_lr = model.dtype.type(lr)
    mu = model.dtype.type(momentum)
    for i, (p, g) in enumerate(zip(model.params, grads)):
        if g.shape != p.shape:
            raise EngineError(f"gradient {i}: shape {g.shape} does not match parameter {p.shape}")
        if not model.trainable[i]:
            continue
        v = model.momentum[i]
        v *= mu
        v += g
        mask = model.channel_masks.get(owners[i])
        if mask is not None:
            keep = mask.reshape((-1,) + (1,) * (p.ndim - 1))
            v *= keep
        p -= step_lr * v
    return model


# ---------------------------------------------------------------------------
# Gradient oracle
# ---------------------------------------------------------------------------


def _activation_pattern(model: Model, images: Tensor) -> bytes:
    """ReLU on/off states and pooling winners; gradients are only smooth while this is fixed."""
    _, trace = _run_forward(model, images, keep=True)
    parts = []
    for layer, cache in zip(model.arch.layers, trace.caches):
        if layer.kind == LayerKind.RELU:
            parts.append(np.packbits(cache[0]).tobytes())
        elif layer.kind == LayerKind.MAXPOOL:
            parts.append(cache[1].astype(np.int8).tobytes())
    return b"".join(parts)


def _loss_only(model: Model, images: Tensor, labels: npt.NDArray[np.int64]) -> float:
    logits, _ = _run_forward(model, images)
    loss, _ = softmax_cross_entropy(logits, labels)
    return loss


def finite_diff_check(
    model: Model,
    batch: Batch,
    labels: Optional[npt.ArrayLike] = None,
    h: float = 1e-4,
    samples_per_tensor: int = 6,
    seed: int = 0,
    skip_kinks: bool = True,
) -> float:
    """
    Compare backprop gradients with central finite differences in float64.

    Args:
        model: Model to check (a float64 copy is used)
        batch: Inputs
        labels: Optional label override
        h: Finite-difference step
        samples_per_tensor: Parameter entries sampled from each tensor
        seed: Sampling seed
        skip_kinks: Redraw entries whose +-h perturbations flip a ReLU or pooling decision

    Returns:
        max |analytic - numeric| / max(|numeric|, 1e-8) over sampled entries
    """
    if h <= 0:
        raise EngineError(f"finite-difference step must be > 0, got {h}")
    m64 = model.astype(np.float64)
    images = batch.images.astype(np.float64)
    targets = batch.labels if labels is None else np.asarray(labels, dtype=np.int64)
    _, grads = backward(m64, Batch(images, targets))
    base_pattern = _activation_pattern(m64, images) if skip_kinks else b""

    rng = np.random.default_rng(seed)
    worst = 0.0
    checked = 0
    for t, p in enumerate(m64.params):
        accepted = 0
        for flat in rng.permutation(p.size):
            if accepted >= samples_per_tensor:
                break
            original = p.flat[flat]
            p.flat[flat] = original + h
            plus = _loss_only(m64, images, targets)
            plus_pattern = _activation_pattern(m64, images) if skip_kinks else b""
            p.flat[flat] = original - h
            minus = _loss_only(m64, images, targets)
            minus_pattern = _activation_pattern(m64, images) if skip_kinks else b""
            p.flat[flat] = original
            if skip_kinks and (plus_pattern != base_pattern or minus_pattern != base_pattern):
                continue
            numeric = (plus - minus) / (2 * h)
            analytic = float(grads[t].flat[flat])
            worst = max(worst, abs(analytic - numeric) / max(abs(numeric), 1e-8))
            accepted += 1
        checked += accepted
    logger.debug("Finite-difference check finished", extra={"entries": checked, "max_rel_error": worst})
    return worst


def random_small_arch(seed: int) -> ArchSpec:
    """Small random conv/dense net for gradient checking."""
    rng = np.random.default_rng(seed)
    channels = int(rng.integers(1, 3))
    size = int(rng.integers(5, 9))
    k = int(rng.integers(2, 5))
    layers = []
    if rng.random() < 0.75:
        layers += [conv(int(rng.integers(2, 5)), int(rng.integers(2, 4))), relu()]
        if rng.random() < 0.5:
            layers.append(maxpool(2))
    layers.append(flatten())
    if rng.random() < 0.5:
        layers += [dense(int(rng.integers(3, 8))), relu()]
    layers.append(dense(k))
    return ArchSpec(layers=layers, input_shape=(channels, size, size), num_classes=k)


def check_random_nets(count: int, seed: int = 0, batch_size: int = 4, h: float = 1e-4) -> list[float]:
    """
    Run finite_diff_check on `count` random small nets.

    Returns:
        Max relative error per net, in net order
    """
    errors = []
    for i in range(count):
        net_seed = seed * 1000 + i
        arch = random_small_arch(net_seed)
        model = init_model(arch, net_seed, dtype=np.float64)
        rng = np.random.default_rng(net_seed)
        batch = Batch(
            rng.random((batch_size, *arch.input_shape)),
            rng.integers(0, arch.num_classes, size=batch_size).astype(np.int64),
        )
        errors.append(finite_diff_check(model, batch, h=h, seed=net_seed))
    return errors


# ---------------------------------------------------------------------------
# Head replacement
# ---------------------------------------------------------------------------


def replace_head(model: Model, new_k: int, seed: int) -> Model:
    """
    Swap the final dense layer for a freshly initialised dense(new_k).

    All other tensors are copied unchanged; the new head is trainable.

    Raises:
        UnsupportedArchError: If the architecture does not end in a dense layer
    """
    if model.arch.layers[-1].kind != LayerKind.DENSE:
        raise UnsupportedArchError("replace_head needs an architecture ending in a dense layer")
    if new_k < 2:
        raise UnsupportedArchError(f"a classification head needs at least 2 classes, got {new_k}")
    arch = model.arch.with_head(new_k)
    w_shape, b_shape = arch.param_shapes()[-2:]
    rng = np.random.default_rng(seed)
    head_w = _init_weight(rng, w_shape, model.dtype)
    head_b = np.zeros(b_shape, dtype=model.dtype)
    params = [p.copy() for p in model.params[:-2]] + [head_w, head_b]
    return Model(
        arch=arch,
        params=params,
        momentum=[v.copy() for v in model.momentum[:-2]] + [np.zeros_like(head_w), np.zeros_like(head_b)],
        trainable=list(model.trainable[:-2]) + [True, True],
        channel_masks={k: m.copy() for k, m in model.channel_masks.items()},
    )
