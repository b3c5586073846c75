"""
Training and fine-tuning runners.

`train` is the single optimiser loop; backdoor training, conventional
fine-tuning, super-fine-tuning and fine-pruning are configurations of it.
Every runner works on a copy of its input model and returns the trained
copy together with a per-epoch TrainLog.
"""

import logging
import math
import time
from typing import Literal, Optional, Union

import numpy as np
import numpy.typing as npt

from .attacks import poison_dataset
from .data import Dataset, subsample
from .evaluation import EvalHooks, clean_accuracy
from .models import (
    ArchSpec,
    ConstantSchedule,
    ConventionalFTDefense,
    EpochRecord,
    FinePruneDefense,
    LayerKind,
    NoDefense,
    PoisonSpec,
    SuperFTDefense,
    SuperFTSchedule,
    TrainablePolicy,
    TrainConfig,
    TrainLog,
    reference_arch,
)
from .nn_core import Model, NumericalOverflowError, backward, init_model, layer_outputs, sgd_step
from .schedule import Schedule, initial_lr, lr_at, schedule_trace


logger = logging.getLogger(__name__)

Defense = Union[NoDefense, ConventionalFTDefense, SuperFTDefense, FinePruneDefense]

PRUNE_SEARCH_START = 0.05
PRUNE_SEARCH_STEP = 0.05
PRUNE_SEARCH_CAP = 0.3
PRUNE_SEARCH_MAX_CA_DROP = 0.02


class DefenseError(Exception):
    """Base exception for defense errors."""
    pass


class TrainingError(DefenseError):
    """Raised when a training run cannot start."""
    pass


class DivergenceError(TrainingError):
    """Raised when the loss stops being finite."""

    def __init__(self, epoch: int, step: int, message: str) -> None:
        super().__init__(
            f"training diverged at epoch {epoch}, step {step}: {message}\n"
            "Lower the learning rate (or lr_max1) and rerun."
        )
        self.epoch = epoch
        self.step = step


class OverPruneError(DefenseError):
    """Raised when pruning would remove every channel of a layer."""
    pass


def _check_compatible(model: Model, dataset: Dataset) -> None:
    if len(dataset) == 0:
        raise TrainingError(f"cannot train on empty dataset {dataset.name}")
    if dataset.num_classes != model.arch.num_classes:
        raise TrainingError(
            f"{dataset.name} has {dataset.num_classes} classes but the model head has "
            f"{model.arch.num_classes}; use replace_head first"
        )
    if dataset.image_shape != tuple(model.arch.input_shape):
        raise TrainingError(
            f"{dataset.name} images are {dataset.image_shape}, model expects {tuple(model.arch.input_shape)}"
        )


def train(
    model: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    hooks: Optional[EvalHooks] = None,
) -> tuple[Model, TrainLog]:
    """
    Mini-batch SGD over `dataset`.

    Each epoch visits the samples in a permutation seeded by (cfg.seed, epoch);
    the learning rate is taken from the schedule at every global step. The
    input model is not modified. Momentum starts from zero.

    Args:
        model: Starting model
        dataset: Training data; class count must match the model head
        cfg: Epochs, batch size, schedule, momentum, seed and trainable policy
        hooks: CA/ASR sets scored before training and after each epoch

    Returns:
        (trained model, log)

    Raises:
        TrainingError: Empty or incompatible dataset
        DivergenceError: Non-finite loss or parameters
    """
    _check_compatible(model, dataset)
    m = model.copy()
    m.reset_momentum()
    m.set_policy(head_only=cfg.trainable_policy == TrainablePolicy.HEAD_ONLY)

    n = len(dataset)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    baseline = hooks.score(m) if hooks is not None else None
    records: list[EpochRecord] = []
    global_step = 0
    elapsed = 0.0

    for epoch in range(1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        started = time.perf_counter()
        loss_sum = 0.0
        max_lr = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            lr = lr_at(cfg.schedule, global_step, steps_per_epoch)
            try:
                loss, grads = backward(m, dataset.batch(idx))
            except NumericalOverflowError as e:
                raise DivergenceError(epoch, global_step, str(e)) from e
            sgd_step(m, grads, lr, cfg.momentum)
            loss_sum += loss * idx.size
            max_lr = max(max_lr, lr)
            global_step += 1
            logger.debug("Step", extra={"epoch": epoch, "step": global_step, "loss": loss, "lr": lr})
        if not all(np.all(np.isfinite(p)) for p in m.params):
            raise DivergenceError(epoch, global_step, "parameters are no longer finite")
        elapsed += time.perf_counter() - started

        point = None
        if hooks is not None and (hooks.per_epoch or epoch == cfg.epochs):
            point = hooks.score(m)
        record = EpochRecord(
            epoch=epoch,
            loss=loss_sum / n,
            ca=point.ca if point else None,
            asr=point.asr if point else None,
            seconds=elapsed,
            steps=global_step,
            max_lr=max_lr,
        )
        records.append(record)
        logger.info("Epoch complete", extra={
            "dataset": dataset.name,
            "epoch": epoch,
            "loss": record.loss,
            "ca": record.ca,
            "asr": record.asr,
            "max_lr": max_lr,
        })

    return m, TrainLog(baseline=baseline, epochs=records)


def train_backdoored(
    clean: Dataset,
    poison_spec: PoisonSpec,
    cfg: TrainConfig,
    arch: Optional[ArchSpec] = None,
    hooks: Optional[EvalHooks] = None,
    model: Optional[Model] = None,
) -> tuple[Model, TrainLog]:
    """
    Poison the clean training set and train on it.

    A fresh model is initialised from `arch` (reference architecture by
    default) with cfg.seed unless a starting model is given.
    """
    poisoned, _ = poison_dataset(clean, poison_spec)
    if model is None:
        arch = arch or reference_arch(clean.image_shape, clean.num_classes)
        model = init_model(arch, cfg.seed)
    return train(model, poisoned, cfg, hooks)


def fine_tune(
    model: Model,
    clean: Dataset,
    cfg: TrainConfig,
    hooks: Optional[EvalHooks] = None,
) -> tuple[Model, TrainLog]:
    """Continue training on clean data under cfg's trainable policy."""
    return train(model, clean, cfg, hooks)


def super_fine_tune(
    model: Model,
    clean: Dataset,
    sft: SuperFTSchedule,
    epochs: int,
    seed: int,
    batch_size: int = 64,
    momentum: float = 0.9,
    hooks: Optional[EvalHooks] = None,
) -> tuple[Model, TrainLog]:
    """
    Whole-model fine-tuning under the two-phase cyclic schedule.

    Raises:
        DefenseError: If the schedule is not a super-fine-tuning schedule, or
            the run used a learning rate outside the schedule's range
    """
    if not isinstance(sft, SuperFTSchedule):
        raise DefenseError(f"super_fine_tune needs a superft schedule, got kind={sft.kind!r}")
    cfg = TrainConfig(
        epochs=epochs,
        batch_size=batch_size,
        schedule=sft,
        momentum=momentum,
        seed=seed,
        trainable_policy=TrainablePolicy.WHOLE_MODEL,
    )
    tuned, log = train(model, clean, cfg, hooks)
    _check_phase_bounds(sft, log, math.ceil(len(clean) / batch_size))
    logger.info("Super-fine-tuning finished", extra={"epochs": epochs, "max_lr": log.max_lr})
    return tuned, log


def _check_phase_bounds(sft: SuperFTSchedule, log: TrainLog, steps_per_epoch: int) -> None:
    """Each epoch's peak lr stays within [lr_base, phase peak]; phase 2 starts on an epoch boundary."""
    total = log.final.steps if log.final else 0
    floor = min((lr for _, lr in schedule_trace(sft, total, steps_per_epoch)), default=sft.lr_base)
    slack = 1e-9 * sft.lr_max1
    if floor < sft.lr_base - slack:
        raise DefenseError(f"super-fine-tuning schedule dropped to lr {floor} below lr_base {sft.lr_base}")
    for record in log.epochs:
        phase, peak = (1, sft.lr_max1) if record.epoch <= sft.phase1_epochs else (2, sft.lr_max2)
        if not sft.lr_base - slack <= record.max_lr <= peak + slack:
            raise DefenseError(
                f"super-fine-tuning epoch {record.epoch} (phase {phase}) used lr {record.max_lr} "
                f"outside [{sft.lr_base}, {peak}]"
            )


# ---------------------------------------------------------------------------
# Fine-pruning
# ---------------------------------------------------------------------------


def prunable_layers(model: Model, layers: Literal["last", "all"] = "last") -> list[int]:
    convs = model.arch.conv_layer_indices()
    if not convs:
        raise DefenseError("fine-pruning needs at least one conv layer")
    return convs[-1:] if layers == "last" else convs


def channel_activations(
    model: Model, dataset: Dataset, conv_index: int, batch_size: int = 256
) -> npt.NDArray[np.float64]:
    """Mean activation per output channel of a conv layer, read after its ReLU when one follows."""
    layers = model.arch.layers
    tap = conv_index + 1 if conv_index + 1 < len(layers) and layers[conv_index + 1].kind == LayerKind.RELU \
        else conv_index
    total = np.zeros(layers[conv_index].out_channels, dtype=np.float64)
    for start in range(0, len(dataset), batch_size):
        out = layer_outputs(model, dataset.images[start:start + batch_size], [tap])[tap]
        total += out.astype(np.float64).mean(axis=(2, 3)).sum(axis=0)
    return total / max(len(dataset), 1)


def prune_channels(
    model: Model,
    clean: Dataset,
    prune_fraction: float,
    layers: Literal["last", "all"] = "last",
    batch_size: int = 256,
) -> tuple[Model, dict[int, list[int]]]:
    """
    Mask the ceil(prune_fraction * C) least active channels of each selected conv layer.

    Pruned channels have their weights and bias zeroed and a False entry in
    the model's channel mask, so they output exactly zero and receive no updates.

    Returns:
        (pruned copy, conv layer index -> pruned channel indices)

    Raises:
        DefenseError: If prune_fraction is outside [0, 1)
        OverPruneError: If every channel of a layer would be removed
    """
    if not 0.0 <= prune_fraction < 1.0:
        raise DefenseError(f"prune_fraction must be in [0, 1), got {prune_fraction}")
    pruned = model.copy()
    removed: dict[int, list[int]] = {}
    if len(clean) == 0:
        raise TrainingError(f"cannot rank channels on empty dataset {clean.name}")
    owners = pruned.arch.param_layer_indices()
    for conv_index in prunable_layers(model, layers):
        channels = model.arch.layers[conv_index].out_channels
        count = math.ceil(prune_fraction * channels)
        if count == 0:
            continue
        if count >= channels:
            raise OverPruneError(
                f"pruning {prune_fraction:.0%} of conv layer {conv_index} removes all {channels} channels"
            )
        means = channel_activations(model, clean, conv_index, batch_size)
        order = np.argsort(means, kind="stable")[:count]
        mask = pruned.channel_masks.get(conv_index, np.ones(channels, dtype=bool)).copy()
        mask[order] = False
        pruned.channel_masks[conv_index] = mask
        weight_slot = owners.index(conv_index)
        pruned.params[weight_slot][~mask] = 0.0
        pruned.params[weight_slot + 1][~mask] = 0.0
        removed[conv_index] = sorted(int(c) for c in order)
    logger.info("Channels pruned", extra={"fraction": prune_fraction, "removed": removed})
    return pruned, removed


def select_prune_fraction(
    model: Model,
    clean: Dataset,
    layers: Literal["last", "all"] = "last",
    batch_size: int = 256,
) -> float:
    """
    Largest fraction in 0.05, 0.10, ... 0.30 whose pruning alone keeps the
    clean-accuracy drop on `clean` within 0.02; 0.05 when none does.
    """
    baseline = clean_accuracy(model, clean, batch_size)
    chosen = PRUNE_SEARCH_START
    steps = int(round((PRUNE_SEARCH_CAP - PRUNE_SEARCH_START) / PRUNE_SEARCH_STEP)) + 1
    for i in range(steps):
        fraction = round(PRUNE_SEARCH_START + i * PRUNE_SEARCH_STEP, 10)
        try:
            candidate, _ = prune_channels(model, clean, fraction, layers, batch_size)
        except OverPruneError:
            break
        drop = baseline - clean_accuracy(candidate, clean, batch_size)
        if drop > PRUNE_SEARCH_MAX_CA_DROP:
            break
        chosen = fraction
    logger.info("Prune fraction selected", extra={"fraction": chosen, "baseline_ca": baseline})
    return chosen


def fine_prune(
    model: Model,
    clean: Dataset,
    prune_fraction: float,
    ft_cfg: TrainConfig,
    layers: Literal["last", "all"] = "last",
    hooks: Optional[EvalHooks] = None,
) -> tuple[Model, TrainLog]:
    """Prune dormant channels, then conventionally fine-tune the pruned model."""
    batch_size = hooks.batch_size if hooks is not None else 256
    pruned, _ = prune_channels(model, clean, prune_fraction, layers, batch_size)
    return fine_tune(pruned, clean, ft_cfg, hooks)


# ---------------------------------------------------------------------------
# Defense dispatch
# ---------------------------------------------------------------------------


def apply_defense(
    model: Model,
    defense: Defense,
    clean: Dataset,
    attack_cfg: TrainConfig,
    seed: int,
    hooks: Optional[EvalHooks] = None,
    policy_override: Optional[TrainablePolicy] = None,
) -> tuple[Model, TrainLog]:
    """
    Run one configured defense.

    Batch size and momentum follow the attack's training configuration;
    conventional fine-tuning and fine-pruning without an explicit lr reuse
    the attack's pre-training lr.

    Args:
        model: Backdoored model
        defense: Defense spec
        clean: Defender's clean data (already subsampled to the defense fraction)
        attack_cfg: Training configuration of the attack
        seed: Arm seed (subsampling and shuffling)
        hooks: Scoring sets
        policy_override: Force a trainable policy (conventional fine-tuning only)
    """
    if isinstance(defense, NoDefense):
        baseline = hooks.score(model) if hooks is not None else None
        return model.copy(), TrainLog(baseline=baseline)

    data = clean
    if defense.subsample_fraction < 1.0:
        data = subsample(clean, defense.subsample_fraction, seed)

    logger.info("Applying defense", extra={
        "defense": defense.kind, "seed": seed, "samples": len(data)
    })
    if isinstance(defense, SuperFTDefense):
        return super_fine_tune(
            model, data, defense.schedule, defense.epochs, seed,
            batch_size=attack_cfg.batch_size, momentum=attack_cfg.momentum, hooks=hooks,
        )

    policy = TrainablePolicy.WHOLE_MODEL
    if isinstance(defense, ConventionalFTDefense):
        policy = policy_override or defense.trainable_policy
    cfg = TrainConfig(
        epochs=defense.epochs,
        batch_size=attack_cfg.batch_size,
        schedule=defense_schedule(defense, attack_cfg),
        momentum=attack_cfg.momentum,
        seed=seed,
        trainable_policy=policy,
    )
    if isinstance(defense, ConventionalFTDefense):
        return fine_tune(model, data, cfg, hooks)

    fraction = defense.prune_fraction
    if fraction is None:
        fraction = select_prune_fraction(model, data, defense.layers, hooks.batch_size if hooks else 256)
    return fine_prune(model, data, fraction, cfg, defense.layers, hooks)


def defense_schedule(defense: Defense, attack_cfg: TrainConfig) -> Optional[Schedule]:
    """Learning-rate schedule a defense trains under; None when it does not train."""
    if isinstance(defense, NoDefense):
        return None
    if isinstance(defense, SuperFTDefense):
        return defense.schedule
    lr = defense.lr if defense.lr is not None else initial_lr(attack_cfg.schedule)
    return ConstantSchedule(lr=lr)
