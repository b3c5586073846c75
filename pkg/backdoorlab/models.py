"""
Data models for backdoorlab configuration, experiment records and reports.

All models use Pydantic for validation and type safety. Operations live in
the domain modules (nn_core, data, attacks, schedule, defense, evaluation,
sequela); this module only declares what they consume and produce.
"""

from __future__ import annotations

import hashlib
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Literal, Optional, Union

import orjson
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator


def canonical_digest(payload: Any) -> str:
    """Return the sha256 hex digest of a JSON-compatible payload with sorted keys."""
    if isinstance(payload, BaseModel):
        payload = payload.model_dump(mode="json")
    return hashlib.sha256(orjson.dumps(payload, option=orjson.OPT_SORT_KEYS)).hexdigest()


# ---------------------------------------------------------------------------
# Architecture
# ---------------------------------------------------------------------------


class LayerKind(str, Enum):
    """Layer kinds understood by the engine."""
    CONV = "conv"
    RELU = "relu"
    MAXPOOL = "maxpool"
    FLATTEN = "flatten"
    DENSE = "dense"


class LayerSpec(BaseModel):
    """
    One layer of an architecture.

    Attributes:
        kind: Layer kind
        out_channels: Output channels (conv)
        kernel: Square kernel size (conv)
        stride: Stride (conv)
        pool: Pooling window and stride (maxpool)
        out_dim: Output width (dense)
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: LayerKind
    out_channels: Optional[int] = Field(None, ge=1)
    kernel: Optional[int] = Field(None, ge=1)
    stride: int = Field(1, ge=1)
    pool: Optional[int] = Field(None, ge=1)
    out_dim: Optional[int] = Field(None, ge=1)

    @model_validator(mode='after')
    def check_required_fields(self) -> "LayerSpec":
        """Each kind needs its own parameters."""
        if self.kind == LayerKind.CONV and (self.out_channels is None or self.kernel is None):
            raise ValueError("conv layer needs out_channels and kernel")
        if self.kind == LayerKind.MAXPOOL and self.pool is None:
            raise ValueError("maxpool layer needs pool")
        if self.kind == LayerKind.DENSE and self.out_dim is None:
            raise ValueError("dense layer needs out_dim")
        return self

    @property
    def has_params(self) -> bool:
        return self.kind in (LayerKind.CONV, LayerKind.DENSE)


def conv(out_channels: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec(kind=LayerKind.CONV, out_channels=out_channels, kernel=kernel, stride=stride)


def relu() -> LayerSpec:
    return LayerSpec(kind=LayerKind.RELU)


def maxpool(pool: int) -> LayerSpec:
    return LayerSpec(kind=LayerKind.MAXPOOL, pool=pool)


def flatten() -> LayerSpec:
    return LayerSpec(kind=LayerKind.FLATTEN)


def dense(out_dim: int) -> LayerSpec:
    return LayerSpec(kind=LayerKind.DENSE, out_dim=out_dim)


def reference_body() -> list[LayerSpec]:
    """Desk-scale feature extractor: conv(8,3)-relu-pool(2)-conv(16,3)-relu-pool(2)-flatten."""
    return [conv(8, 3), relu(), maxpool(2), conv(16, 3), relu(), maxpool(2), flatten()]


class ArchSpec(BaseModel):
    """
    Architecture descriptor.

    Attributes:
        layers: Ordered layer list
        input_shape: (channels, height, width)
        num_classes: Class count k; the last layer is dense(k)
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    layers: list[LayerSpec] = Field(..., min_length=1)
    input_shape: tuple[int, int, int]
    num_classes: int = Field(..., ge=2)

    @field_validator('input_shape')
    @classmethod
    def positive_dims(cls, v: tuple[int, int, int]) -> tuple[int, int, int]:
        if any(d < 1 for d in v):
            raise ValueError(f"input_shape dims must be >= 1, got {v}")
        return v

    @model_validator(mode='after')
    def check_chain(self) -> "ArchSpec":
        """Layer shapes must chain and the tail must be dense(num_classes)."""
        self.output_shapes()
        last = self.layers[-1]
        if last.kind != LayerKind.DENSE or last.out_dim != self.num_classes:
            raise ValueError(
                f"last layer must be dense with out_dim={self.num_classes}, got {last.kind.value}"
            )
        return self

    def output_shapes(self) -> list[tuple[int, ...]]:
        """Per-sample output shape after each layer."""
        shapes: list[tuple[int, ...]] = []
        shape: tuple[int, ...] = tuple(self.input_shape)
        for i, layer in enumerate(self.layers):
            if layer.kind == LayerKind.CONV:
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: conv needs a (c,h,w) input, got {shape}")
                c, h, w = shape
                k, s = layer.kernel, layer.stride
                oh, ow = (h - k) // s + 1, (w - k) // s + 1
                if h < k or w < k or oh < 1 or ow < 1:
                    raise ValueError(f"layer {i}: kernel {k} does not fit input {shape}")
                shape = (layer.out_channels, oh, ow)
            elif layer.kind == LayerKind.MAXPOOL:
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: maxpool needs a (c,h,w) input, got {shape}")
                c, h, w = shape
                if h // layer.pool < 1 or w // layer.pool < 1:
                    raise ValueError(f"layer {i}: pool {layer.pool} does not fit input {shape}")
                shape = (c, h // layer.pool, w // layer.pool)
            elif layer.kind == LayerKind.FLATTEN:
                size = 1
                for d in shape:
                    size *= d
                shape = (size,)
            elif layer.kind == LayerKind.DENSE:
                if len(shape) != 1:
                    raise ValueError(f"layer {i}: dense needs a flat input, got {shape}; add flatten")
                shape = (layer.out_dim,)
            shapes.append(shape)
        return shapes

    def covered_extent(self) -> tuple[int, int]:
        """
        Rows and columns of the input, counted from the top-left, that reach the first flatten.

        Floor pooling drops trailing rows and columns; pixels past the extent never
        influence the logits.
        """
        cut = next((i for i, layer in enumerate(self.layers) if layer.kind == LayerKind.FLATTEN), None)
        if cut is None or cut == 0:
            return self.input_shape[1], self.input_shape[2]
        _, h, w = self.input_shape_of(cut)
        for layer in reversed(self.layers[:cut]):
            if layer.kind == LayerKind.CONV:
                h, w = (h - 1) * layer.stride + layer.kernel, (w - 1) * layer.stride + layer.kernel
            elif layer.kind == LayerKind.MAXPOOL:
                h, w = h * layer.pool, w * layer.pool
        return h, w

    def input_shape_of(self, layer_index: int) -> tuple[int, ...]:
        if layer_index == 0:
            return tuple(self.input_shape)
        return self.output_shapes()[layer_index - 1]

    def param_shapes(self) -> list[tuple[int, ...]]:
        """Weight then bias shape for every parametrised layer, in layer order."""
        shapes: list[tuple[int, ...]] = []
        for i, layer in enumerate(self.layers):
            in_shape = self.input_shape_of(i)
            if layer.kind == LayerKind.CONV:
                shapes.append((layer.out_channels, in_shape[0], layer.kernel, layer.kernel))
                shapes.append((layer.out_channels,))
            elif layer.kind == LayerKind.DENSE:
                shapes.append((layer.out_dim, in_shape[0]))
                shapes.append((layer.out_dim,))
        return shapes

    def param_layer_indices(self) -> list[int]:
        """Layer index owning each parameter tensor."""
        owners: list[int] = []
        for i, layer in enumerate(self.layers):
            if layer.has_params:
                owners.extend([i, i])
        return owners

    def conv_layer_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.kind == LayerKind.CONV]

    def with_head(self, num_classes: int) -> "ArchSpec":
        layers = list(self.layers[:-1]) + [dense(num_classes)]
        return ArchSpec(layers=layers, input_shape=self.input_shape, num_classes=num_classes)


def reference_arch(input_shape: tuple[int, int, int], num_classes: int) -> ArchSpec:
    return ArchSpec(
        layers=reference_body() + [dense(num_classes)],
        input_shape=input_shape,
        num_classes=num_classes,
    )


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


class SplitSpec(BaseModel):
    """
    Dataset split fractions.

    Attributes:
        train: Train fraction
        test: Test fraction
        heldout: Optional held-out fraction
        seed: Shuffle seed
    """
    model_config = ConfigDict(extra='forbid')

    train: float = Field(0.8, ge=0.0, le=1.0)
    test: float = Field(0.2, ge=0.0, le=1.0)
    heldout: float = Field(0.0, ge=0.0, le=1.0)
    seed: int = 0

    @model_validator(mode='after')
    def fractions_sum_to_one(self) -> "SplitSpec":
        total = self.train + self.test + self.heldout
        if abs(total - 1.0) > 1e-9:
            raise ValueError(f"split fractions must sum to 1, got {total}")
        return self


class SyntheticSource(BaseModel):
    """Class-conditional synthetic images."""
    model_config = ConfigDict(extra='forbid')

    kind: Literal["synthetic"] = "synthetic"
    num_classes: int = Field(4, ge=2)
    n_per_class: int = Field(250, ge=0)
    image_size: int = Field(18, ge=4)
    channels: int = Field(1, ge=1)
    noise: float = Field(0.1, ge=0.0)
    flip: float = Field(0.1, ge=0.0, lt=0.5, description="Per-sample probability of inverting each template cell")
    seed: int = 0
    test_fraction: float = Field(0.25, gt=0.0, lt=1.0)


class IdxSource(BaseModel):
    """MNIST-family IDX files for train and test."""
    model_config = ConfigDict(extra='forbid')

    kind: Literal["idx"] = "idx"
    train_images: Path
    train_labels: Path
    test_images: Path
    test_labels: Path
    num_classes: Optional[int] = Field(None, ge=2)

    @field_validator('train_images', 'train_labels', 'test_images', 'test_labels')
    @classmethod
    def file_exists(cls, v: Path) -> Path:
        if not v.exists():
            raise ValueError(f"IDX file not found: {v}")
        return v


DatasetSource = Annotated[Union[SyntheticSource, IdxSource], Field(discriminator='kind')]


# ---------------------------------------------------------------------------
# Triggers and poisoning
# ---------------------------------------------------------------------------


class PatchPosition(str, Enum):
    TOP_LEFT = "top-left"
    TOP_RIGHT = "top-right"
    BOTTOM_LEFT = "bottom-left"
    BOTTOM_RIGHT = "bottom-right"


class PatchTrigger(BaseModel):
    """Visible square patch (BadNets style)."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal["patch"] = "patch"
    size: int = Field(3, ge=1)
    position: Union[PatchPosition, tuple[int, int]] = PatchPosition.BOTTOM_RIGHT
    value: float = Field(1.0, ge=0.0, le=1.0)


class BlendedTrigger(BaseModel):
    """Seeded noise image blended over the whole input."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal["blended"] = "blended"
    pattern_seed: int = 0
    alpha: float = Field(0.2, gt=0.0, lt=1.0)


class LowFreqTrigger(BaseModel):
    """Additive perturbation confined to the lowest DCT bands."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal["lowfreq"] = "lowfreq"
    bands: int = Field(3, ge=1)
    amplitude: float = Field(0.2, gt=0.0, le=1.0)
    seed: int = 0


class WarpTrigger(BaseModel):
    """Smooth seeded displacement field applied by bilinear resampling."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal["warp"] = "warp"
    grid_size: int = Field(4, ge=2)
    strength: float = Field(0.5, ge=0.0)
    seed: int = 0


TriggerSpec = Annotated[
    Union[PatchTrigger, BlendedTrigger, LowFreqTrigger, WarpTrigger],
    Field(discriminator='kind'),
]


class PoisonSpec(BaseModel):
    """
    Backdoor poisoning recipe.

    Attributes:
        trigger: Trigger t(.)
        target_label: Target class c_t
        poison_ratio: Fraction of training samples poisoned
        seed: Sample-selection seed
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    trigger: TriggerSpec = Field(default_factory=PatchTrigger)
    target_label: int = Field(0, ge=0)
    poison_ratio: float = Field(0.1, ge=0.0, le=1.0)
    seed: int = 0

    def digest(self) -> str:
        return canonical_digest(self)

    def backdoor_digest(self) -> str:
        """Digest of what defines the backdoor itself (trigger and target), ignoring the ratio."""
        return canonical_digest({
            "trigger": self.trigger.model_dump(mode="json"),
            "target_label": self.target_label,
        })


# ---------------------------------------------------------------------------
# Learning-rate schedules
# ---------------------------------------------------------------------------


class ConstantSchedule(BaseModel):
    """Constant learning rate (conventional fine-tuning)."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal["constant"] = "constant"
    lr: float = Field(0.01, gt=0.0)


class SuperFTSchedule(BaseModel):
    """
    Two-phase cyclic schedule.

    Attributes:
        lr_base: Cycle floor
        lr_max1: Peak during the first phase
        lr_max2: Peak during the second phase
        cycle_len_steps: Full cycle length (ascent plus descent) in steps
        phase1_epochs: Epochs spent in the first phase
        descent: linear (symmetric triangle) or instant (ramp, then drop to lr_base)
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal["superft"] = "superft"
    lr_base: float = Field(3e-4, gt=0.0)
    lr_max1: float = Field(0.1, gt=0.0)
    lr_max2: float = Field(0.001, gt=0.0)
    cycle_len_steps: int = Field(500, ge=2)
    phase1_epochs: int = Field(10, ge=1)
    descent: Literal["linear", "instant"] = "linear"

    @model_validator(mode='after')
    def check_ordering(self) -> "SuperFTSchedule":
        if not (self.lr_max1 > self.lr_max2 > self.lr_base > 0):
            raise ValueError(
                "superft needs lr_max1 > lr_max2 > lr_base > 0, got "
                f"lr_max1={self.lr_max1}, lr_max2={self.lr_max2}, lr_base={self.lr_base}"
            )
        return self


ScheduleSpec = Annotated[Union[ConstantSchedule, SuperFTSchedule], Field(discriminator='kind')]


# ---------------------------------------------------------------------------
# Training and defenses
# ---------------------------------------------------------------------------


class TrainablePolicy(str, Enum):
    WHOLE_MODEL = "whole_model"
    HEAD_ONLY = "head_only"


class TrainConfig(BaseModel):
    """
    Optimiser run configuration.

    Attributes:
        epochs: Number of passes over the data
        batch_size: Mini-batch size
        schedule: Learning-rate schedule
        momentum: SGD momentum
        seed: Shuffling seed (and init seed where a fresh model is built)
        trainable_policy: Which tensors the optimiser may update
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    epochs: int = Field(30, ge=1)
    batch_size: int = Field(64, ge=1)
    schedule: ScheduleSpec = Field(default_factory=ConstantSchedule)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    seed: int = 0
    trainable_policy: TrainablePolicy = TrainablePolicy.WHOLE_MODEL


class NoDefense(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal["none"] = "none"


class ConventionalFTDefense(BaseModel):
    """Constant-lr fine-tuning; lr=None reuses the attack's pre-training lr."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal["conventional_ft"] = "conventional_ft"
    epochs: int = Field(20, ge=1)
    lr: Optional[float] = Field(None, gt=0.0)
    trainable_policy: TrainablePolicy = TrainablePolicy.WHOLE_MODEL
    subsample_fraction: float = Field(1.0, gt=0.0, le=1.0)


class SuperFTDefense(BaseModel):
    """Whole-model fine-tuning under the two-phase cyclic schedule."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal["super_ft"] = "super_ft"
    epochs: int = Field(5, ge=1)
    schedule: SuperFTSchedule = Field(default_factory=SuperFTSchedule)
    subsample_fraction: float = Field(1.0, gt=0.0, le=1.0)


class FinePruneDefense(BaseModel):
    """Prune dormant conv channels then fine-tune; prune_fraction=None searches for one."""
    model_config = ConfigDict(extra='forbid', frozen=True)

    kind: Literal["fine_prune"] = "fine_prune"
    prune_fraction: Optional[float] = Field(None, ge=0.0, lt=1.0)
    layers: Literal["last", "all"] = "last"
    epochs: int = Field(10, ge=1)
    lr: Optional[float] = Field(None, gt=0.0)
    subsample_fraction: float = Field(1.0, gt=0.0, le=1.0)


DefenseSpec = Annotated[
    Union[NoDefense, ConventionalFTDefense, SuperFTDefense, FinePruneDefense],
    Field(discriminator='kind'),
]


class Scenario(str, Enum):
    STANDALONE = "standalone"
    TRANSFER = "transfer"
    ENCODER_SIM = "encoder_sim"


# ---------------------------------------------------------------------------
# Training records and reports
# ---------------------------------------------------------------------------


class EvalPoint(BaseModel):
    """Clean accuracy and attack success rate at one moment."""
    ca: Optional[float] = Field(None, ge=0.0, le=1.0)
    asr: Optional[float] = Field(None, ge=0.0, le=1.0)


class EpochRecord(BaseModel):
    """One row of a training log."""
    epoch: int = Field(..., ge=1)
    loss: float
    ca: Optional[float] = Field(None, ge=0.0, le=1.0)
    asr: Optional[float] = Field(None, ge=0.0, le=1.0)
    seconds: float = Field(..., ge=0.0)
    steps: int = Field(..., ge=0)
    max_lr: float = Field(..., ge=0.0)


class TrainLog(BaseModel):
    """
    Per-epoch training log.

    Attributes:
        baseline: CA/ASR before the first update (epoch 0)
        epochs: One record per completed epoch
    """
    baseline: Optional[EvalPoint] = None
    epochs: list[EpochRecord] = Field(default_factory=list)

    @model_validator(mode='after')
    def monotone_totals(self) -> "TrainLog":
        for prev, cur in zip(self.epochs, self.epochs[1:]):
            if cur.seconds < prev.seconds or cur.steps < prev.steps:
                raise ValueError(f"wall-clock and steps must not decrease (epoch {cur.epoch})")
        return self

    @property
    def max_lr(self) -> float:
        return max((r.max_lr for r in self.epochs), default=0.0)

    @property
    def final(self) -> Optional[EpochRecord]:
        return self.epochs[-1] if self.epochs else None


class CostReport(BaseModel):
    seconds: float = Field(0.0, ge=0.0)
    epochs: int = Field(0, ge=0)
    steps: int = Field(0, ge=0)


class EvalReport(BaseModel):
    """
    Outcome of one defended arm.

    Attributes:
        scenario: Scenario tag
        arm: Arm name within the scenario
        asr_before / asr_after: ASR of the backdoored and defended model
        ca_before / ca_after: Clean accuracy of the same two models
        cost_seconds / epochs_used / steps_used: Defense compute
        config_digest: Digest over every config field of the arm
        asr_convention: How the ASR set was built
    """
    scenario: Scenario
    arm: str
    asr_before: float = Field(..., ge=0.0, le=1.0)
    asr_after: float = Field(..., ge=0.0, le=1.0)
    ca_before: float = Field(..., ge=0.0, le=1.0)
    ca_after: float = Field(..., ge=0.0, le=1.0)
    cost_seconds: float = Field(..., ge=0.0)
    epochs_used: int = Field(..., ge=0)
    steps_used: int = Field(0, ge=0)
    config_digest: str
    asr_convention: str = "target-class samples excluded"

    def to_record(self) -> dict[str, Any]:
        """Flat key/value record."""
        return self.model_dump(mode="json")


class MiaConfig(BaseModel):
    """
    Membership-inference attack model settings.

    The attack model is a three-layer perceptron over the target's sorted
    posterior vector.
    """
    model_config = ConfigDict(extra='forbid', frozen=True)

    hidden_sizes: tuple[int, int] = (64, 32)
    epochs: int = Field(50, ge=1)
    lr: float = Field(1e-3, gt=0.0)
    batch_size: int = Field(16, ge=1)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)
    seed: int = 0

    @field_validator('hidden_sizes')
    @classmethod
    def positive_hidden(cls, v: tuple[int, int]) -> tuple[int, int]:
        if any(h < 1 for h in v):
            raise ValueError(f"hidden sizes must be >= 1, got {v}")
        return v


class MiaReport(BaseModel):
    accuracy: float = Field(..., ge=0.0, le=1.0)
    target_tag: str
    eval_size: int = Field(..., ge=0)


class ReinjectionPoint(BaseModel):
    start_model: str
    ratio: float = Field(..., ge=0.0, le=1.0)
    epoch: int = Field(..., ge=0)
    asr: float = Field(..., ge=0.0, le=1.0)
    ca: Optional[float] = Field(None, ge=0.0, le=1.0)


class ThresholdRecord(BaseModel):
    start_model: str
    ratio: float = Field(..., ge=0.0, le=1.0)
    epochs_to_threshold: Optional[int] = Field(None, ge=0)


class ReinjectionReport(BaseModel):
    """
    Backdoor re-injection curves.

    Attributes:
        threshold: ASR bar for epochs_to_threshold
        points: ASR (and CA) per start model, ratio and epoch; epoch 0 is the start model
        thresholds: Smallest epoch reaching the bar, per start model and ratio
        monotonicity_flags: Ratio pairs where a smaller ratio reached the bar sooner
    """
    threshold: float = Field(0.9, gt=0.0, le=1.0)
    points: list[ReinjectionPoint] = Field(default_factory=list)
    thresholds: list[ThresholdRecord] = Field(default_factory=list)
    monotonicity_flags: list[str] = Field(default_factory=list)

    def series(self, start_model: str, ratio: float) -> list[ReinjectionPoint]:
        return sorted(
            (p for p in self.points if p.start_model == start_model and p.ratio == ratio),
            key=lambda p: p.epoch,
        )

    def epochs_to_threshold(self, start_model: str, ratio: float) -> Optional[int]:
        for record in self.thresholds:
            if record.start_model == start_model and record.ratio == ratio:
                return record.epochs_to_threshold
        raise KeyError(f"no re-injection arm for start_model={start_model!r}, ratio={ratio}")


# ---------------------------------------------------------------------------
# Experiment configuration
# ---------------------------------------------------------------------------


class ArchConfig(BaseModel):
    """Feature-extractor layers; the dense(k) head is appended from the dataset."""
    model_config = ConfigDict(extra='forbid')

    layers: list[LayerSpec] = Field(default_factory=reference_body)

    def build(self, input_shape: tuple[int, int, int], num_classes: int) -> ArchSpec:
        return ArchSpec(
            layers=list(self.layers) + [dense(num_classes)],
            input_shape=input_shape,
            num_classes=num_classes,
        )


class EvalOptions(BaseModel):
    model_config = ConfigDict(extra='forbid')

    batch_size: int = Field(256, ge=1)
    per_epoch: bool = Field(True, description="Score CA/ASR after every epoch")


class SequelaOptions(BaseModel):
    """
    Backdoor sequela measurements.

    Attributes:
        mia: Run membership inference on backdoored and defended models
        mia_config: Attack-model settings
        reinjection_ratios: Poison ratios for re-injection (empty disables it)
        reinjection_epochs: Re-injection training epochs per arm
        threshold: ASR bar for epochs_to_threshold
    """
    model_config = ConfigDict(extra='forbid')

    mia: bool = False
    mia_config: MiaConfig = Field(default_factory=MiaConfig)
    reinjection_ratios: list[float] = Field(default_factory=list)
    reinjection_epochs: int = Field(10, ge=1)
    threshold: float = Field(0.9, gt=0.0, le=1.0)

    @field_validator('reinjection_ratios')
    @classmethod
    def ratios_in_range(cls, v: list[float]) -> list[float]:
        for ratio in v:
            if not 0.0 <= ratio <= 1.0:
                raise ValueError(f"re-injection ratio must be in [0, 1], got {ratio}")
        return v


class ExperimentConfig(BaseModel):
    """
    One experiment: data, architecture, attack, defense arms and sequela.

    `defense` may be a list; the arms are the product of defenses and seeds.
    """
    model_config = ConfigDict(extra='forbid')

    version: str = Field(default="1.0")
    scenario: Scenario = Scenario.STANDALONE
    dataset: DatasetSource = Field(default_factory=SyntheticSource)
    downstream: Optional[DatasetSource] = None
    arch: ArchConfig = Field(default_factory=ArchConfig)
    attack: PoisonSpec = Field(default_factory=PoisonSpec)
    attack_training: TrainConfig = Field(default_factory=TrainConfig)
    defense: Union[DefenseSpec, list[DefenseSpec]] = Field(default_factory=SuperFTDefense)
    eval: EvalOptions = Field(default_factory=EvalOptions)
    sequela: SequelaOptions = Field(default_factory=SequelaOptions)
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: Path = Path("results")

    @property
    def defenses(self) -> list[Any]:
        return list(self.defense) if isinstance(self.defense, list) else [self.defense]

    @model_validator(mode='after')
    def check_cross_fields(self) -> "ExperimentConfig":
        """Class counts and trigger geometry must agree with the data."""
        if isinstance(self.defense, list) and not self.defense:
            raise ValueError("defense list must not be empty")
        if self.scenario != Scenario.STANDALONE and self.downstream is None:
            raise ValueError(f"scenario '{self.scenario.value}' needs a downstream dataset")

        source_k = _declared_classes(self.dataset)
        if source_k is not None and self.attack.target_label >= source_k:
            raise ValueError(
                f"attack.target_label={self.attack.target_label} is not a class of the "
                f"{source_k}-class source dataset"
            )
        if self.downstream is not None:
            down_k = _declared_classes(self.downstream)
            if down_k is not None and self.attack.target_label >= down_k:
                raise ValueError(
                    f"attack.target_label={self.attack.target_label} is not a class of the "
                    f"{down_k}-class downstream dataset"
                )
            if (self.scenario == Scenario.ENCODER_SIM and source_k is not None
                    and down_k is not None and source_k != down_k):
                raise ValueError(
                    f"encoder_sim needs matching class counts, got source={source_k} downstream={down_k}"
                )

        trigger = self.attack.trigger
        if isinstance(trigger, PatchTrigger) and isinstance(self.dataset, SyntheticSource):
            size = self.dataset.image_size
            if trigger.size > size:
                raise ValueError(f"patch size {trigger.size} exceeds image size {size}")
            if isinstance(trigger.position, tuple):
                row, col = trigger.position
                if row < 0 or col < 0 or row + trigger.size > size or col + trigger.size > size:
                    raise ValueError(
                        f"patch at {trigger.position} with size {trigger.size} leaves the {size}x{size} image"
                    )
            else:
                bottom = trigger.position in (PatchPosition.BOTTOM_LEFT, PatchPosition.BOTTOM_RIGHT)
                right = trigger.position in (PatchPosition.TOP_RIGHT, PatchPosition.BOTTOM_RIGHT)
                row = size - trigger.size if bottom else 0
                col = size - trigger.size if right else 0
            try:
                arch = self.arch.build((self.dataset.channels, size, size), self.dataset.num_classes)
            except ValueError:
                arch = None
            if arch is not None:
                rows, cols = arch.covered_extent()
                if row + trigger.size > rows or col + trigger.size > cols:
                    raise ValueError(
                        f"patch rows {row}..{row + trigger.size - 1}, cols {col}..{col + trigger.size - 1} "
                        f"fall outside the {rows}x{cols} region the architecture sees of a {size}x{size} "
                        f"image; pooling crops the rest. Move the patch or change image_size"
                    )
        return self


def _declared_classes(source: Union[SyntheticSource, IdxSource]) -> Optional[int]:
    return source.num_classes
