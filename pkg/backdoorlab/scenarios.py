"""
Deployment scenarios.

An AttackFixture (source data, backdoored model, attack log) is built once
per seed and shared read-only by every defense arm of that seed. Each
scenario then turns the backdoored model into one or more defended arms:

- standalone: defend on clean data of the source task
- transfer: swap the head for the downstream task and fine-tune there
- encoder_sim: the backdoored body is a pre-trained encoder; compare
  head-only fine-tuning against whole-model fine-tuning downstream
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

from .attacks import build_asr_testset
from .data import Dataset, Partitions, gen_synthetic, load_idx, split
from .defense import Defense, apply_defense, defense_schedule, train, train_backdoored
from .evaluation import ASR_CONVENTION, EvalHooks, cost_report
from .models import (
    ArchSpec,
    ConventionalFTDefense,
    EvalPoint,
    EvalReport,
    ExperimentConfig,
    IdxSource,
    NoDefense,
    Scenario,
    SplitSpec,
    SyntheticSource,
    TrainablePolicy,
    TrainConfig,
    TrainLog,
    canonical_digest,
)
from .nn_core import Model, init_model, replace_head
from .schedule import Schedule


logger = logging.getLogger(__name__)


class ScenarioConfigError(Exception):
    """Raised when a scenario cannot be assembled from the loaded data."""
    pass


@dataclass(frozen=True)
class ScenarioData:
    source: Partitions
    downstream: Optional[Partitions] = None


@dataclass
class AttackFixture:
    """Backdoored model of one seed, with the sets used to score it."""
    seed: int
    data: ScenarioData
    arch: ArchSpec
    attack_cfg: TrainConfig
    hooks: EvalHooks
    backdoored: Model
    attack_log: TrainLog
    before: EvalPoint


@dataclass
class ArmResult:
    """
    One defended arm.

    Attributes:
        arm: Arm name (defense, variant, seed)
        report: Before/after metrics and cost
        model: Defended model
        log: Defense training log
        hooks: Sets the arm is scored on
        train_set: Clean data the arm was fine-tuned on
        task: "source" or "downstream"
        schedule: Learning-rate schedule the arm trained under, None if untrained
    """
    arm: str
    report: EvalReport
    model: Model
    log: TrainLog
    hooks: EvalHooks
    train_set: Dataset
    task: str
    schedule: Optional[Schedule] = None


@dataclass
class ScenarioOutcome:
    fixture: AttackFixture
    arms: list[ArmResult] = field(default_factory=list)

    @property
    def reports(self) -> list[EvalReport]:
        return [a.report for a in self.arms]


def load_partitions(source: Union[SyntheticSource, IdxSource], name: str,
                    num_classes: Optional[int] = None) -> Partitions:
    """Materialise a configured dataset source as train/test partitions."""
    if isinstance(source, SyntheticSource):
        dataset = gen_synthetic(
            source.num_classes, source.n_per_class, source.image_size, source.seed,
            channels=source.channels, noise=source.noise, name=name, flip=source.flip,
        )
        spec = SplitSpec(train=1.0 - source.test_fraction, test=source.test_fraction, seed=source.seed)
        return split(dataset, spec)
    k = source.num_classes or num_classes
    train_set = load_idx(source.train_images, source.train_labels, k, name=f"{name}-train")
    test_set = load_idx(source.test_images, source.test_labels, train_set.num_classes, name=f"{name}-test")
    return Partitions(train=train_set, test=test_set, heldout=train_set.take([], name=f"{name}-heldout"))


def load_scenario_data(config: ExperimentConfig) -> ScenarioData:
    """
    Load source and downstream data and check the cross-dataset constraints
    that can only be verified once class counts are known.

    Raises:
        ScenarioConfigError: On inconsistent class counts
    """
    source = load_partitions(config.dataset, "source")
    downstream = None
    if config.downstream is not None:
        downstream = load_partitions(config.downstream, "downstream")
    elif config.scenario != Scenario.STANDALONE:
        raise ScenarioConfigError(f"scenario {config.scenario.value} needs a downstream dataset")

    target = config.attack.target_label
    k_source = source.train.num_classes
    if target >= k_source:
        raise ScenarioConfigError(f"target label {target} is not a class of the {k_source}-class source data")
    if downstream is not None:
        k_down = downstream.train.num_classes
        if target >= k_down:
            raise ScenarioConfigError(
                f"target label {target} is not a class of the {k_down}-class downstream data"
            )
        if config.scenario == Scenario.ENCODER_SIM and k_down != k_source:
            raise ScenarioConfigError(
                f"encoder_sim needs matching class counts, got source={k_source}, downstream={k_down}"
            )
        if downstream.train.image_shape != source.train.image_shape:
            raise ScenarioConfigError(
                f"downstream images {downstream.train.image_shape} do not match source "
                f"{source.train.image_shape}"
            )
    return ScenarioData(source=source, downstream=downstream)


def make_hooks(config: ExperimentConfig, test: Dataset) -> EvalHooks:
    return EvalHooks(
        ca_set=test,
        asr_set=build_asr_testset(test, config.attack.trigger, config.attack.target_label),
        target_label=config.attack.target_label,
        batch_size=config.eval.batch_size,
        per_epoch=config.eval.per_epoch,
    )


def attack_config(config: ExperimentConfig, seed: int) -> TrainConfig:
    return config.attack_training.model_copy(update={"seed": seed})


def prepare_attack(config: ExperimentConfig, seed: int, data: Optional[ScenarioData] = None) -> AttackFixture:
    """Backdoor-train a fresh model on the source task for one seed."""
    data = data or load_scenario_data(config)
    train_set = data.source.train
    arch = config.arch.build(train_set.image_shape, train_set.num_classes)
    cfg = attack_config(config, seed)
    hooks = make_hooks(config, data.source.test)
    logger.info("Training backdoored model", extra={
        "seed": seed, "trigger": config.attack.trigger.kind, "ratio": config.attack.poison_ratio
    })
    backdoored, log = train_backdoored(train_set, config.attack, cfg, arch=arch, hooks=hooks)
    before = hooks.score(backdoored)
    logger.info("Backdoored model ready", extra={"seed": seed, "ca": before.ca, "asr": before.asr})
    return AttackFixture(
        seed=seed, data=data, arch=arch, attack_cfg=cfg, hooks=hooks,
        backdoored=backdoored, attack_log=log, before=before,
    )


def train_clean_twin(fixture: AttackFixture) -> tuple[Model, TrainLog]:
    """Same architecture, configuration and seed as the attack, trained on clean data."""
    model = init_model(fixture.arch, fixture.attack_cfg.seed)
    return train(model, fixture.data.source.train, fixture.attack_cfg, fixture.hooks)


def arm_name(defense: Defense, seed: int, variant: Optional[str] = None) -> str:
    parts = [defense.kind] + ([variant] if variant else []) + [f"seed{seed}"]
    return "-".join(parts)


def _report(
    config: ExperimentConfig,
    defense: Defense,
    arm: str,
    before: EvalPoint,
    after: EvalPoint,
    log: TrainLog,
) -> EvalReport:
    cost = cost_report(log)
    digest = canonical_digest({
        "config": config.model_dump(mode="json"),
        "defense": defense.model_dump(mode="json"),
        "arm": arm,
    })
    return EvalReport(
        scenario=config.scenario,
        arm=arm,
        asr_before=before.asr,
        asr_after=after.asr,
        ca_before=before.ca,
        ca_after=after.ca,
        cost_seconds=cost.seconds,
        epochs_used=cost.epochs,
        steps_used=cost.steps,
        config_digest=digest,
        asr_convention=ASR_CONVENTION,
    )


def _run_arm(
    config: ExperimentConfig,
    fixture: AttackFixture,
    defense: Defense,
    start: Model,
    train_set: Dataset,
    hooks: EvalHooks,
    before: EvalPoint,
    arm: str,
    task: str,
    policy_override: Optional[TrainablePolicy] = None,
    report_defense: Optional[Defense] = None,
) -> ArmResult:
    model, log = apply_defense(
        start, defense, train_set, fixture.attack_cfg, fixture.seed, hooks, policy_override
    )
    after = hooks.score(model)
    report = _report(config, report_defense or defense, arm, before, after, log)
    logger.info("Arm finished", extra={
        "arm": arm,
        "asr_before": report.asr_before,
        "asr_after": report.asr_after,
        "ca_before": report.ca_before,
        "ca_after": report.ca_after,
    })
    return ArmResult(
        arm=arm, report=report, model=model, log=log, hooks=hooks, train_set=train_set, task=task,
        schedule=defense_schedule(defense, fixture.attack_cfg),
    )


def run_scenario(
    config: ExperimentConfig,
    defense: Defense,
    seed: int,
    fixture: Optional[AttackFixture] = None,
) -> ScenarioOutcome:
    """
    Run one defense under the configured scenario for one seed.

    Standalone and transfer produce one arm; encoder_sim produces a
    head_only arm and a whole_model arm. In transfer and encoder_sim,
    defense "none" means plain downstream fine-tuning (head_only for
    transfer, whole_model for the encoder's whole-model arm).

    Raises:
        ScenarioConfigError: On inconsistent class counts
    """
    fixture = fixture or prepare_attack(config, seed)
    if fixture.seed != seed:
        raise ScenarioConfigError(f"fixture was trained with seed {fixture.seed}, arm asks for {seed}")
    outcome = ScenarioOutcome(fixture=fixture)
    source = fixture.data.source

    if config.scenario == Scenario.STANDALONE:
        outcome.arms.append(_run_arm(
            config, fixture, defense, fixture.backdoored, source.train, fixture.hooks,
            fixture.before, arm_name(defense, seed), "source",
        ))
        return outcome

    downstream = fixture.data.downstream
    if downstream is None:
        raise ScenarioConfigError(f"scenario {config.scenario.value} needs a downstream dataset")
    k_down = downstream.train.num_classes
    start = replace_head(fixture.backdoored, k_down, seed)
    hooks = make_hooks(config, downstream.test)
    # the backdoored model can only be scored downstream when the label spaces agree
    before = hooks.score(fixture.backdoored) if k_down == fixture.arch.num_classes else fixture.before

    if config.scenario == Scenario.TRANSFER:
        if isinstance(defense, NoDefense):
            outcome.arms.append(_run_arm(
                config, fixture, ConventionalFTDefense(trainable_policy=TrainablePolicy.HEAD_ONLY),
                start, downstream.train, hooks, before, arm_name(defense, seed), "downstream",
                report_defense=defense,
            ))
        else:
            outcome.arms.append(_run_arm(
                config, fixture, defense, start, downstream.train, hooks, before,
                arm_name(defense, seed), "downstream",
            ))
        return outcome

    epochs = getattr(defense, "epochs", ConventionalFTDefense().epochs)
    head_only = ConventionalFTDefense(epochs=epochs, trainable_policy=TrainablePolicy.HEAD_ONLY)
    outcome.arms.append(_run_arm(
        config, fixture, head_only, start, downstream.train, hooks, before,
        arm_name(defense, seed, "head_only"), "downstream", report_defense=defense,
    ))
    whole: Defense = defense
    if isinstance(defense, NoDefense):
        whole = ConventionalFTDefense(epochs=epochs, trainable_policy=TrainablePolicy.WHOLE_MODEL)
    outcome.arms.append(_run_arm(
        config, fixture, whole, start, downstream.train, hooks, before,
        arm_name(defense, seed, "whole_model"), "downstream",
        policy_override=TrainablePolicy.WHOLE_MODEL, report_defense=defense,
    ))
    return outcome
