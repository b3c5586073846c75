"""
Backdoor sequela: membership inference and backdoor re-injection.

Membership inference trains a small perceptron on the target model's sorted
posterior vectors (members vs non-members). Re-injection repoisons the
clean training set with the original trigger and measures how many epochs
each start model needs to reach a given attack success rate.
"""

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Mapping, NamedTuple, Optional, Sequence

import numpy as np
import numpy.typing as npt

from .attacks import poison_dataset
from .data import Dataset
from .defense import train
from .evaluation import EvalHooks, clean_accuracy
from .models import (
    ArchSpec,
    ConstantSchedule,
    MiaConfig,
    MiaReport,
    PoisonSpec,
    ReinjectionPoint,
    ReinjectionReport,
    ThresholdRecord,
    TrainConfig,
    dense,
    flatten,
    relu,
)
from .nn_core import Model, init_model, predict_proba


logger = logging.getLogger(__name__)

MEMBER = 1
NON_MEMBER = 0


class SequelaError(Exception):
    """Base exception for sequela measurements."""
    pass


class BalanceError(SequelaError):
    """Raised when member and non-member pools differ in size."""
    pass


class TriggerMismatchError(SequelaError):
    """Raised when re-injection is asked to use a different backdoor than the original attack."""
    pass


class MiaSplit(NamedTuple):
    """Attack-train and attack-eval feature sets; label 1 = member."""
    train: Dataset
    eval: Dataset


# ---------------------------------------------------------------------------
# Membership inference
# ---------------------------------------------------------------------------


def sorted_posteriors(model: Model, images: npt.NDArray[np.float32], batch_size: int = 256) -> npt.NDArray[np.float32]:
    """Posterior vectors sorted in descending order."""
    probs = predict_proba(model, images, batch_size)
    return np.clip(-np.sort(-probs, axis=1), 0.0, 1.0).astype(np.float32)


def select_mia_pools(train_set: Dataset, test_set: Dataset, seed: int) -> tuple[Dataset, Dataset]:
    """Equal-size random member (train) and non-member (test) pools."""
    n = min(len(train_set), len(test_set))
    rng = np.random.default_rng(seed)
    members = train_set.take(np.sort(rng.choice(len(train_set), size=n, replace=False)), name="members")
    nonmembers = test_set.take(np.sort(rng.choice(len(test_set), size=n, replace=False)), name="nonmembers")
    return members, nonmembers


def _features(values: npt.NDArray[np.float32], labels: npt.NDArray[np.int64],
              pool_positions: npt.NDArray[np.int64], name: str) -> Dataset:
    return Dataset(
        images=values[:, None, None, :],
        labels=labels,
        num_classes=2,
        name=name,
        source_indices=pool_positions,
    )


def build_mia_dataset(
    target: Model,
    members: Dataset,
    nonmembers: Dataset,
    seed: int = 0,
    batch_size: int = 256,
) -> MiaSplit:
    """
    Query the target on both pools and split each pool in half.

    Feature source_indices are pool positions, non-members offset by
    len(members), so train/eval disjointness can be checked directly.

    Raises:
        BalanceError: If the pools differ in size
    """
    if len(members) != len(nonmembers):
        raise BalanceError(
            f"member pool has {len(members)} samples, non-member pool {len(nonmembers)}; "
            "draw them with select_mia_pools"
        )
    n = len(members)
    member_feats = sorted_posteriors(target, members.images, batch_size)
    nonmember_feats = sorted_posteriors(target, nonmembers.images, batch_size)

    rng = np.random.default_rng(seed)
    member_order = rng.permutation(n)
    nonmember_order = rng.permutation(n)
    half = n // 2

    def part(m_idx: npt.NDArray[np.int64], o_idx: npt.NDArray[np.int64], name: str) -> Dataset:
        values = np.concatenate([member_feats[m_idx], nonmember_feats[o_idx]])
        labels = np.concatenate([
            np.full(m_idx.size, MEMBER, dtype=np.int64),
            np.full(o_idx.size, NON_MEMBER, dtype=np.int64),
        ])
        positions = np.concatenate([m_idx, o_idx + n]).astype(np.int64)
        shuffle = rng.permutation(labels.size)
        return _features(values[shuffle], labels[shuffle], positions[shuffle], name)

    return MiaSplit(
        train=part(member_order[:half], nonmember_order[:half], "mia-train"),
        eval=part(member_order[half:], nonmember_order[half:], "mia-eval"),
    )


def mia_arch(feature_len: int, cfg: MiaConfig) -> ArchSpec:
    h1, h2 = cfg.hidden_sizes
    return ArchSpec(
        layers=[flatten(), dense(h1), relu(), dense(h2), relu(), dense(2)],
        input_shape=(1, 1, feature_len),
        num_classes=2,
    )


def train_mia(pairs: Dataset, cfg: MiaConfig) -> Model:
    """
    Seeded three-layer perceptron over the feature vectors.

    Raises:
        DivergenceError: If training diverges
    """
    arch = mia_arch(pairs.image_shape[-1], cfg)
    model = init_model(arch, cfg.seed)
    train_cfg = TrainConfig(
        epochs=cfg.epochs,
        batch_size=cfg.batch_size,
        schedule=ConstantSchedule(lr=cfg.lr),
        momentum=cfg.momentum,
        seed=cfg.seed,
    )
    attack, log = train(model, pairs, train_cfg)
    logger.debug("Attack model trained", extra={"epochs": cfg.epochs, "final_loss": log.final.loss})
    return attack


def mia_accuracy(attack: Model, eval_pairs: Dataset) -> float:
    """
    Fraction of eval pairs whose membership is predicted correctly.

    Raises:
        SequelaError: If the set is empty
        BalanceError: If members and non-members are not balanced
    """
    if len(eval_pairs) == 0:
        raise SequelaError("cannot score membership inference on an empty evaluation set")
    members = int(np.sum(eval_pairs.labels == MEMBER))
    if members * 2 != len(eval_pairs):
        raise BalanceError(
            f"evaluation set holds {members} members out of {len(eval_pairs)} samples"
        )
    return clean_accuracy(attack, eval_pairs)


def run_mia(
    target: Model,
    members: Dataset,
    nonmembers: Dataset,
    cfg: MiaConfig,
    tag: str,
    batch_size: int = 256,
) -> MiaReport:
    split = build_mia_dataset(target, members, nonmembers, cfg.seed, batch_size)
    attack = train_mia(split.train, cfg)
    accuracy = mia_accuracy(attack, split.eval)
    logger.info("Membership inference scored", extra={"target": tag, "accuracy": accuracy})
    return MiaReport(accuracy=accuracy, target_tag=tag, eval_size=len(split.eval))


# ---------------------------------------------------------------------------
# Re-injection
# ---------------------------------------------------------------------------


def epochs_to_threshold(series: Sequence[ReinjectionPoint], threshold: float) -> Optional[int]:
    """Smallest epoch (0 included) whose ASR reaches the threshold."""
    for point in sorted(series, key=lambda p: p.epoch):
        if point.asr >= threshold:
            return point.epoch
    return None


def monotonicity_flags(thresholds: Sequence[ThresholdRecord]) -> list[str]:
    """Ratio pairs on one start model where the smaller ratio reached the bar strictly sooner."""
    flags = []
    by_start: dict[str, list[ThresholdRecord]] = {}
    for record in thresholds:
        by_start.setdefault(record.start_model, []).append(record)
    for start, records in sorted(by_start.items()):
        ordered = sorted(records, key=lambda r: r.ratio)
        for i, small in enumerate(ordered):
            if small.epochs_to_threshold is None:
                continue
            for large in ordered[i + 1:]:
                if large.ratio == small.ratio:
                    continue
                if large.epochs_to_threshold is None or small.epochs_to_threshold < large.epochs_to_threshold:
                    flags.append(
                        f"{start}: ratio {small.ratio} reached the bar at epoch {small.epochs_to_threshold}, "
                        f"ratio {large.ratio} at {large.epochs_to_threshold}"
                    )
    return flags


def _reinject(
    start_name: str,
    start: Model,
    ratio: float,
    spec: PoisonSpec,
    clean_train: Dataset,
    cfg: TrainConfig,
    hooks: EvalHooks,
) -> list[ReinjectionPoint]:
    poisoned, _ = poison_dataset(clean_train, spec.model_copy(update={"poison_ratio": ratio}))
    _, log = train(start, poisoned, cfg, hooks)
    points = [ReinjectionPoint(start_model=start_name, ratio=ratio, epoch=0,
                               asr=log.baseline.asr, ca=log.baseline.ca)]
    points.extend(
        ReinjectionPoint(start_model=start_name, ratio=ratio, epoch=r.epoch, asr=r.asr, ca=r.ca)
        for r in log.epochs
    )
    return points


def reinjection_curve(
    start_models: Mapping[str, Model],
    original: PoisonSpec,
    spec: PoisonSpec,
    clean_train: Dataset,
    attack_cfg: TrainConfig,
    ratios: Sequence[float],
    max_epochs: int,
    threshold: float,
    hooks: EvalHooks,
    workers: int = 1,
) -> ReinjectionReport:
    """
    Re-inject the original backdoor into each start model at each poison ratio.

    Every (start model, ratio) arm repoisons `clean_train`, trains for
    `max_epochs` under the attack's training configuration and records ASR
    and CA per epoch, epoch 0 being the untouched start model.

    Raises:
        TriggerMismatchError: If `spec` does not carry the original trigger and target
    """
    if spec.backdoor_digest() != original.backdoor_digest():
        raise TriggerMismatchError(
            "re-injection must use the original attack's trigger and target label "
            f"(digest {original.backdoor_digest()[:12]}, got {spec.backdoor_digest()[:12]})"
        )
    cfg = attack_cfg.model_copy(update={"epochs": max_epochs})
    scoring = dataclasses.replace(hooks, per_epoch=True)
    arms = [(name, ratio) for name in sorted(start_models) for ratio in ratios]

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        futures = {
            arm: pool.submit(_reinject, arm[0], start_models[arm[0]], arm[1], spec, clean_train, cfg, scoring)
            for arm in arms
        }
        results = {arm: future.result() for arm, future in futures.items()}

    report = ReinjectionReport(threshold=threshold)
    for name, ratio in arms:
        series = results[(name, ratio)]
        report.points.extend(series)
        report.thresholds.append(ThresholdRecord(
            start_model=name, ratio=ratio, epochs_to_threshold=epochs_to_threshold(series, threshold)
        ))
    report.monotonicity_flags = monotonicity_flags(report.thresholds)
    for flag in report.monotonicity_flags:
        logger.warning("Re-injection not monotone in poison ratio", extra={"detail": flag})
    return report
