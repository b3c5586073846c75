"""
Defense metrics: clean accuracy, attack success rate and compute cost.
"""

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .data import Dataset
from .models import CostReport, EvalPoint, TrainLog
from .nn_core import Model, predict


logger = logging.getLogger(__name__)

ASR_CONVENTION = "target-class samples excluded"


class EvaluationError(Exception):
    """Base exception for evaluation errors."""
    pass


class EmptyEvaluationSetError(EvaluationError):
    """Raised when scoring an empty dataset."""
    pass


class AsrSetPurityError(EvaluationError):
    """Raised when an ASR set contains samples originally of the target class."""
    pass


def clean_accuracy(model: Model, test: Dataset, batch_size: int = 256) -> float:
    """
    Fraction of argmax predictions equal to the true labels.

    Raises:
        EmptyEvaluationSetError: If the test set is empty
    """
    if len(test) == 0:
        raise EmptyEvaluationSetError(f"cannot score clean accuracy on empty dataset {test.name}")
    preds = predict(model, test.images, batch_size=batch_size)
    return float(np.mean(preds == test.labels))


def check_asr_purity(asr_set: Dataset, target_label: int) -> None:
    """
    Raises:
        AsrSetPurityError: If original labels are missing or include the target class
    """
    if asr_set.original_labels is None:
        raise AsrSetPurityError(
            f"{asr_set.name} carries no original labels; build it with build_asr_testset"
        )
    impure = int(np.sum(asr_set.original_labels == target_label))
    if impure:
        raise AsrSetPurityError(
            f"{asr_set.name} holds {impure} samples originally of target class {target_label}"
        )


def attack_success_rate(model: Model, asr_set: Dataset, target_label: int, batch_size: int = 256) -> float:
    """
    Fraction of triggered non-target samples classified as the target label.

    Raises:
        EmptyEvaluationSetError: If the set is empty
        AsrSetPurityError: If the set was not built with the exclusion convention
    """
    if len(asr_set) == 0:
        raise EmptyEvaluationSetError(f"cannot score ASR on empty dataset {asr_set.name}")
    check_asr_purity(asr_set, target_label)
    preds = predict(model, asr_set.images, batch_size=batch_size)
    return float(np.mean(preds == target_label))


def cost_report(log: TrainLog) -> CostReport:
    """Cumulative training seconds, epochs and steps; zeros for an empty log."""
    final = log.final
    if final is None:
        return CostReport()
    return CostReport(seconds=final.seconds, epochs=len(log.epochs), steps=final.steps)


@dataclass(frozen=True)
class EvalHooks:
    """
    Scoring sets used during training.

    Attributes:
        ca_set: Clean test set
        asr_set: Triggered set from build_asr_testset (None disables ASR)
        target_label: Backdoor target class
        batch_size: Inference chunk size
        per_epoch: Score after every epoch rather than only after the last
    """
    ca_set: Optional[Dataset] = None
    asr_set: Optional[Dataset] = None
    target_label: int = 0
    batch_size: int = 256
    per_epoch: bool = True

    def score(self, model: Model) -> EvalPoint:
        ca = clean_accuracy(model, self.ca_set, self.batch_size) if self.ca_set is not None else None
        asr = None
        if self.asr_set is not None:
            asr = attack_success_rate(model, self.asr_set, self.target_label, self.batch_size)
        return EvalPoint(ca=ca, asr=asr)
