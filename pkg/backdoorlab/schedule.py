"""
Learning-rate schedules.

`lr_at` is a pure function of (spec, global step, steps per epoch). The
super-fine-tuning schedule runs triangular cycles of `cycle_len_steps`
steps peaking at lr_max1 for the first `phase1_epochs` epochs, then at
lr_max2; the cycle phase restarts at the phase boundary.
"""

import logging
from typing import Union

from .models import ConstantSchedule, SuperFTSchedule


logger = logging.getLogger(__name__)

Schedule = Union[ConstantSchedule, SuperFTSchedule]


class ScheduleError(Exception):
    """Raised on invalid schedule queries."""
    pass


def phase_boundary(spec: SuperFTSchedule, steps_per_epoch: int) -> int:
    """First global step of the second phase."""
    return spec.phase1_epochs * steps_per_epoch


def _cycle_value(base: float, peak: float, position: int, length: int, descent: str) -> float:
    if descent == "instant":
        return base + (peak - base) * position / (length - 1)
    return base + (peak - base) * (1.0 - abs(2.0 * position / length - 1.0))


def lr_at(spec: Schedule, global_step: int, steps_per_epoch: int) -> float:
    """
    Learning rate for one optimiser step.

    Raises:
        ScheduleError: If global_step < 0 or steps_per_epoch < 1
    """
    if global_step < 0:
        raise ScheduleError(f"global_step must be >= 0, got {global_step}")
    if steps_per_epoch < 1:
        raise ScheduleError(f"steps_per_epoch must be >= 1, got {steps_per_epoch}")
    if isinstance(spec, ConstantSchedule):
        return spec.lr

    boundary = phase_boundary(spec, steps_per_epoch)
    if global_step < boundary:
        peak, offset = spec.lr_max1, global_step
    else:
        peak, offset = spec.lr_max2, global_step - boundary
    position = offset % spec.cycle_len_steps
    return _cycle_value(spec.lr_base, peak, position, spec.cycle_len_steps, spec.descent)


def schedule_trace(spec: Schedule, total_steps: int, steps_per_epoch: int) -> list[tuple[int, float]]:
    """(step, lr) for steps 0 .. total_steps - 1."""
    if total_steps < 0:
        raise ScheduleError(f"total_steps must be >= 0, got {total_steps}")
    return [(step, lr_at(spec, step, steps_per_epoch)) for step in range(total_steps)]


def lr_bounds(spec: Schedule) -> tuple[float, float]:
    """Smallest and largest learning rate the schedule can produce."""
    if isinstance(spec, ConstantSchedule):
        return spec.lr, spec.lr
    return spec.lr_base, spec.lr_max1


def initial_lr(spec: Schedule) -> float:
    """Learning rate a run under this schedule starts from."""
    return spec.lr if isinstance(spec, ConstantSchedule) else spec.lr_base
