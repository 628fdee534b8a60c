"""Teachers: an EMA copy of the encoder and a best-epoch snapshot of the decoder."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .errors import ParameterError, StructureError
from .nn import ParameterSet


@dataclass(frozen=True)
class EmaSchedule:
    """Cosine ramp of the EMA decay from ``tau0`` at step 0 to 1 at step ``total_steps``."""

    tau0: float = 0.9995
    total_steps: int = 1

    def __post_init__(self):
        if not 0.0 < self.tau0 < 1.0:
            raise ParameterError(f"tau0 must lie in (0, 1), got {self.tau0}")
        if self.total_steps < 1:
            raise ParameterError("total_steps must be >= 1")

    def __call__(self, i: int) -> float:
        return schedule_value(self, i)


def schedule_value(s: EmaSchedule, i: int) -> float:
    if not 0 <= i <= s.total_steps:
        raise ParameterError(f"step {i} outside [0, {s.total_steps}]")
    return 1.0 - 0.5 * (1.0 - s.tau0) * (math.cos(math.pi * i / s.total_steps) + 1.0)


def ema_update(teacher: ParameterSet, student: ParameterSet, tau: float) -> None:
    """In place: ``teacher <- tau * teacher + (1 - tau) * student``."""
    if not 0.0 <= tau <= 1.0:
        raise ParameterError(f"tau must lie in [0, 1], got {tau}")
    if teacher.names() != student.names():
        raise StructureError("teacher and student parameter names differ")
    for name, t in teacher.items():
        s = student[name].data
        if s.shape != t.shape:
            raise StructureError(f"{name}: teacher {t.shape} vs student {s.shape}")
        if tau == 1.0:
            continue
        if tau == 0.0:
            t.data = s.copy()
            continue
        mixed = tau * t.data + (1.0 - tau) * s
        # rounding must not push a coordinate outside [old, student]
        t.data = np.clip(mixed, np.minimum(t.data, s), np.maximum(t.data, s))


@dataclass(frozen=True)
class TeacherState:
    params: ParameterSet
    source_epoch: int
    selection_accuracy: float


def maybe_promote_teacher(history: Sequence[float],
                          snapshots: Mapping[int, ParameterSet] | Sequence[ParameterSet]) -> TeacherState | None:
    """Best completed epoch (1-based) by recorded accuracy; earliest wins ties.

    Returns ``None`` while no epoch has completed. ``snapshots`` may be a full
    list or a mapping that only holds the epochs still worth keeping.
    """
    if len(history) == 0:
        return None
    best = int(np.argmax(np.asarray(history, dtype=np.float64))) + 1
    if isinstance(snapshots, Mapping):
        params = snapshots[best]
    else:
        params = snapshots[best - 1]
    return TeacherState(params.copy(), best, float(history[best - 1]))
