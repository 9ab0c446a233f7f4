from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from moe_sched import constants
from moe_sched.core import ClusterSpec, ModelSpec, OpRole, Phase, SimReport
from moe_sched.engine import TaskTag
from moe_sched.errors import InvalidSpec, Violation


class PackingSample(NamedTuple):
    ffn_micro_time: float
    a2a_micro_time: float


type PackingMeasure = Callable[[int], PackingSample | None]


@dataclass(frozen=True, kw_only=True)
class PackingState:
    experts_per_device: int = 1
    max_experts_per_device: int = 1
    warmup_steps: int = constants.PACKING_WARMUP_STEPS
    cadence: int = constants.PACKING_CADENCE

    def __post_init__(self):
        violations = []
        for name in ("experts_per_device", "max_experts_per_device"):
            value = getattr(self, name)
            if value < 1 or value & (value - 1):
                violations.append(Violation(name, "must be a power of two"))
        if self.experts_per_device > self.max_experts_per_device:
            violations.append(
                Violation(
                    "experts_per_device", "exceeds max_experts_per_device"
                )
            )
        if self.cadence < 1:
            violations.append(Violation("cadence", "must be >= 1"))
        if self.warmup_steps < 0:
            violations.append(Violation("warmup_steps", "must be >= 0"))
        if violations:
            raise InvalidSpec(violations)

    def due(self, step: int) -> bool:
        if step < self.warmup_steps:
            return False
        return (step - self.warmup_steps) % self.cadence == 0


def packing_limit(
    model: ModelSpec, cluster: ClusterSpec, cap: int | None = None
) -> int:
    """Largest power of two every smaller packing degree can also reach."""
    group = model.experts_per_layer
    if group > cluster.num_devices or cluster.num_devices % group:
        raise InvalidSpec(
            [
                Violation(
                    "model.experts_per_layer",
                    "one expert per device must tile the cluster",
                )
            ]
        )

    ceiling = model.experts_per_layer if cap is None else cap
    limit = 1
    while limit * 2 <= ceiling:
        candidate = limit * 2
        if model.experts_per_layer % candidate:
            break
        group = model.experts_per_layer // candidate
        if group > cluster.num_devices or cluster.num_devices % group:
            break
        limit = candidate

    return limit


def adjust_packing(state: PackingState, measure: PackingMeasure) -> int:
    """Double experts per device while the FFN micro-task stays shorter
    than the AllToAll micro-op."""
    experts_per_device = state.experts_per_device
    while experts_per_device * 2 <= state.max_experts_per_device:
        sample = measure(experts_per_device)
        if sample is None or sample.ffn_micro_time > sample.a2a_micro_time:
            break
        experts_per_device *= 2
    return experts_per_device


def measure_packing(report: SimReport) -> PackingSample | None:
    ffn = [
        task.end - task.start
        for task in report.task_records
        if task.phase == Phase.BACKWARD
        and task.tag == TaskTag.FFN
        and task.index is not None
    ]
    a2a = [
        op.end - op.start
        for op in report.op_records
        if op.phase == Phase.BACKWARD and op.role == OpRole.DISPATCH
    ]
    if not ffn or not a2a:
        return None

    return PackingSample(
        ffn_micro_time=float(np.median(ffn)),
        a2a_micro_time=float(np.median(a2a)),
    )
