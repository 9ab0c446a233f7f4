from __future__ import annotations

import logging
from dataclasses import replace
from typing import NamedTuple

from moe_sched import engine
from moe_sched.core import Scenario, SimReport

from .lowering import build_training_step
from .metrics import with_training_metrics
from .packing import (
    PackingMeasure,
    PackingSample,
    PackingState,
    adjust_packing,
    measure_packing,
)
from .policies import PolicyName, SchedulerPolicy

logger = logging.getLogger("moe_sched.trainsched")


class StepOutcome(NamedTuple):
    step: int
    experts_per_device: int
    step_time: float
    sample: PackingSample | None = None


class TrainingRun(NamedTuple):
    policy: SchedulerPolicy
    report: SimReport
    steps: tuple[StepOutcome, ...]

    @property
    def mean_step_time(self) -> float:
        if not self.steps:
            return 0.0
        return sum(step.step_time for step in self.steps) / len(self.steps)

    @property
    def packing_trajectory(self) -> tuple[int, ...]:
        return tuple(step.experts_per_device for step in self.steps)


def _measured_at(
    samples: dict[int, PackingSample], degree: int
) -> PackingMeasure:
    # Only the packing degree that actually ran has a measurement.
    def measure(candidate: int) -> PackingSample | None:
        return samples.get(candidate) if candidate == degree else None

    return measure


def simulate_step(
    scenario: Scenario,
    tokens_per_device: int,
    policy: SchedulerPolicy,
    *,
    experts_per_device: int = 1,
    previous_experts_per_device: int | None = None,
    include_forward: bool = True,
) -> SimReport:
    workload = build_training_step(
        scenario,
        tokens_per_device,
        policy.layout,
        experts_per_device=experts_per_device,
        previous_experts_per_device=previous_experts_per_device,
        include_forward=include_forward,
    )
    report = engine.run(workload, policy.dispatcher())
    return with_training_metrics(report)


def run_training(
    scenario: Scenario,
    tokens_per_device: int,
    policy: SchedulerPolicy,
    *,
    steps: int = 1,
    packing: PackingState | None = None,
) -> TrainingRun:
    """Simulate consecutive steps, re-packing experts between them.

    Packing only applies to the pipelined policy; every other policy keeps
    one expert per device.
    """
    if policy.name != PolicyName.LINA:
        packing = None

    experts_per_device = packing.experts_per_device if packing else 1
    previous: int | None = None
    samples: dict[int, PackingSample] = {}
    reports: dict[tuple[int, int | None], SimReport] = {}
    outcomes: list[StepOutcome] = []
    report = SimReport()

    for step in range(max(1, steps)):
        changed = None if previous in (None, experts_per_device) else previous
        key = (experts_per_device, changed)
        if key not in reports:
            reports[key] = simulate_step(
                scenario,
                tokens_per_device,
                policy,
                experts_per_device=experts_per_device,
                previous_experts_per_device=changed,
            )
        report = reports[key]

        sample = measure_packing(report)
        if sample is not None:
            samples[experts_per_device] = sample
        outcomes.append(
            StepOutcome(
                step=step,
                experts_per_device=experts_per_device,
                step_time=report.step_time,
                sample=sample,
            )
        )

        previous = experts_per_device
        if packing is None or not packing.due(step):
            continue

        current = experts_per_device
        chosen = adjust_packing(
            replace(packing, experts_per_device=current),
            _measured_at(samples, current),
        )
        if chosen != current:
            logger.info(
                f"{policy.name} step {step}: packing {current} -> {chosen} "
                "experts per device"
            )
        experts_per_device = chosen

    return TrainingRun(policy=policy, report=report, steps=tuple(outcomes))
