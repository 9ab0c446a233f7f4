from __future__ import annotations

from collections import defaultdict
from collections.abc import Iterable, Sequence
from typing import NamedTuple

import numpy as np

from moe_sched import constants
from moe_sched.core import BatchAssignment, CostModel
from moe_sched.errors import InvalidSpec, Violation

from .allocate import AllocationPlan, allocate
from .estimate import ranked_experts


class PhaseTwoOutcome(NamedTuple):
    layer: int
    estimated_top: frozenset[int]
    actual_top: frozenset[int]
    plan_used: AllocationPlan
    overhead_charged: float

    @property
    def matched(self) -> bool:
        return self.estimated_top == self.actual_top


class AccuracySummary(NamedTuple):
    estimation_accuracy: float
    finetune_rate: float
    per_layer: dict[int, float]


def top_set(values: Sequence[float] | np.ndarray, size: int) -> frozenset[int]:
    """The `size` largest entries; ties go to the lower expert id."""
    return frozenset(ranked_experts(np.asarray(values), size).tolist())


def actual_popularity(
    assignment: BatchAssignment, num_experts: int
) -> np.ndarray:
    if not assignment.num_tokens:
        return np.zeros(num_experts)
    return assignment.expert_counts(num_experts) / assignment.num_tokens


def two_phase_step(
    plan: AllocationPlan,
    actual: BatchAssignment,
    k: int,
    cost: CostModel,
    *,
    layer: int = 0,
    max_packed: int = constants.DEFAULT_MAX_PACKED,
    seed: int | Sequence[int] = 0,
) -> PhaseTwoOutcome:
    """Check the phase-one plan against the gated batch.

    Matching top-2k sets resume the model with the estimated plan; anything
    else re-plans from the actual selections at the full scheduling cost.
    """
    if plan.popularity is None:
        raise InvalidSpec(
            [Violation("plan", "phase-one plan carries no popularity")]
        )
    if k <= 0:
        raise InvalidSpec([Violation("k", "must be > 0")])

    size = min(2 * k, plan.num_experts)
    estimated_top = top_set(plan.popularity, size)
    popularity = actual_popularity(actual, plan.num_experts)
    actual_top = top_set(popularity, size)

    if estimated_top == actual_top:
        return PhaseTwoOutcome(
            layer=layer,
            estimated_top=estimated_top,
            actual_top=actual_top,
            plan_used=plan,
            overhead_charged=cost.resume_signal_cost,
        )

    finetuned = allocate(
        popularity, plan.num_devices, max_packed=max_packed, seed=seed
    )
    return PhaseTwoOutcome(
        layer=layer,
        estimated_top=estimated_top,
        actual_top=actual_top,
        plan_used=finetuned,
        overhead_charged=cost.sched_phase_cost,
    )


def accuracy(outcomes: Iterable[PhaseTwoOutcome]) -> AccuracySummary:
    """Share of (batch, layer) pairs whose estimated top-2k set matched."""
    matches: defaultdict[int, list[bool]] = defaultdict(list)
    for outcome in outcomes:
        matches[outcome.layer].append(outcome.matched)

    flat = [matched for layer in matches.values() for matched in layer]
    if not flat:
        return AccuracySummary(0.0, 0.0, {})

    rate = sum(flat) / len(flat)
    return AccuracySummary(
        estimation_accuracy=rate,
        finetune_rate=1.0 - rate,
        per_layer={
            layer: sum(values) / len(values)
            for layer, values in sorted(matches.items())
        },
    )
