from __future__ import annotations

import enum
from collections.abc import Sequence
from dataclasses import dataclass, field

from moe_sched import constants
from moe_sched.core import CollectiveOp, OpKind
from moe_sched.engine import Dispatcher, SchedulerView, dispatch_all
from moe_sched.errors import InvalidSpec, Violation

from .step import StepLayout


class PolicyName(enum.StrEnum):
    BASELINE = "Baseline"
    NAIVE_PRIORITY = "NaivePriority"
    PRIORITY_ONLY = "PriorityOnly"
    PRIORITY_PARTITION = "PriorityPartition"
    LINA = "PriorityPartitionPipeline"
    FIXED_DEFERRAL = "FixedDeferral"


POLICY_ALIASES = {"Lina": PolicyName.LINA}


def parse_policy(name: str) -> PolicyName:
    if name in POLICY_ALIASES:
        return POLICY_ALIASES[name]

    try:
        return PolicyName(name)
    except ValueError:
        known = ", ".join([*PolicyName, *POLICY_ALIASES])
        raise InvalidSpec(
            [Violation("policy", f"unknown {name}, expected one of {known}")]
        ) from None


@dataclass(frozen=True, kw_only=True)
class SchedulerPolicy:
    name: PolicyName
    partition_bytes: int = constants.DEFAULT_PARTITION_BYTES
    bucket_bytes: int = constants.DEFAULT_BUCKET_BYTES
    max_hold: float | None = None

    def __post_init__(self):
        violations = []
        if self.partition_bytes <= 0:
            violations.append(Violation("partition_bytes", "must be > 0"))
        if self.bucket_bytes <= 0:
            violations.append(Violation("bucket_bytes", "must be > 0"))
        if self.max_hold is not None and self.max_hold < 0:
            violations.append(Violation("max_hold", "must be >= 0"))
        if violations:
            raise InvalidSpec(violations)

    @property
    def layout(self) -> StepLayout:
        match self.name:
            case PolicyName.PRIORITY_ONLY:
                return StepLayout(per_gradient=True)
            case PolicyName.PRIORITY_PARTITION:
                return StepLayout(
                    per_gradient=True, partition_bytes=self.partition_bytes
                )
            case PolicyName.LINA:
                return StepLayout(
                    per_gradient=True,
                    partition_bytes=self.partition_bytes,
                    pipeline=True,
                )
            case _:
                return StepLayout(bucket_bytes=self.bucket_bytes)

    def dispatcher(self) -> Dispatcher:
        """A fresh dispatcher; one per engine run."""
        match self.name:
            case PolicyName.BASELINE:
                return dispatch_all
            case PolicyName.NAIVE_PRIORITY:
                return naive_priority
            case PolicyName.FIXED_DEFERRAL:
                return FixedDeferral(max_hold=self.max_hold)
            case _:
                return priority_partition


def _is_all_to_all(op: CollectiveOp) -> bool:
    return op.kind == OpKind.ALL_TO_ALL


def _exclusive(view: SchedulerView, honour_lookahead: bool) -> Sequence[str]:
    if view.in_flight:
        return []

    for op in view.queued:
        if _is_all_to_all(op):
            return [op.op_id]

    if not view.queued or (honour_lookahead and view.lookahead_active):
        return []
    return [view.queued[0].op_id]


def naive_priority(view: SchedulerView) -> Sequence[str]:
    """One op on the network at a time, AllToAll first."""
    return _exclusive(view, honour_lookahead=False)


def priority_partition(view: SchedulerView) -> Sequence[str]:
    """AllToAll (micro-)ops win at every op boundary.

    An AllToAll starts once nothing holds the network. An AllReduce starts
    only on an idle network with no AllToAll waiting and no combine
    backward running. Whole tensors or micro-ops depend on the layout.
    """
    return _exclusive(view, honour_lookahead=True)


@dataclass
class FixedDeferral:
    """Holds AllReduces until a pair of AllToAlls has completed.

    With `max_hold` set, an op held that long is released regardless; the
    engine wakes the dispatcher at the deadline.
    """

    max_hold: float | None = None
    released_count: int = -1
    released_at: float = -1.0
    held_since: dict[str, float] = field(default_factory=dict)

    def __call__(self, view: SchedulerView) -> Sequence[str]:
        selected = [op.op_id for op in view.queued if _is_all_to_all(op)]
        held = [op.op_id for op in view.queued if not _is_all_to_all(op)]

        count = view.completed_alltoalls
        transition = count % 2 == 0 and count != self.released_count
        if transition:
            self.released_count = count
            self.released_at = view.now

        if (
            transition
            or view.now == self.released_at
            or view.remaining_alltoalls == 0
        ):
            return selected + held

        for op_id in held:
            since = self.held_since.setdefault(op_id, view.now)
            if self.max_hold is not None and view.now >= since + self.max_hold:
                selected.append(op_id)
        return selected

    def next_wake(self, view: SchedulerView) -> float | None:
        if self.max_hold is None:
            return None
        return min(
            (
                self.held_since[op.op_id] + self.max_hold
                for op in view.queued
                if op.op_id in self.held_since
            ),
            default=None,
        )


def schedule(
    policy: SchedulerPolicy, views: Sequence[SchedulerView]
) -> list[list[str]]:
    """Replay a sequence of engine views through one dispatcher instance."""
    dispatcher = policy.dispatcher()
    return [list(dispatcher(view)) for view in views]
