from __future__ import annotations

from collections.abc import Sequence
from typing import NamedTuple

import numpy as np

from moe_sched.core import (
    ClusterSpec,
    CollectiveOp,
    OpKind,
    OpRole,
    Phase,
    Priority,
    Scenario,
)
from moe_sched.engine import ComputeTask, TaskTag, Workload
from moe_sched.errors import InvalidSpec, PlanMissing, Violation

from .allocate import AllocationPlan, RoutedTokens

# Per-expert token count in a popularity report.
REPORT_BYTES_PER_EXPERT = 8
SCHEDULER_DEVICE = 0


class LayerSchedule(NamedTuple):
    plan: AllocationPlan
    routed: RoutedTokens
    blocking: float = 0.0
    residual: float = 0.0
    reports: bool = False


def expert_compute_times(
    scenario: Scenario, schedule: LayerSchedule
) -> np.ndarray:
    """Sequential expert compute per device, swaps included."""
    tokens = schedule.routed.device_expert_tokens.sum(axis=1)
    swaps = np.array(
        [
            schedule.plan.swapped_experts(device)
            for device in range(schedule.plan.num_devices)
        ]
    )
    return (
        tokens * scenario.cost.ffn_cost_per_token
        + swaps * scenario.cost.expert_swap_cost
    )


def _gang(
    task_id: str,
    cluster: ClusterSpec,
    duration: float,
    tag: TaskTag,
    after: frozenset[str],
    layer: int,
) -> ComputeTask:
    return ComputeTask(
        task_id=task_id,
        devices=tuple(range(cluster.num_devices)),
        duration=duration,
        dependencies=after,
        tag=tag,
        layer=layer,
        phase=Phase.INFERENCE,
    )


def _token_exchange(
    op_id: str,
    pair_bytes: np.ndarray,
    role: OpRole,
    after: frozenset[str],
    layer: int,
) -> CollectiveOp:
    return CollectiveOp(
        op_id=op_id,
        kind=OpKind.ALL_TO_ALL,
        priority=Priority.HIGH,
        per_pair_bytes=pair_bytes,
        dependencies=after,
        role=role,
        layer=layer,
        phase=Phase.INFERENCE,
    )


def _popularity_reports(
    prefix: str,
    cluster: ClusterSpec,
    num_experts: int,
    after: frozenset[str],
    layer: int,
) -> list[CollectiveOp]:
    return [
        CollectiveOp(
            op_id=f"{prefix}.report{device}",
            kind=OpKind.POINT_TO_POINT,
            tensor_bytes=num_experts * REPORT_BYTES_PER_EXPERT,
            src=device,
            dst=SCHEDULER_DEVICE,
            dependencies=after,
            role=OpRole.CONTROL,
            layer=layer,
            phase=Phase.INFERENCE,
        )
        for device in range(cluster.num_devices)
        if device != SCHEDULER_DEVICE
    ]


def build_inference_step(
    scenario: Scenario,
    schedules: Sequence[LayerSchedule | None],
    tokens_per_device: int,
) -> Workload:
    """Lower one inference batch into engine tasks and collectives.

    Every layer runs attention and gate, any phase-one residual and the
    phase-two blocking window, the token dispatch, per-device sequential
    expert compute, the token return and the combine.
    """
    cluster, model, cost = scenario
    if len(schedules) != model.num_layers:
        raise InvalidSpec(
            [
                Violation(
                    "schedules",
                    f"{len(schedules)} layers scheduled, model has "
                    f"{model.num_layers}",
                )
            ]
        )

    tasks: list[ComputeTask] = []
    ops: list[CollectiveOp] = []
    previous: frozenset[str] = frozenset()
    for layer, schedule in enumerate(schedules):
        if schedule is None:
            raise PlanMissing(f"layer {layer} has no allocation plan")

        prefix = f"inf.L{layer}"
        attention = _gang(
            f"{prefix}.attention",
            cluster,
            tokens_per_device * cost.attention_cost_per_token,
            TaskTag.ATTENTION,
            previous,
            layer,
        )
        gate = _gang(
            f"{prefix}.gate",
            cluster,
            tokens_per_device * cost.gate_cost_per_token,
            TaskTag.GATE,
            frozenset((attention.task_id,)),
            layer,
        )
        tasks.extend((attention, gate))
        ready = frozenset((gate.task_id,))

        if schedule.residual > 0:
            estimate = _gang(
                f"{prefix}.estimate",
                cluster,
                schedule.residual,
                TaskTag.ESTIMATE,
                ready,
                layer,
            )
            tasks.append(estimate)
            ready = frozenset((estimate.task_id,))

        if schedule.blocking > 0:
            reports = (
                _popularity_reports(
                    prefix, cluster, model.experts_per_layer, ready, layer
                )
                if schedule.reports
                else []
            )
            phase_two = _gang(
                f"{prefix}.phase_two",
                cluster,
                schedule.blocking,
                TaskTag.PHASE_TWO,
                ready,
                layer,
            )
            tasks.append(phase_two)
            ops.extend(reports)
            ready = frozenset(
                (phase_two.task_id, *(report.op_id for report in reports))
            )

        pair_bytes = (
            schedule.routed.pair_tokens * model.token_embedding_bytes
        ).astype(np.int64)
        dispatch = _token_exchange(
            f"{prefix}.dispatch", pair_bytes, OpRole.DISPATCH, ready, layer
        )
        ops.append(dispatch)

        experts = [
            ComputeTask(
                task_id=f"{prefix}.ffn.d{device}",
                devices=(device,),
                duration=float(duration),
                dependencies=frozenset((dispatch.op_id,)),
                tag=TaskTag.FFN,
                layer=layer,
                phase=Phase.INFERENCE,
                index=device,
            )
            for device, duration in enumerate(
                expert_compute_times(scenario, schedule).tolist()
            )
        ]
        tasks.extend(experts)

        restore = _token_exchange(
            f"{prefix}.restore",
            pair_bytes.T,
            OpRole.COMBINE,
            frozenset(task.task_id for task in experts),
            layer,
        )
        ops.append(restore)

        combine = _gang(
            f"{prefix}.combine",
            cluster,
            tokens_per_device * cost.combine_cost_per_token,
            TaskTag.COMBINE,
            frozenset((restore.op_id,)),
            layer,
        )
        tasks.append(combine)
        previous = frozenset((combine.task_id,))

    return Workload(cluster=cluster, tasks=tuple(tasks), ops=tuple(ops))
