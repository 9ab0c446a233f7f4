from __future__ import annotations

from moe_sched.core import CollectiveOp, OpKind, OpRole, Priority, Scenario
from moe_sched.engine import ComputeTask, TaskTag, Workload

from .pipeline import partition_moe_layer, pipeline_moe_layer
from .step import (
    BackwardWorkload,
    StepLayout,
    build_backward,
    build_forward,
    gradient_allreduces,
    parameter_exchange_bytes,
)


def lower_backward(
    backward: BackwardWorkload, layout: StepLayout
) -> tuple[list[ComputeTask], list[CollectiveOp]]:
    tasks: list[ComputeTask] = []
    ops: list[CollectiveOp] = []
    for layer in backward.layers:
        if layout.partition_bytes and layout.pipeline:
            graph = pipeline_moe_layer(layer, layout.partition_bytes)
        elif layout.partition_bytes:
            graph = partition_moe_layer(layer, layout.partition_bytes)
        else:
            tasks.extend(layer.tasks)
            ops.extend(layer.ops)
            continue

        tasks.extend(graph.tasks)
        ops.extend(graph.ops)

    ops.extend(gradient_allreduces(backward, layout))
    return tasks, ops


def build_training_step(
    scenario: Scenario,
    tokens_per_device: int,
    layout: StepLayout,
    *,
    experts_per_device: int = 1,
    previous_experts_per_device: int | None = None,
    include_forward: bool = True,
) -> Workload:
    cluster, model, cost = scenario

    tasks: list[ComputeTask] = []
    ops: list[CollectiveOp] = []
    after: frozenset[str] = frozenset()

    if (
        previous_experts_per_device is not None
        and previous_experts_per_device != experts_per_device
    ):
        exchange = CollectiveOp(
            op_id="exchange",
            kind=OpKind.ALL_TO_ALL,
            priority=Priority.HIGH,
            per_pair_bytes=parameter_exchange_bytes(
                model,
                cluster,
                previous=previous_experts_per_device,
                current=experts_per_device,
            ),
            role=OpRole.EXCHANGE,
        )
        ops.append(exchange)
        after = frozenset((exchange.op_id,))

    if experts_per_device > 1 and cost.expert_swap_cost > 0:
        swap = ComputeTask(
            task_id="swap",
            devices=tuple(range(cluster.num_devices)),
            duration=cost.expert_swap_cost,
            dependencies=after,
            tag=TaskTag.SWAP,
        )
        tasks.append(swap)
        after = frozenset((swap.task_id,))

    if include_forward:
        forward = build_forward(
            model,
            cluster,
            cost,
            tokens_per_device,
            experts_per_device=experts_per_device,
            after=after,
        )
        tasks.extend(forward.tasks)
        ops.extend(forward.ops)
        if forward.last_task_id:
            after = frozenset((forward.last_task_id,))

    backward = build_backward(
        model,
        cluster,
        cost,
        tokens_per_device,
        experts_per_device=experts_per_device,
        after=after,
    )
    backward_tasks, backward_ops = lower_backward(backward, layout)
    tasks.extend(backward_tasks)
    ops.extend(backward_ops)

    return Workload(cluster=cluster, tasks=tuple(tasks), ops=tuple(ops))
