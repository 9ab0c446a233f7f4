from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import replace
from typing import NamedTuple

from moe_sched.core import CollectiveOp, partition, split_op
from moe_sched.engine import ComputeTask

from .step import MoeLayerBackward


class LayerGraph(NamedTuple):
    tasks: tuple[ComputeTask, ...]
    ops: tuple[CollectiveOp, ...]


def rewire[T: (ComputeTask, CollectiveOp)](
    item: T, replacements: Mapping[str, Sequence[str]]
) -> T:
    if replacements.keys().isdisjoint(item.dependencies):
        return item

    dependencies: set[str] = set()
    for dependency in item.dependencies:
        dependencies.update(replacements.get(dependency, (dependency,)))
    return replace(item, dependencies=frozenset(dependencies))


def partition_moe_layer(
    layer: MoeLayerBackward, partition_bytes: int
) -> LayerGraph:
    """Micro-op both AllToAlls; the expert FFN still waits for all of them."""
    dispatch = partition(layer.dispatch, partition_bytes)
    restore = split_op(layer.restore, len(dispatch))
    replacements = {
        layer.dispatch.op_id: [op.op_id for op in dispatch],
        layer.restore.op_id: [op.op_id for op in restore],
    }
    return LayerGraph(
        tasks=tuple(rewire(task, replacements) for task in layer.tasks),
        ops=(*dispatch, *restore),
    )


def pipeline_moe_layer(
    layer: MoeLayerBackward, partition_bytes: int
) -> LayerGraph:
    dispatch = partition(layer.dispatch, partition_bytes)
    count = len(dispatch)
    total = layer.dispatch.total_bytes

    experts = tuple(
        replace(
            layer.expert,
            task_id=f"{layer.expert.task_id}#{index}",
            duration=layer.expert.duration
            * (op.total_bytes / total if total else 1 / count),
            dependencies=frozenset((op.op_id,)),
            index=index,
        )
        for index, op in enumerate(dispatch)
    )
    restore = tuple(
        replace(op, dependencies=frozenset((expert.task_id,)))
        for op, expert in zip(
            split_op(layer.restore, count), experts, strict=True
        )
    )
    gate = replace(
        layer.gate, dependencies=frozenset(op.op_id for op in restore)
    )

    return LayerGraph(
        tasks=(layer.combine, *experts, gate, *layer.attention),
        ops=(*dispatch, *restore),
    )
