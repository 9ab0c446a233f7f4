from __future__ import annotations

from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from moe_sched import constants
from moe_sched.core import (
    ClusterSpec,
    CollectiveOp,
    CostModel,
    ModelSpec,
    OpKind,
    OpRole,
    Phase,
    Priority,
    partition,
)
from moe_sched.engine import ComputeTask, TaskTag
from moe_sched.errors import InvalidSpec, Violation


class GradientTensor(NamedTuple):
    name: str
    size: int
    layer: int
    emitted_by: str


@dataclass(frozen=True)
class MoeLayerBackward:
    layer: int
    combine: ComputeTask
    dispatch: CollectiveOp
    expert: ComputeTask
    restore: CollectiveOp
    gate: ComputeTask
    attention: tuple[ComputeTask, ...]
    gradients: tuple[GradientTensor, ...]

    @property
    def tasks(self) -> tuple[ComputeTask, ...]:
        return (self.combine, self.expert, self.gate, *self.attention)

    @property
    def ops(self) -> tuple[CollectiveOp, ...]:
        return (self.dispatch, self.restore)


@dataclass(frozen=True)
class BackwardWorkload:
    cluster: ClusterSpec
    layers: tuple[MoeLayerBackward, ...]

    @property
    def gradients(self) -> tuple[GradientTensor, ...]:
        return tuple(
            gradient for layer in self.layers for gradient in layer.gradients
        )

    @property
    def last_task_id(self) -> str | None:
        if not self.layers:
            return None
        return self.layers[-1].attention[-1].task_id


@dataclass(frozen=True)
class ForwardPass:
    tasks: tuple[ComputeTask, ...] = ()
    ops: tuple[CollectiveOp, ...] = ()

    @property
    def last_task_id(self) -> str | None:
        if not self.tasks:
            return None
        return self.tasks[-1].task_id


@dataclass(frozen=True, kw_only=True)
class StepLayout:
    """How one policy shapes a step's communication."""

    partition_bytes: int | None = None
    pipeline: bool = False
    per_gradient: bool = False
    bucket_bytes: int = constants.DEFAULT_BUCKET_BYTES


def expert_group_size(
    model: ModelSpec, cluster: ClusterSpec, experts_per_device: int
) -> int:
    """Devices per expert-parallel group when each hosts that many experts."""
    violations = []
    if experts_per_device < 1 or experts_per_device & (experts_per_device - 1):
        violations.append(
            Violation("experts_per_device", "must be a power of two")
        )
    elif model.experts_per_layer % experts_per_device:
        violations.append(
            Violation("experts_per_device", "must divide experts_per_layer")
        )
    else:
        group = model.experts_per_layer // experts_per_device
        if group > cluster.num_devices or cluster.num_devices % group:
            violations.append(
                Violation(
                    "experts_per_device",
                    f"group of {group} devices does not tile "
                    f"{cluster.num_devices} devices",
                )
            )

    if violations:
        raise InvalidSpec(violations)

    return model.experts_per_layer // experts_per_device


def hosted_experts(
    device: int, model: ModelSpec, cluster: ClusterSpec, experts_per_device: int
) -> range:
    group = expert_group_size(model, cluster, experts_per_device)
    first = (device % group) * experts_per_device
    return range(first, first + experts_per_device)


def balanced_pair_bytes(
    model: ModelSpec,
    cluster: ClusterSpec,
    tokens_per_device: int,
    experts_per_device: int = 1,
) -> np.ndarray:
    group = expert_group_size(model, cluster, experts_per_device)
    per_pair = (
        tokens_per_device * model.gating_top_k * model.token_embedding_bytes
    ) // group

    groups = np.arange(cluster.num_devices) // group
    return np.where(groups[:, None] == groups[None, :], per_pair, 0).astype(
        np.int64
    )


def parameter_exchange_bytes(
    model: ModelSpec, cluster: ClusterSpec, previous: int, current: int
) -> np.ndarray:
    """Expert weights each device fetches when the packing degree changes."""
    old_group = expert_group_size(model, cluster, previous)
    matrix = np.zeros((cluster.num_devices, cluster.num_devices), np.int64)
    for device in range(cluster.num_devices):
        old_base = (device // old_group) * old_group
        for expert in hosted_experts(device, model, cluster, current):
            source = old_base + expert // previous
            if source != device:
                matrix[source, device] += model.expert_param_bytes
    return matrix


def _all_devices(cluster: ClusterSpec) -> tuple[int, ...]:
    return tuple(range(cluster.num_devices))


def _gang_task(
    task_id: str,
    cluster: ClusterSpec,
    duration: float,
    tag: TaskTag,
    dependencies: frozenset[str],
    layer: int,
    phase: Phase,
    lookahead: bool = False,
) -> ComputeTask:
    return ComputeTask(
        task_id=task_id,
        devices=_all_devices(cluster),
        duration=duration,
        dependencies=dependencies,
        tag=tag,
        layer=layer,
        phase=phase,
        lookahead=lookahead,
    )


def _all_to_all(
    op_id: str,
    pair_bytes: np.ndarray,
    role: OpRole,
    dependencies: frozenset[str],
    layer: int,
    phase: Phase,
) -> CollectiveOp:
    return CollectiveOp(
        op_id=op_id,
        kind=OpKind.ALL_TO_ALL,
        priority=Priority.HIGH,
        per_pair_bytes=pair_bytes,
        dependencies=dependencies,
        role=role,
        layer=layer,
        phase=phase,
    )


def build_forward(
    model: ModelSpec,
    cluster: ClusterSpec,
    cost: CostModel,
    tokens_per_device: int,
    *,
    experts_per_device: int = 1,
    after: Iterable[str] = (),
) -> ForwardPass:
    pair_bytes = balanced_pair_bytes(
        model, cluster, tokens_per_device, experts_per_device
    )
    routed = tokens_per_device * model.gating_top_k
    phase = Phase.FORWARD

    tasks: list[ComputeTask] = []
    ops: list[CollectiveOp] = []
    previous = frozenset(after)
    for layer in range(model.num_layers):
        prefix = f"fwd.L{layer}"

        attention = _gang_task(
            f"{prefix}.attention",
            cluster,
            tokens_per_device * cost.attention_cost_per_token,
            TaskTag.ATTENTION,
            previous,
            layer,
            phase,
        )
        gate = _gang_task(
            f"{prefix}.gate",
            cluster,
            tokens_per_device * cost.gate_cost_per_token,
            TaskTag.GATE,
            frozenset((attention.task_id,)),
            layer,
            phase,
        )
        dispatch = _all_to_all(
            f"{prefix}.dispatch",
            pair_bytes,
            OpRole.DISPATCH,
            frozenset((gate.task_id,)),
            layer,
            phase,
        )
        expert = _gang_task(
            f"{prefix}.ffn",
            cluster,
            routed * cost.ffn_cost_per_token,
            TaskTag.FFN,
            frozenset((dispatch.op_id,)),
            layer,
            phase,
        )
        restore = _all_to_all(
            f"{prefix}.restore",
            pair_bytes,
            OpRole.COMBINE,
            frozenset((expert.task_id,)),
            layer,
            phase,
        )
        combine = _gang_task(
            f"{prefix}.combine",
            cluster,
            tokens_per_device * cost.combine_cost_per_token,
            TaskTag.COMBINE,
            frozenset((restore.op_id,)),
            layer,
            phase,
        )

        tasks.extend((attention, gate, expert, combine))
        ops.extend((dispatch, restore))
        previous = frozenset((combine.task_id,))

    return ForwardPass(tasks=tuple(tasks), ops=tuple(ops))


def build_backward(
    model: ModelSpec,
    cluster: ClusterSpec,
    cost: CostModel,
    tokens_per_device: int,
    *,
    experts_per_device: int = 1,
    after: Iterable[str] = (),
) -> BackwardWorkload:
    pair_bytes = balanced_pair_bytes(
        model, cluster, tokens_per_device, experts_per_device
    )
    factor = cost.backward_factor
    routed = tokens_per_device * model.gating_top_k
    phase = Phase.BACKWARD

    attention_total = tokens_per_device * cost.attention_cost_per_token * factor
    gradient_total = sum(model.nonexpert_grad_bytes)

    layers: list[MoeLayerBackward] = []
    previous = frozenset(after)
    for layer in reversed(range(model.num_layers)):
        prefix = f"bwd.L{layer}"

        combine = _gang_task(
            f"{prefix}.combine",
            cluster,
            tokens_per_device * cost.combine_cost_per_token * factor,
            TaskTag.COMBINE,
            previous,
            layer,
            phase,
            lookahead=True,
        )
        dispatch = _all_to_all(
            f"{prefix}.dispatch",
            pair_bytes,
            OpRole.DISPATCH,
            frozenset((combine.task_id,)),
            layer,
            phase,
        )
        expert = _gang_task(
            f"{prefix}.ffn",
            cluster,
            routed * cost.ffn_cost_per_token * factor,
            TaskTag.FFN,
            frozenset((dispatch.op_id,)),
            layer,
            phase,
        )
        restore = _all_to_all(
            f"{prefix}.restore",
            pair_bytes,
            OpRole.COMBINE,
            frozenset((expert.task_id,)),
            layer,
            phase,
        )
        gate = _gang_task(
            f"{prefix}.gate",
            cluster,
            tokens_per_device * cost.gate_cost_per_token * factor,
            TaskTag.GATE,
            frozenset((restore.op_id,)),
            layer,
            phase,
        )

        attention: list[ComputeTask] = []
        gradients: list[GradientTensor] = []
        dependencies = frozenset((gate.task_id,))
        if not model.nonexpert_grad_bytes:
            attention.append(
                _gang_task(
                    f"{prefix}.attention",
                    cluster,
                    attention_total,
                    TaskTag.ATTENTION,
                    dependencies,
                    layer,
                    phase,
                )
            )

        # One attention piece per gradient, sized by its share of the bytes.
        for index, size in enumerate(model.nonexpert_grad_bytes):
            piece = _gang_task(
                f"{prefix}.attention.g{index}",
                cluster,
                attention_total * size / gradient_total,
                TaskTag.ATTENTION,
                dependencies,
                layer,
                phase,
            )
            attention.append(piece)
            gradients.append(
                GradientTensor(
                    name=f"L{layer}.g{index}",
                    size=size,
                    layer=layer,
                    emitted_by=piece.task_id,
                )
            )
            dependencies = frozenset((piece.task_id,))

        layers.append(
            MoeLayerBackward(
                layer=layer,
                combine=combine,
                dispatch=dispatch,
                expert=expert,
                restore=restore,
                gate=gate,
                attention=tuple(attention),
                gradients=tuple(gradients),
            )
        )
        previous = frozenset((attention[-1].task_id,))

    return BackwardWorkload(cluster=cluster, layers=tuple(layers))


def gradient_buckets(
    gradients: Sequence[GradientTensor], bucket_bytes: int
) -> list[tuple[GradientTensor, ...]]:
    """Fuse consecutive gradients of one layer up to `bucket_bytes`."""
    buckets: list[tuple[GradientTensor, ...]] = []
    current: list[GradientTensor] = []
    for gradient in gradients:
        filled = sum(item.size for item in current) + gradient.size
        if current and (
            filled > bucket_bytes or current[-1].layer != gradient.layer
        ):
            buckets.append(tuple(current))
            current = []
        current.append(gradient)

    if current:
        buckets.append(tuple(current))

    return buckets


def gradient_allreduces(
    backward: BackwardWorkload, layout: StepLayout
) -> list[CollectiveOp]:
    if layout.per_gradient:
        groups = [(gradient,) for gradient in backward.gradients]
    else:
        groups = gradient_buckets(backward.gradients, layout.bucket_bytes)

    ops: list[CollectiveOp] = []
    for group in groups:
        name = group[0].name
        if len(group) > 1:
            name = f"{name}-{group[-1].name.rsplit('.', 1)[-1]}"

        op = CollectiveOp(
            op_id=f"ar.{name}",
            kind=OpKind.ALL_REDUCE,
            priority=Priority.LOW,
            tensor_bytes=sum(gradient.size for gradient in group),
            dependencies=frozenset((group[-1].emitted_by,)),
            role=OpRole.GRADIENT,
            layer=group[-1].layer,
            phase=Phase.BACKWARD,
        )
        if layout.partition_bytes:
            ops.extend(partition(op, layout.partition_bytes))
        else:
            ops.append(op)

    return ops
