from __future__ import annotations

import enum
import math
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any, Literal, NamedTuple, get_args

import numpy as np

from . import constants
from .errors import InvalidSpec, Violation

AllReduceAlgorithm = Literal["ring", "tree"]
AllReduceAlgorithms = get_args(AllReduceAlgorithm)


class OpKind(enum.StrEnum):
    ALL_TO_ALL = "AllToAll"
    ALL_REDUCE = "AllReduce"
    POINT_TO_POINT = "PointToPoint"


class Priority(enum.StrEnum):
    HIGH = "High"
    LOW = "Low"


class Phase(enum.StrEnum):
    FORWARD = "forward"
    BACKWARD = "backward"
    INFERENCE = "inference"


class OpRole(enum.StrEnum):
    DISPATCH = "dispatch"
    COMBINE = "combine"
    GRADIENT = "gradient"
    EXCHANGE = "exchange"
    CONTROL = "control"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True, kw_only=True)
class ClusterSpec:
    num_devices: int
    devices_per_node: int
    inter_node_bw: float
    intra_node_bw: float
    launch_latency: float = constants.DEFAULT_LAUNCH_LATENCY
    allreduce_algorithm: AllReduceAlgorithm = "ring"

    @property
    def num_nodes(self) -> int:
        return self.num_devices // self.devices_per_node

    def node_of(self, device: int) -> int:
        return device // self.devices_per_node

    def same_node(self, device_a: int, device_b: int) -> bool:
        return self.node_of(device_a) == self.node_of(device_b)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, kw_only=True)
class CostModel:
    gate_cost_per_token: float = 0.0
    ffn_cost_per_token: float = 0.0
    combine_cost_per_token: float = 0.0
    attention_cost_per_token: float = 0.0
    expert_swap_cost: float = constants.DEFAULT_EXPERT_SWAP_COST
    sched_phase_cost: float = constants.DEFAULT_SCHED_PHASE_COST
    resume_signal_cost: float = constants.DEFAULT_RESUME_SIGNAL_COST
    backward_factor: float = constants.DEFAULT_BACKWARD_FACTOR

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, kw_only=True)
class ModelSpec:
    num_layers: int
    experts_per_layer: int
    token_embedding_bytes: int
    nonexpert_grad_bytes: tuple[int, ...] = ()
    gating_top_k: int = 2
    expert_param_bytes: int = 0

    def __post_init__(self):
        if not isinstance(self.nonexpert_grad_bytes, tuple):
            object.__setattr__(
                self, "nonexpert_grad_bytes", tuple(self.nonexpert_grad_bytes)
            )

    def to_dict(self) -> dict[str, Any]:
        model = asdict(self)
        model["nonexpert_grad_bytes"] = list(self.nonexpert_grad_bytes)
        return model


class Scenario(NamedTuple):
    cluster: ClusterSpec
    model: ModelSpec
    cost: CostModel

    def to_dict(self) -> dict[str, Any]:
        return {
            "cluster": self.cluster.to_dict(),
            "model": self.model.to_dict(),
            "cost": self.cost.to_dict(),
        }


@dataclass(frozen=True, kw_only=True, eq=False)
class CollectiveOp:
    op_id: str
    kind: OpKind
    priority: Priority = Priority.LOW
    per_pair_bytes: np.ndarray | None = None
    tensor_bytes: int = 0
    participants: tuple[int, ...] | None = None
    src: int | None = None
    dst: int | None = None
    arrival_time: float = 0.0
    dependencies: frozenset[str] = frozenset()
    role: OpRole = OpRole.SYNTHETIC
    layer: int | None = None
    phase: Phase | None = None

    def __post_init__(self):
        if self.per_pair_bytes is not None:
            matrix = np.array(self.per_pair_bytes, dtype=np.int64)
            matrix.setflags(write=False)
            object.__setattr__(self, "per_pair_bytes", matrix)

        if not isinstance(self.dependencies, frozenset):
            object.__setattr__(
                self, "dependencies", frozenset(self.dependencies)
            )

        if self.participants is not None:
            object.__setattr__(self, "participants", tuple(self.participants))

    @property
    def total_bytes(self) -> int:
        if self.per_pair_bytes is not None:
            return int(self.per_pair_bytes.sum())
        return self.tensor_bytes

    @property
    def parent(self) -> str:
        return self.op_id


@dataclass(frozen=True, kw_only=True, eq=False)
class MicroOp(CollectiveOp):
    parent_id: str
    index: int

    @property
    def parent(self) -> str:
        return self.parent_id


class ByteTotals(NamedTuple):
    tensor_bytes: int
    per_pair_bytes: np.ndarray | None = None


@dataclass(frozen=True, eq=False)
class BatchAssignment:
    origin_device: np.ndarray
    selection: np.ndarray

    def __post_init__(self):
        origin = np.asarray(self.origin_device, dtype=np.int64)
        selection = np.asarray(self.selection, dtype=np.int64)
        if selection.ndim == 1:
            selection = selection.reshape(-1, 1)
        origin.setflags(write=False)
        selection.setflags(write=False)
        object.__setattr__(self, "origin_device", origin)
        object.__setattr__(self, "selection", selection)

    @property
    def num_tokens(self) -> int:
        return int(self.origin_device.shape[0])

    @property
    def top_k(self) -> int:
        return int(self.selection.shape[1])

    def expert_counts(self, num_experts: int) -> np.ndarray:
        return np.bincount(self.selection.ravel(), minlength=num_experts)

    def origin_expert_counts(
        self, num_devices: int, num_experts: int
    ) -> np.ndarray:
        origins = np.repeat(self.origin_device, self.top_k)
        flat = origins * num_experts + self.selection.ravel()
        counts = np.bincount(flat, minlength=num_devices * num_experts)
        return counts.reshape(num_devices, num_experts)


class OpRecord(NamedTuple):
    op_id: str
    kind: OpKind
    devices: str
    queued_at: float
    start: float
    end: float
    isolated: float
    parent_id: str
    index: int | None = None
    layer: int | None = None
    phase: Phase | None = None
    role: OpRole = OpRole.SYNTHETIC

    @property
    def duration(self) -> float:
        return self.end - self.start


class TaskRecord(NamedTuple):
    task_id: str
    devices: tuple[int, ...]
    start: float
    end: float
    tag: str
    layer: int | None = None
    phase: Phase | None = None
    index: int | None = None


@dataclass(frozen=True)
class SimReport:
    op_records: tuple[OpRecord, ...] = ()
    task_records: tuple[TaskRecord, ...] = ()
    step_time: float = 0.0
    device_busy: tuple[float, ...] = ()
    moe_layer_times: Mapping[Phase, tuple[float, ...]] = field(
        default_factory=dict
    )
    all_to_all_times: tuple[float, ...] = ()
    pipelining_efficiency: float = 0.0
    inference_times: tuple[float, ...] = ()
    estimation_accuracy: float | None = None
    finetune_rate: float | None = None

    def __post_init__(self):
        violations = []
        for record in (*self.op_records, *self.task_records):
            if record.end < record.start:
                name = getattr(record, "op_id", None) or record.task_id
                violations.append(Violation(name, "ends before it starts"))

        for name in (
            "pipelining_efficiency",
            "estimation_accuracy",
            "finetune_rate",
        ):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value <= 1.0:
                violations.append(Violation(name, f"{value} outside [0, 1]"))

        if violations:
            raise InvalidSpec(violations)


def spec_violations(
    cluster: ClusterSpec, model: ModelSpec, cost: CostModel
) -> list[Violation]:
    violations: list[Violation] = []

    if cluster.num_devices <= 0:
        violations.append(Violation("cluster.num_devices", "must be > 0"))
    if cluster.devices_per_node <= 0:
        violations.append(Violation("cluster.devices_per_node", "must be > 0"))
    elif cluster.num_devices % cluster.devices_per_node:
        violations.append(
            Violation(
                "cluster.devices_per_node",
                "must divide num_devices",
            )
        )
    if cluster.inter_node_bw <= 0:
        violations.append(Violation("cluster.inter_node_bw", "must be > 0"))
    if cluster.intra_node_bw <= 0:
        violations.append(Violation("cluster.intra_node_bw", "must be > 0"))
    elif cluster.intra_node_bw < cluster.inter_node_bw:
        violations.append(
            Violation("cluster.intra_node_bw", "must be >= inter_node_bw")
        )
    if cluster.launch_latency < 0:
        violations.append(Violation("cluster.launch_latency", "must be >= 0"))
    if cluster.allreduce_algorithm not in AllReduceAlgorithms:
        violations.append(
            Violation(
                "cluster.allreduce_algorithm",
                f"must be one of {', '.join(AllReduceAlgorithms)}",
            )
        )

    if model.num_layers <= 0:
        violations.append(Violation("model.num_layers", "must be > 0"))
    if model.experts_per_layer <= 0:
        violations.append(Violation("model.experts_per_layer", "must be > 0"))
    if model.token_embedding_bytes <= 0:
        violations.append(
            Violation("model.token_embedding_bytes", "must be > 0")
        )
    if model.gating_top_k <= 0:
        violations.append(Violation("model.gating_top_k", "must be > 0"))
    elif model.gating_top_k > model.experts_per_layer:
        violations.append(
            Violation("model.gating_top_k", "must be <= experts_per_layer")
        )
    for index, size in enumerate(model.nonexpert_grad_bytes):
        if size <= 0:
            violations.append(
                Violation(f"model.nonexpert_grad_bytes[{index}]", "must be > 0")
            )
    if model.expert_param_bytes < 0:
        violations.append(Violation("model.expert_param_bytes", "must be >= 0"))

    for name, value in vars(cost).items():
        if value < 0:
            violations.append(Violation(f"cost.{name}", "must be >= 0"))

    return violations


def validate_spec(
    cluster: ClusterSpec, model: ModelSpec, cost: CostModel
) -> Scenario:
    violations = spec_violations(cluster=cluster, model=model, cost=cost)
    if violations:
        raise InvalidSpec(violations)

    return Scenario(cluster=cluster, model=model, cost=cost)


def network_send_bytes(per_pair_bytes: np.ndarray) -> np.ndarray:
    """Bytes each device sends to other devices, excluding local copies."""
    return per_pair_bytes.sum(axis=1) - np.diagonal(per_pair_bytes)


def micro_op_count(op: CollectiveOp, chunk_bytes: int) -> int:
    if chunk_bytes <= 0:
        raise InvalidSpec([Violation("chunk_bytes", "must be > 0")])

    if op.per_pair_bytes is not None:
        largest = int(network_send_bytes(op.per_pair_bytes).max(initial=0))
    else:
        largest = op.tensor_bytes
    return max(1, math.ceil(largest / chunk_bytes))


def partition(op: CollectiveOp, chunk_bytes: int) -> list[MicroOp]:
    count = micro_op_count(op, chunk_bytes)
    if op.per_pair_bytes is not None:
        return split_op(op, count)

    sizes = [chunk_bytes] * (count - 1)
    sizes.append(op.tensor_bytes - chunk_bytes * (count - 1))
    return _tensor_micro_ops(op, sizes)


def split_op(op: CollectiveOp, count: int) -> list[MicroOp]:
    """Split into `count` micro-ops; every piece but the last is equal."""
    if count <= 0:
        raise InvalidSpec([Violation("count", "must be > 0")])

    if op.per_pair_bytes is None:
        base = op.tensor_bytes // count
        sizes = [base] * (count - 1)
        sizes.append(op.tensor_bytes - base * (count - 1))
        return _tensor_micro_ops(op, sizes)

    base = op.per_pair_bytes // count
    tail = op.per_pair_bytes - base * (count - 1)
    return [
        MicroOp(
            op_id=f"{op.op_id}#{index}",
            index=index,
            per_pair_bytes=tail if index == count - 1 else base,
            **_micro_fields(op),
        )
        for index in range(count)
    ]


def _micro_fields(op: CollectiveOp) -> dict:
    return {
        "kind": op.kind,
        "priority": op.priority,
        "participants": op.participants,
        "src": op.src,
        "dst": op.dst,
        "arrival_time": op.arrival_time,
        "dependencies": op.dependencies,
        "role": op.role,
        "layer": op.layer,
        "phase": op.phase,
        "parent_id": op.op_id,
    }


def _tensor_micro_ops(op: CollectiveOp, sizes: list[int]) -> list[MicroOp]:
    return [
        MicroOp(
            op_id=f"{op.op_id}#{index}",
            index=index,
            tensor_bytes=size,
            **_micro_fields(op),
        )
        for index, size in enumerate(sizes)
    ]


def concatenate(micro_ops: Sequence[MicroOp]) -> ByteTotals:
    ordered = sorted(micro_ops, key=lambda micro_op: micro_op.index)
    matrices = [
        micro_op.per_pair_bytes
        for micro_op in ordered
        if micro_op.per_pair_bytes is not None
    ]
    if matrices:
        total = np.sum(matrices, axis=0, dtype=np.int64)
        return ByteTotals(tensor_bytes=int(total.sum()), per_pair_bytes=total)

    return ByteTotals(
        tensor_bytes=sum(micro_op.tensor_bytes for micro_op in ordered)
    )
