from __future__ import annotations

import logging
from collections import defaultdict
from collections.abc import Collection, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Literal, NamedTuple

import numpy as np

from .constants import FLOW_EPSILON
from .core import ClusterSpec, CollectiveOp, OpKind
from .errors import InvalidSpec, NegativeRemainder, UnknownDevice, Violation

logger = logging.getLogger("moe_sched.netmodel")

ResourceKind = Literal["inter", "intra"]


class Resource(NamedTuple):
    kind: ResourceKind
    device: int


type Demand = dict[Resource, float]


def capacity(resource: Resource, cluster: ClusterSpec) -> float:
    match resource:
        case Resource(kind="inter"):
            return cluster.inter_node_bw
        case Resource(kind="intra"):
            return cluster.intra_node_bw

    raise UnknownDevice(f"Unknown resource kind ({resource.kind})")


def _check_devices(devices: Sequence[int], cluster: ClusterSpec):
    for device in devices:
        if not 0 <= device < cluster.num_devices:
            raise UnknownDevice(
                f"device {device} outside cluster of {cluster.num_devices}"
            )


def _all_to_all_demand(matrix: np.ndarray, cluster: ClusterSpec) -> Demand:
    size = matrix.shape[0]
    if size > cluster.num_devices:
        raise UnknownDevice(
            f"per-pair matrix spans {size} devices, cluster has "
            f"{cluster.num_devices}"
        )
    if matrix.shape != (size, size) or size < cluster.num_devices:
        raise InvalidSpec(
            [
                Violation(
                    "per_pair_bytes",
                    f"must be {cluster.num_devices}x{cluster.num_devices}",
                )
            ]
        )

    nodes = np.arange(size) // cluster.devices_per_node
    same_node = nodes[:, None] == nodes[None, :]
    local = np.where(same_node, matrix, 0)
    np.fill_diagonal(local, 0)
    remote = np.where(same_node, 0, matrix)

    inter = np.maximum(remote.sum(axis=1), remote.sum(axis=0))
    intra = np.maximum(local.sum(axis=1), local.sum(axis=0))

    demand: Demand = {}
    for device in range(size):
        if inter[device] > 0:
            demand[Resource("inter", device)] = float(inter[device])
        if intra[device] > 0:
            demand[Resource("intra", device)] = float(intra[device])
    return demand


def _all_reduce_demand(op: CollectiveOp, cluster: ClusterSpec) -> Demand:
    participants = (
        op.participants
        if op.participants is not None
        else tuple(range(cluster.num_devices))
    )
    _check_devices(participants, cluster)

    count = len(set(participants))
    if count <= 1 or op.tensor_bytes <= 0:
        return {}

    match cluster.allreduce_algorithm:
        case "tree":
            per_device = 2.0 * op.tensor_bytes
        case _:
            per_device = 2.0 * (count - 1) / count * op.tensor_bytes

    spans_nodes = len({cluster.node_of(device) for device in participants}) > 1
    kind: ResourceKind = "inter" if spans_nodes else "intra"
    return {Resource(kind, device): per_device for device in set(participants)}


def _point_to_point_demand(op: CollectiveOp, cluster: ClusterSpec) -> Demand:
    if op.src is None or op.dst is None:
        raise InvalidSpec(
            [Violation(op.op_id, "PointToPoint requires src and dst")]
        )
    _check_devices((op.src, op.dst), cluster)

    if op.src == op.dst or op.tensor_bytes <= 0:
        return {}

    kind: ResourceKind = (
        "intra" if cluster.same_node(op.src, op.dst) else "inter"
    )
    size = float(op.tensor_bytes)
    return {Resource(kind, op.src): size, Resource(kind, op.dst): size}


def op_demand(op: CollectiveOp, cluster: ClusterSpec) -> Demand:
    match op:
        case CollectiveOp(
            kind=OpKind.ALL_TO_ALL, per_pair_bytes=np.ndarray() as matrix
        ):
            return _all_to_all_demand(matrix, cluster)
        case CollectiveOp(kind=OpKind.ALL_TO_ALL):
            return {}
        case CollectiveOp(kind=OpKind.ALL_REDUCE):
            return _all_reduce_demand(op, cluster)
        case CollectiveOp(kind=OpKind.POINT_TO_POINT):
            return _point_to_point_demand(op, cluster)

    raise InvalidSpec([Violation(op.op_id, f"unknown kind {op.kind}")])


def isolated_duration(op: CollectiveOp, cluster: ClusterSpec) -> float:
    demand = op_demand(op, cluster)
    if not demand:
        return 0.0

    transfer = max(
        size / capacity(resource, cluster) for resource, size in demand.items()
    )
    return cluster.launch_latency + transfer


@dataclass(frozen=True)
class ActiveFlow:
    op_id: str
    demand: Mapping[Resource, float]
    remaining: Mapping[Resource, float]

    @property
    def peak_demand(self) -> float:
        return max(self.demand.values())

    def weight(self, resource: Resource) -> float:
        return self.demand[resource] / self.peak_demand

    def time_to_completion(self, rate: float) -> float:
        if rate <= 0:
            return float("inf")
        return max(
            remaining / (rate * self.weight(resource))
            for resource, remaining in self.remaining.items()
        )


@dataclass(frozen=True)
class ActiveFlowSet:
    flows: Mapping[str, ActiveFlow] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.flows)

    def __iter__(self) -> Iterator[ActiveFlow]:
        return iter(self.flows.values())

    def __contains__(self, op_id: object) -> bool:
        return op_id in self.flows

    def with_flow(self, op_id: str, demand: Demand) -> ActiveFlowSet:
        if not demand:
            raise InvalidSpec([Violation(op_id, "flow has no demand")])

        flows = dict(self.flows)
        flows[op_id] = ActiveFlow(
            op_id=op_id, demand=dict(demand), remaining=dict(demand)
        )
        return ActiveFlowSet(flows=flows)

    def without(self, op_ids: Sequence[str]) -> ActiveFlowSet:
        removed = set(op_ids)
        return ActiveFlowSet(
            flows={
                op_id: flow
                for op_id, flow in self.flows.items()
                if op_id not in removed
            }
        )


def fair_share_rates(
    flows: ActiveFlowSet, cluster: ClusterSpec
) -> dict[str, float]:
    """Progressive filling over NIC resources.

    Every unfrozen flow's bottleneck rate rises together; a flow uses
    `rate * weight` of each resource it crosses. When a resource saturates,
    the flows crossing it freeze at the current level.
    """
    crossing: defaultdict[Resource, list[ActiveFlow]] = defaultdict(list)
    for flow in flows:
        for resource in flow.demand:
            crossing[resource].append(flow)

    resources = sorted(crossing)
    residual = {resource: capacity(resource, cluster) for resource in resources}
    unfrozen = {flow.op_id for flow in flows}
    rates: dict[str, float] = {}
    level = 0.0

    while unfrozen:
        loads = {
            resource: sum(
                flow.weight(resource)
                for flow in crossing[resource]
                if flow.op_id in unfrozen
            )
            for resource in resources
        }

        bottleneck = None
        increment = 0.0
        for resource in resources:
            if loads[resource] <= 0:
                continue
            candidate = residual[resource] / loads[resource]
            if bottleneck is None or candidate < increment:
                bottleneck = resource
                increment = candidate

        if bottleneck is None:
            # Unreachable for flows built through with_flow.
            break

        level += increment
        for resource in resources:
            residual[resource] -= increment * loads[resource]
        residual[bottleneck] = 0.0

        saturated = [
            resource
            for resource in resources
            if loads[resource] > 0
            and residual[resource]
            <= FLOW_EPSILON * capacity(resource, cluster)
        ]
        for resource in saturated:
            for flow in crossing[resource]:
                if flow.op_id in unfrozen:
                    rates[flow.op_id] = level
                    unfrozen.discard(flow.op_id)

    return rates


def time_to_next_completion(
    flows: ActiveFlowSet, rates: Mapping[str, float]
) -> float:
    if not len(flows):
        return float("inf")
    return min(flow.time_to_completion(rates[flow.op_id]) for flow in flows)


def draining_flows(
    flows: ActiveFlowSet, rates: Mapping[str, float], dt: float
) -> frozenset[str]:
    """Flows that drain within `dt`, up to the fluid slack."""
    return frozenset(
        flow.op_id
        for flow in flows
        if flow.time_to_completion(rates[flow.op_id])
        <= dt * (1 + FLOW_EPSILON)
    )


class AdvanceResult(NamedTuple):
    flows: ActiveFlowSet
    completed: list[str]


def advance(
    flows: ActiveFlowSet,
    cluster: ClusterSpec,
    dt: float,
    rates: Mapping[str, float] | None = None,
    finished: Collection[str] = (),
) -> AdvanceResult:
    """Progress every flow by `dt`.

    Flows named in `finished` complete outright; the caller has already
    established that they drain within `dt`.
    """
    if rates is None:
        rates = fair_share_rates(flows, cluster)

    updated: dict[str, ActiveFlow] = {}
    completed: list[str] = []
    for flow in flows:
        if flow.op_id in finished:
            completed.append(flow.op_id)
            continue

        rate = rates[flow.op_id]
        remaining = {}
        for resource, left in flow.remaining.items():
            after = left - rate * flow.weight(resource) * dt
            tolerance = FLOW_EPSILON * flow.demand[resource]
            if after < -tolerance:
                logger.error(
                    f"Flow {flow.op_id} overshot {resource} by {-after} bytes"
                )
                raise NegativeRemainder(
                    f"{flow.op_id} remaining {after} on {resource} after "
                    f"dt={dt}"
                )
            remaining[resource] = max(after, 0.0)

        if all(
            left <= FLOW_EPSILON * flow.demand[resource]
            for resource, left in remaining.items()
        ):
            completed.append(flow.op_id)
            continue

        updated[flow.op_id] = ActiveFlow(
            op_id=flow.op_id, demand=flow.demand, remaining=remaining
        )

    return AdvanceResult(
        flows=ActiveFlowSet(flows=updated), completed=sorted(completed)
    )
