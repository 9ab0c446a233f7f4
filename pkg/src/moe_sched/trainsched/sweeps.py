from __future__ import annotations

from collections.abc import Sequence
from typing import NamedTuple

import numpy as np

from moe_sched import engine
from moe_sched.core import (
    ClusterSpec,
    CollectiveOp,
    OpKind,
    OpRole,
    Phase,
    Priority,
    Scenario,
)
from moe_sched.engine import Workload

from .metrics import percentile, slowdown_factors
from .policies import PolicyName, SchedulerPolicy
from .runner import simulate_step

# Randomized contention scenarios: one backward AllToAll on a single node,
# overlapped by a few AllReduces with random arrival offsets and sizes.
CONTENTION_DEVICES = 4
CONTENTION_BANDWIDTH = 1.2e9
CONTENTION_PAIR_BYTES = 4_000_000
CONTENTION_OVERLAPS = (1, 1, 1, 1, 2, 2, 3)


class SlowdownSummary(NamedTuple):
    samples: tuple[float, ...]
    median: float
    p95: float
    max: float


class PartitionPoint(NamedTuple):
    partition_bytes: int
    step_time: float
    pipelining_efficiency: float


def contention_cluster() -> ClusterSpec:
    return ClusterSpec(
        num_devices=CONTENTION_DEVICES,
        devices_per_node=CONTENTION_DEVICES,
        inter_node_bw=CONTENTION_BANDWIDTH,
        intra_node_bw=CONTENTION_BANDWIDTH,
        launch_latency=0.0,
    )


def contention_workload(seed: int, sample: int) -> Workload:
    """One sample: an AllToAll arriving mid-window plus 1-3 AllReduces.

    AllReduce arrivals fall between half an AllToAll before and a quarter
    after it, each carrying one to three AllToAlls' worth of NIC demand.
    """
    rng = np.random.default_rng([seed, sample])
    cluster = contention_cluster()

    pairs = np.full(
        (CONTENTION_DEVICES, CONTENTION_DEVICES), CONTENTION_PAIR_BYTES
    )
    np.fill_diagonal(pairs, 0)
    demand = CONTENTION_PAIR_BYTES * (CONTENTION_DEVICES - 1)
    isolated = demand / CONTENTION_BANDWIDTH
    arrival = 0.5 * isolated

    ops = [
        CollectiveOp(
            op_id="a2a",
            kind=OpKind.ALL_TO_ALL,
            priority=Priority.HIGH,
            per_pair_bytes=pairs,
            arrival_time=arrival,
            role=OpRole.DISPATCH,
            phase=Phase.BACKWARD,
        )
    ]

    overlaps = int(rng.choice(CONTENTION_OVERLAPS))
    ring = 2 * (CONTENTION_DEVICES - 1) / CONTENTION_DEVICES
    for index in range(overlaps):
        offset = rng.uniform(-0.5, 0.25) * isolated
        scale = rng.uniform(1.0, 3.0)
        ops.append(
            CollectiveOp(
                op_id=f"ar{index}",
                kind=OpKind.ALL_REDUCE,
                tensor_bytes=int(scale * demand / ring),
                arrival_time=arrival + offset,
                role=OpRole.GRADIENT,
                phase=Phase.BACKWARD,
            )
        )

    return Workload(cluster=cluster, ops=tuple(ops))


def contention_sweep(seed: int, samples: int = 500) -> SlowdownSummary:
    """AllToAll slowdown distribution under Baseline fair sharing."""
    slowdowns: list[float] = []
    for sample in range(samples):
        report = engine.run(contention_workload(seed, sample))
        slowdowns.extend(slowdown_factors(report))

    return SlowdownSummary(
        samples=tuple(slowdowns),
        median=percentile(slowdowns, 50),
        p95=percentile(slowdowns, 95),
        max=max(slowdowns, default=0.0),
    )


def partition_sweep(
    scenario: Scenario,
    tokens_per_device: int,
    sizes: Sequence[int],
    policy: PolicyName = PolicyName.LINA,
) -> list[PartitionPoint]:
    points = []
    for size in sizes:
        report = simulate_step(
            scenario,
            tokens_per_device,
            SchedulerPolicy(name=policy, partition_bytes=size),
        )
        points.append(
            PartitionPoint(
                partition_bytes=size,
                step_time=report.step_time,
                pipelining_efficiency=report.pipelining_efficiency,
            )
        )
    return points
