from __future__ import annotations

from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import replace
from typing import NamedTuple

import numpy as np

from moe_sched.core import ClusterSpec, OpKind, OpRole, Phase, SimReport
from moe_sched.engine import TaskTag, busy_fraction

MOE_TAGS = frozenset((TaskTag.GATE, TaskTag.FFN, TaskTag.COMBINE))
TOKEN_ROLES = frozenset((OpRole.DISPATCH, OpRole.COMBINE))


class AllToAllWindow(NamedTuple):
    parent_id: str
    layer: int | None
    phase: Phase | None
    role: OpRole
    start: float
    end: float
    isolated: float
    micro_ops: int

    @property
    def duration(self) -> float:
        return self.end - self.start

    @property
    def slowdown(self) -> float:
        if self.isolated <= 0:
            return 1.0
        return self.duration / self.isolated


def percentile(values: Sequence[float], q: float) -> float:
    if not len(values):
        return 0.0
    return float(np.percentile(np.asarray(values, dtype=float), q))


def all_to_all_windows(
    report: SimReport, roles: Iterable[OpRole] = TOKEN_ROLES
) -> list[AllToAllWindow]:
    wanted = frozenset(roles)
    grouped = defaultdict(list)
    for record in report.op_records:
        if record.kind == OpKind.ALL_TO_ALL and record.role in wanted:
            grouped[record.parent_id].append(record)

    windows = [
        AllToAllWindow(
            parent_id=parent_id,
            layer=records[0].layer,
            phase=records[0].phase,
            role=records[0].role,
            start=min(record.start for record in records),
            end=max(record.end for record in records),
            isolated=sum(record.isolated for record in records),
            micro_ops=len(records),
        )
        for parent_id, records in grouped.items()
    ]
    return sorted(windows, key=lambda window: (window.start, window.parent_id))


def all_to_all_times(report: SimReport) -> tuple[float, ...]:
    return tuple(window.duration for window in all_to_all_windows(report))


def slowdown_factors(report: SimReport) -> tuple[float, ...]:
    return tuple(
        window.slowdown
        for window in all_to_all_windows(report)
        if window.isolated > 0
    )


def moe_layer_times(report: SimReport, phase: Phase) -> tuple[float, ...]:
    """Gate to combine span of every MoE layer, in layer order."""
    spans: defaultdict[int, list[tuple[float, float]]] = defaultdict(list)
    for task in report.task_records:
        if task.phase != phase or task.layer is None:
            continue
        if task.tag in MOE_TAGS:
            spans[task.layer].append((task.start, task.end))

    for op in report.op_records:
        if op.phase != phase or op.layer is None:
            continue
        if op.role in TOKEN_ROLES:
            spans[op.layer].append((op.start, op.end))

    return tuple(
        max(end for _, end in spans[layer])
        - min(start for start, _ in spans[layer])
        for layer in sorted(spans)
    )


def pipelining_efficiency(report: SimReport, device: int = 0) -> float:
    """Compute-busy share of the backward token-dispatch AllToAll windows."""
    busy = 0.0
    total = 0.0
    for window in all_to_all_windows(report, roles=(OpRole.DISPATCH,)):
        if window.phase != Phase.BACKWARD or window.duration <= 0:
            continue
        busy += window.duration * busy_fraction(
            report, device, (window.start, window.end)
        )
        total += window.duration

    if total <= 0:
        return 0.0
    return min(1.0, busy / total)


def compute_utilization(report: SimReport) -> float:
    if report.step_time <= 0 or not report.device_busy:
        return 0.0
    mean_busy = sum(report.device_busy) / len(report.device_busy)
    return min(1.0, mean_busy / report.step_time)


def partition_overhead(report: SimReport, cluster: ClusterSpec) -> float:
    """Share of the step spent in collective launch latency."""
    if report.step_time <= 0:
        return 0.0
    launched = sum(1 for record in report.op_records if record.isolated > 0)
    return launched * cluster.launch_latency / report.step_time


def with_training_metrics(report: SimReport) -> SimReport:
    return replace(
        report,
        moe_layer_times={
            phase: moe_layer_times(report, phase)
            for phase in (Phase.FORWARD, Phase.BACKWARD)
        },
        all_to_all_times=all_to_all_times(report),
        pipelining_efficiency=pipelining_efficiency(report),
    )
