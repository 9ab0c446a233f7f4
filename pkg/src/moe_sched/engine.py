from __future__ import annotations

import enum
import graphlib
import heapq
import logging
from collections import defaultdict
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import NamedTuple, Protocol

from . import netmodel
from .core import (
    ClusterSpec,
    CollectiveOp,
    MicroOp,
    OpKind,
    OpRecord,
    Phase,
    SimReport,
    TaskRecord,
)
from .errors import (
    DeadlockDetected,
    EmptyWindow,
    InvalidSpec,
    MoeSchedError,
    Violation,
)

logger = logging.getLogger("moe_sched.engine")


class TaskTag(enum.StrEnum):
    ATTENTION = "attention"
    GATE = "gate"
    FFN = "ffn"
    COMBINE = "combine"
    SWAP = "swap"
    ESTIMATE = "estimate"
    PHASE_TWO = "phase_two"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True, kw_only=True)
class ComputeTask:
    task_id: str
    devices: tuple[int, ...]
    duration: float
    dependencies: frozenset[str] = frozenset()
    tag: TaskTag = TaskTag.SYNTHETIC
    layer: int | None = None
    phase: Phase | None = None
    index: int | None = None
    lookahead: bool = False

    def __post_init__(self):
        object.__setattr__(self, "devices", tuple(self.devices))
        if not isinstance(self.dependencies, frozenset):
            object.__setattr__(
                self, "dependencies", frozenset(self.dependencies)
            )


@dataclass(frozen=True)
class Workload:
    cluster: ClusterSpec
    tasks: tuple[ComputeTask, ...] = ()
    ops: tuple[CollectiveOp, ...] = ()

    def merged(self, other: Workload) -> Workload:
        return Workload(
            cluster=self.cluster,
            tasks=self.tasks + other.tasks,
            ops=self.ops + other.ops,
        )


class EventKind(enum.IntEnum):
    # Value order breaks ties between events sharing a timestamp.
    OP_COMPLETE = 0
    COMPUTE_COMPLETE = 1
    LAUNCH_COMPLETE = 2
    OP_ARRIVAL = 3
    SCHEDULER_WAKE = 4


class Event(NamedTuple):
    time: float
    kind: EventKind
    item_id: str


class EventQueue:
    def __init__(self):
        self._heap: list[Event] = []
        self.clock = 0.0

    def __len__(self) -> int:
        return len(self._heap)

    def push(self, time: float, kind: EventKind, item_id: str):
        if time < self.clock:
            raise MoeSchedError(
                f"event {kind.name} for {item_id} at {time} precedes clock "
                f"{self.clock}"
            )
        heapq.heappush(self._heap, Event(time=time, kind=kind, item_id=item_id))

    def peek_time(self) -> float | None:
        if not self._heap:
            return None
        return self._heap[0].time

    def pop(self) -> Event:
        event = heapq.heappop(self._heap)
        self.clock = max(self.clock, event.time)
        return event


class SchedulerView(NamedTuple):
    now: float
    queued: tuple[CollectiveOp, ...]
    in_flight: tuple[CollectiveOp, ...]
    completed_alltoalls: int
    remaining_alltoalls: int
    lookahead_active: bool


class Dispatcher(Protocol):
    """Picks queued op ids to launch.

    A dispatcher may also define `next_wake(view) -> float | None`; the
    engine then re-invokes it at that time even if nothing else happens.
    """

    def __call__(self, view: SchedulerView) -> Sequence[str]: ...


def dispatch_all(view: SchedulerView) -> Sequence[str]:
    return [op.op_id for op in view.queued]


@dataclass
class StreamState:
    running: list[str | None]
    ready_tasks: list[tuple[float, int, str]] = field(default_factory=list)
    pending: dict[str, int] = field(default_factory=dict)
    queued: dict[str, float] = field(default_factory=dict)
    launching: dict[str, float] = field(default_factory=dict)
    in_flight: dict[str, float] = field(default_factory=dict)

    def idle(self, devices: Iterable[int]) -> bool:
        return all(self.running[device] is None for device in devices)


def device_label(devices: Sequence[int] | None, cluster: ClusterSpec) -> str:
    if devices is None or len(devices) == cluster.num_devices:
        return "*"
    return ";".join(str(device) for device in devices)


def _op_devices(op: CollectiveOp, cluster: ClusterSpec) -> str:
    match op:
        case CollectiveOp(kind=OpKind.POINT_TO_POINT, src=src, dst=dst):
            return f"{src}>{dst}"
        case CollectiveOp(participants=participants):
            return device_label(participants, cluster)


def check_dependencies(workload: Workload):
    ids: dict[str, str] = {}
    violations: list[Violation] = []
    for item in (*workload.tasks, *workload.ops):
        item_id = item.task_id if isinstance(item, ComputeTask) else item.op_id
        if item_id in ids:
            violations.append(Violation(item_id, "duplicate id"))
        ids[item_id] = item_id

    graph: dict[str, frozenset[str]] = {}
    for task in workload.tasks:
        graph[task.task_id] = task.dependencies
        if not task.devices:
            violations.append(Violation(task.task_id, "task has no devices"))
        if task.duration < 0:
            violations.append(Violation(task.task_id, "negative duration"))
        for device in task.devices:
            if not 0 <= device < workload.cluster.num_devices:
                violations.append(
                    Violation(task.task_id, f"unknown device {device}")
                )
    for op in workload.ops:
        graph[op.op_id] = op.dependencies
        if op.arrival_time < 0:
            violations.append(Violation(op.op_id, "negative arrival time"))

    for item_id, dependencies in graph.items():
        for dependency in sorted(dependencies):
            if dependency not in ids:
                violations.append(
                    Violation(item_id, f"unknown dependency {dependency}")
                )

    if violations:
        raise InvalidSpec(violations)

    try:
        graphlib.TopologicalSorter(graph).prepare()
    except graphlib.CycleError as err:
        cycle = list(err.args[1])
        logger.error(f"Dependency cycle: {' -> '.join(cycle)}")
        raise DeadlockDetected(cycle) from err


class Simulator:
    def __init__(self, workload: Workload, dispatcher: Dispatcher):
        check_dependencies(workload)

        self._workload = workload
        self._cluster = workload.cluster
        self._dispatcher = dispatcher

        self._tasks = {task.task_id: task for task in workload.tasks}
        self._ops = {op.op_id: op for op in workload.ops}
        self._order = {
            item_id: position
            for position, item_id in enumerate(
                (*self._tasks, *self._ops)
            )
        }

        self._dependents: defaultdict[str, list[str]] = defaultdict(list)
        for item_id, dependencies in (
            *((task.task_id, task.dependencies) for task in workload.tasks),
            *((op.op_id, op.dependencies) for op in workload.ops),
        ):
            for dependency in dependencies:
                self._dependents[dependency].append(item_id)

        self._events = EventQueue()
        self._state = StreamState(
            running=[None] * self._cluster.num_devices,
            pending={
                item_id: len(dependencies)
                for item_id, dependencies in (
                    *((t.task_id, t.dependencies) for t in workload.tasks),
                    *((o.op_id, o.dependencies) for o in workload.ops),
                )
            },
        )
        self._flows = netmodel.ActiveFlowSet()
        self._rates: dict[str, float] | None = None

        self._parent_left: defaultdict[str, int] = defaultdict(int)
        for op in workload.ops:
            if op.kind == OpKind.ALL_TO_ALL:
                self._parent_left[op.parent] += 1
        self._completed_alltoalls = 0

        self._op_records: dict[str, OpRecord] = {}
        self._task_records: dict[str, TaskRecord] = {}
        self._task_starts: dict[str, float] = {}
        self._completed: set[str] = set()
        self._wakes: set[float] = set()
        self._events_processed = 0

    @property
    def now(self) -> float:
        return self._events.clock

    def run(self) -> SimReport:
        for item_id, count in list(self._state.pending.items()):
            if count == 0:
                self._make_ready(item_id)

        while True:
            self._settle()

            next_event = self._events.peek_time()
            horizon = self._flow_horizon()
            if next_event is None and horizon == float("inf"):
                break

            # Steps are relative so that short flows late in a long run
            # keep their precision.
            if next_event is not None and next_event - self.now < horizon:
                target = next_event
                self._advance_flows(next_event - self.now, target)
            else:
                target = self.now + horizon
                self._advance_flows(horizon, target, drain=True)
            self._events.clock = max(self._events.clock, target)

            while (
                pending := self._events.peek_time()
            ) is not None and pending <= self.now:
                self._handle(self._events.pop())

        self._check_finished()

        report = self._build_report()
        logger.info(
            f"Simulation finished after {self._events_processed} events, "
            f"makespan {report.step_time:.6f}s"
        )
        return report

    def _flow_horizon(self) -> float:
        if not len(self._flows):
            return float("inf")
        return netmodel.time_to_next_completion(self._flows, self._fair_rates())

    def _fair_rates(self) -> dict[str, float]:
        if self._rates is None:
            self._rates = netmodel.fair_share_rates(self._flows, self._cluster)
        return self._rates

    def _advance_flows(self, dt: float, target: float, drain: bool = False):
        """Move flows forward by `dt`, ending at `target`.

        With `drain`, `dt` is the flow horizon and the flows that finish
        within it complete outright.
        """
        if not len(self._flows) or (dt <= 0 and not drain):
            return

        rates = self._fair_rates()
        finished = (
            netmodel.draining_flows(self._flows, rates, dt)
            if drain
            else frozenset()
        )
        result = netmodel.advance(
            self._flows,
            self._cluster,
            max(dt, 0.0),
            rates=rates,
            finished=finished,
        )
        self._flows = result.flows
        self._rates = None
        for op_id in result.completed:
            self._events.push(target, EventKind.OP_COMPLETE, op_id)

    def _settle(self):
        while True:
            started = self._start_compute()
            dispatched = self._dispatch()
            if not started and not dispatched:
                return
            if self._events.peek_time() == self.now:
                return

    def _handle(self, event: Event):
        self._events_processed += 1
        match event:
            case Event(kind=EventKind.OP_ARRIVAL, item_id=op_id):
                self._state.queued[op_id] = self.now

            case Event(kind=EventKind.LAUNCH_COMPLETE, item_id=op_id):
                op = self._ops[op_id]
                self._state.in_flight[op_id] = self._state.launching.pop(op_id)
                self._flows = self._flows.with_flow(
                    op_id, netmodel.op_demand(op, self._cluster)
                )
                self._rates = None

            case Event(kind=EventKind.OP_COMPLETE, item_id=op_id):
                self._complete_op(op_id)

            case Event(kind=EventKind.COMPUTE_COMPLETE, item_id=task_id):
                self._complete_task(task_id)

            case Event(kind=EventKind.SCHEDULER_WAKE, time=time):
                self._wakes.discard(time)
                logger.debug(f"t={self.now:.6f} scheduler wake")

    def _make_ready(self, item_id: str):
        if item_id in self._tasks:
            self._state.ready_tasks.append(
                (self.now, self._order[item_id], item_id)
            )
            self._state.ready_tasks.sort()
            return

        op = self._ops[item_id]
        if op.arrival_time > self.now:
            self._events.push(op.arrival_time, EventKind.OP_ARRIVAL, item_id)
        else:
            self._state.queued[item_id] = self.now

    def _release_dependents(self, item_id: str):
        for dependent in sorted(
            self._dependents[item_id], key=self._order.__getitem__
        ):
            self._state.pending[dependent] -= 1
            if self._state.pending[dependent] == 0:
                self._make_ready(dependent)

    def _start_compute(self) -> bool:
        started = False
        claimed: set[int] = set()
        waiting: list[tuple[float, int, str]] = []
        for entry in self._state.ready_tasks:
            task_id = entry[2]
            task = self._tasks[task_id]
            if claimed.isdisjoint(task.devices) and self._state.idle(
                task.devices
            ):
                for device in task.devices:
                    self._state.running[device] = task_id
                self._task_starts[task_id] = self.now
                self._events.push(
                    self.now + task.duration,
                    EventKind.COMPUTE_COMPLETE,
                    task_id,
                )
                started = True
            else:
                waiting.append(entry)
            claimed.update(task.devices)

        self._state.ready_tasks = waiting
        return started

    def _complete_task(self, task_id: str):
        task = self._tasks[task_id]
        for device in task.devices:
            self._state.running[device] = None

        self._task_records[task_id] = TaskRecord(
            task_id=task_id,
            devices=task.devices,
            start=self._task_starts[task_id],
            end=self.now,
            tag=task.tag,
            layer=task.layer,
            phase=task.phase,
            index=task.index,
        )
        self._completed.add(task_id)
        self._release_dependents(task_id)

    def _view(self) -> SchedulerView:
        running = {
            task_id for task_id in self._state.running if task_id is not None
        }
        in_flight = sorted(
            (*self._state.launching.items(), *self._state.in_flight.items()),
            key=lambda item: (item[1], item[0]),
        )
        return SchedulerView(
            now=self.now,
            queued=tuple(self._ops[op_id] for op_id in self._state.queued),
            in_flight=tuple(self._ops[op_id] for op_id, _ in in_flight),
            completed_alltoalls=self._completed_alltoalls,
            remaining_alltoalls=len(self._parent_left)
            - self._completed_alltoalls,
            lookahead_active=any(
                self._tasks[task_id].lookahead for task_id in running
            ),
        )

    def _dispatch(self) -> bool:
        # The dispatcher sees every settled state, queued ops or not, so
        # stateful policies observe completions as they happen.
        dispatched = False
        while True:
            selected = list(self._dispatcher(self._view()))
            if not selected:
                break

            for op_id in selected:
                if op_id not in self._state.queued:
                    logger.error(f"Dispatcher picked unqueued op {op_id}")
                    raise MoeSchedError(f"op {op_id} is not queued")

                queued_at = self._state.queued.pop(op_id)
                self._launch(op_id, queued_at)
                dispatched = True

        self._schedule_wake()
        return dispatched

    def _schedule_wake(self):
        next_wake = getattr(self._dispatcher, "next_wake", None)
        if next_wake is None or not self._state.queued:
            return

        wake = next_wake(self._view())
        if wake is not None and wake > self.now and wake not in self._wakes:
            self._wakes.add(wake)
            self._events.push(wake, EventKind.SCHEDULER_WAKE, "scheduler")

    def _launch(self, op_id: str, queued_at: float):
        op = self._ops[op_id]
        isolated = netmodel.isolated_duration(op, self._cluster)
        self._op_records[op_id] = OpRecord(
            op_id=op_id,
            kind=op.kind,
            devices=_op_devices(op, self._cluster),
            queued_at=queued_at,
            start=self.now,
            end=self.now,
            isolated=isolated,
            parent_id=op.parent,
            index=op.index if isinstance(op, MicroOp) else None,
            layer=op.layer,
            phase=op.phase,
            role=op.role,
        )
        logger.debug(f"t={self.now:.6f} dispatch {op_id} ({op.kind})")

        if isolated == 0.0:
            self._state.in_flight[op_id] = self.now
            self._events.push(self.now, EventKind.OP_COMPLETE, op_id)
            return

        self._state.launching[op_id] = self.now
        self._events.push(
            self.now + self._cluster.launch_latency,
            EventKind.LAUNCH_COMPLETE,
            op_id,
        )

    def _complete_op(self, op_id: str):
        self._state.launching.pop(op_id, None)
        self._state.in_flight.pop(op_id, None)

        op = self._ops[op_id]
        self._op_records[op_id] = self._op_records[op_id]._replace(end=self.now)

        if op.kind == OpKind.ALL_TO_ALL:
            self._parent_left[op.parent] -= 1
            if self._parent_left[op.parent] == 0:
                self._completed_alltoalls += 1

        self._completed.add(op_id)
        self._release_dependents(op_id)

    def _check_finished(self):
        unfinished = sorted(
            item_id
            for item_id in (*self._tasks, *self._ops)
            if item_id not in self._completed
        )
        if unfinished:
            logger.error(f"Simulation stalled, {len(unfinished)} items left")
            raise DeadlockDetected(unfinished)

    def _build_report(self) -> SimReport:
        op_records = tuple(
            sorted(
                self._op_records.values(),
                key=lambda record: (record.start, record.op_id),
            )
        )
        task_records = tuple(
            sorted(
                self._task_records.values(),
                key=lambda record: (record.start, record.task_id),
            )
        )

        busy = [0.0] * self._cluster.num_devices
        for record in task_records:
            for device in record.devices:
                busy[device] += record.end - record.start

        ends = [record.end for record in (*op_records, *task_records)]
        return SimReport(
            op_records=op_records,
            task_records=task_records,
            step_time=max(ends, default=0.0),
            device_busy=tuple(busy),
        )


def run(workload: Workload, dispatcher: Dispatcher = dispatch_all) -> SimReport:
    return Simulator(workload, dispatcher).run()


def busy_fraction(
    report: SimReport, device: int, window: tuple[float, float]
) -> float:
    start, end = window
    if end <= start:
        raise EmptyWindow(f"window [{start}, {end}] is empty")

    busy = sum(
        max(0.0, min(record.end, end) - max(record.start, start))
        for record in report.task_records
        if device in record.devices
    )
    return min(1.0, max(0.0, busy / (end - start)))
