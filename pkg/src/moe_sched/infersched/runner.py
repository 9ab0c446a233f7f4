from __future__ import annotations

import enum
import logging
from collections import defaultdict
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import replace
from typing import NamedTuple

import numpy as np

from moe_sched import constants, engine
from moe_sched.core import BatchAssignment, Scenario, SimReport
from moe_sched.errors import InvalidSpec, ProfileMissing, Violation
from moe_sched.trainsched.metrics import all_to_all_windows, percentile
from moe_sched.workload import TraceSet

from .allocate import AllocationPlan, allocate, identity_plan, route_tokens
from .estimate import estimate_popularity
from .profile import PopularityProfile, build_profile
from .step import LayerSchedule, build_inference_step, expert_compute_times
from .twophase import (
    AccuracySummary,
    PhaseTwoOutcome,
    accuracy,
    actual_popularity,
    top_set,
    two_phase_step,
)

logger = logging.getLogger("moe_sched.infersched")


class InferenceMode(enum.StrEnum):
    BASELINE = "Baseline"
    IDEAL = "Ideal"
    LINA = "Lina"
    LINA_NO_ESTIMATION = "LinaNoEstimation"
    LINA_NO_FINETUNE = "LinaNoFinetune"


ESTIMATING_MODES = frozenset(
    (InferenceMode.LINA, InferenceMode.LINA_NO_FINETUNE)
)
SCHEDULING_MODES = ESTIMATING_MODES | {InferenceMode.LINA_NO_ESTIMATION}


class BatchOutcome(NamedTuple):
    batch: int
    inference_time: float
    outcomes: tuple[PhaseTwoOutcome, ...]
    plans: tuple[AllocationPlan, ...]


class InferenceRun(NamedTuple):
    mode: InferenceMode
    report: SimReport
    batches: tuple[BatchOutcome, ...]
    accuracy: AccuracySummary | None
    layer_all_to_all_times: dict[int, float]

    @property
    def inference_times(self) -> tuple[float, ...]:
        return tuple(batch.inference_time for batch in self.batches)

    @property
    def median(self) -> float:
        return percentile(self.inference_times, 50)

    @property
    def p95(self) -> float:
        return percentile(self.inference_times, 95)


class NormalizedTimes(NamedTuple):
    p50: float
    p95: float


class PathLengthPoint(NamedTuple):
    path_length: int
    estimation_accuracy: float
    finetune_rate: float


def origin_devices(num_tokens: int, num_devices: int) -> np.ndarray:
    """Contiguous blocks of the batch per device."""
    return np.arange(num_tokens, dtype=np.int64) * num_devices // num_tokens


def balanced_selections(
    num_tokens: int, num_layers: int, num_experts: int, top_k: int
) -> np.ndarray:
    """Gating that always spreads tokens evenly: token j picks j, j+1, ..."""
    columns = (
        np.arange(num_tokens)[:, None] + np.arange(top_k)[None, :]
    ) % num_experts
    return np.broadcast_to(
        columns[:, None, :], (num_tokens, num_layers, top_k)
    ).astype(np.int64)


def _check_inputs(
    scenario: Scenario,
    trace: TraceSet,
    profile: PopularityProfile | None,
    mode: InferenceMode,
):
    model = scenario.model
    violations = []
    if trace.num_layers != model.num_layers:
        violations.append(
            Violation("trace.layers", f"must equal {model.num_layers}")
        )
    if trace.experts_per_layer != model.experts_per_layer:
        violations.append(
            Violation("trace.experts", f"must equal {model.experts_per_layer}")
        )
    if trace.top_k != model.gating_top_k:
        violations.append(
            Violation("trace.top_k", f"must equal {model.gating_top_k}")
        )
    if violations:
        raise InvalidSpec(violations)

    if mode in ESTIMATING_MODES and profile is None:
        raise ProfileMissing(f"{mode} needs a popularity profile")
    if profile is not None and (
        profile.num_layers != model.num_layers
        or profile.experts_per_layer != model.experts_per_layer
    ):
        raise InvalidSpec(
            [Violation("profile", "does not match the model's layers")]
        )


def _first_scheduled_layer(
    mode: InferenceMode,
    profile: PopularityProfile | None,
    num_layers: int,
    first_layer: int | None = None,
) -> int:
    if mode not in SCHEDULING_MODES:
        return num_layers
    earliest = (
        profile.first_layer
        if profile is not None
        else constants.DEFAULT_PATH_LENGTH
    )
    return earliest if first_layer is None else max(earliest, first_layer)


def _layer_schedules(
    scenario: Scenario,
    selections: np.ndarray,
    profile: PopularityProfile | None,
    mode: InferenceMode,
    *,
    max_packed: int,
    seed: Sequence[int],
    first_layer: int | None = None,
) -> tuple[list[LayerSchedule], list[PhaseTwoOutcome]]:
    cluster, model, cost = scenario
    num_devices = cluster.num_devices
    num_experts = model.experts_per_layer
    tokens = selections.shape[0]
    tokens_per_device = -(-tokens // num_devices)

    origins = origin_devices(tokens, num_devices)
    paths = selections[:, :, 0]
    static = identity_plan(num_experts, num_devices)
    first = _first_scheduled_layer(
        mode, profile, model.num_layers, first_layer
    )

    schedules: list[LayerSchedule] = []
    outcomes: list[PhaseTwoOutcome] = []
    previous_ffn = 0.0
    for layer in range(model.num_layers):
        assignment = BatchAssignment(origins, selections[:, layer, :])
        counts = assignment.origin_expert_counts(num_devices, num_experts)
        layer_seed = [*seed, layer]

        plan = static
        blocking = residual = 0.0
        reports = False
        if layer >= first:
            # Phase one overlaps everything between the previous gate and
            # this layer's dispatch.
            window = previous_ffn + tokens_per_device * (
                cost.combine_cost_per_token
                + cost.attention_cost_per_token
                + cost.gate_cost_per_token
            )
            match mode:
                case InferenceMode.LINA:
                    estimate = estimate_popularity(
                        profile, paths, layer, model.gating_top_k
                    )
                    estimated = allocate(
                        estimate.popularity,
                        num_devices,
                        max_packed=max_packed,
                        seed=layer_seed,
                    )
                    outcome = two_phase_step(
                        estimated,
                        assignment,
                        model.gating_top_k,
                        cost,
                        layer=layer,
                        max_packed=max_packed,
                        seed=layer_seed,
                    )
                    outcomes.append(outcome)
                    plan = outcome.plan_used
                    blocking = outcome.overhead_charged
                    residual = max(0.0, cost.sched_phase_cost - window)
                    reports = True

                case InferenceMode.LINA_NO_FINETUNE:
                    estimate = estimate_popularity(
                        profile, paths, layer, model.gating_top_k
                    )
                    plan = allocate(
                        estimate.popularity,
                        num_devices,
                        max_packed=max_packed,
                        seed=layer_seed,
                    )
                    outcomes.append(
                        _unchecked_outcome(plan, assignment, layer)
                    )
                    residual = max(0.0, cost.sched_phase_cost - window)

                case InferenceMode.LINA_NO_ESTIMATION:
                    plan = allocate(
                        actual_popularity(assignment, num_experts),
                        num_devices,
                        max_packed=max_packed,
                        seed=layer_seed,
                    )
                    blocking = cost.sched_phase_cost
                    reports = True

        schedule = LayerSchedule(
            plan=plan,
            routed=route_tokens(plan, counts),
            blocking=blocking,
            residual=residual,
            reports=reports,
        )
        schedules.append(schedule)
        previous_ffn = float(expert_compute_times(scenario, schedule).max())

    return schedules, outcomes


def _unchecked_outcome(
    plan: AllocationPlan, assignment: BatchAssignment, layer: int
) -> PhaseTwoOutcome:
    size = min(2 * assignment.top_k, plan.num_experts)
    return PhaseTwoOutcome(
        layer=layer,
        estimated_top=top_set(plan.popularity, size),
        actual_top=top_set(
            actual_popularity(assignment, plan.num_experts), size
        ),
        plan_used=plan,
        overhead_charged=0.0,
    )


def simulate_inference(
    scenario: Scenario,
    trace: TraceSet,
    mode: InferenceMode,
    profile: PopularityProfile | None = None,
    *,
    max_packed: int = constants.DEFAULT_MAX_PACKED,
    seed: int = 0,
    first_layer: int | None = None,
) -> InferenceRun:
    """Run every batch of `trace` through the engine under `mode`.

    The returned report is the first batch's, carrying every batch's
    inference time and the estimation accuracy of the run. `first_layer`
    delays scheduling past the profile's first estimable layer.
    """
    _check_inputs(scenario, trace, profile, mode)
    num_devices = scenario.cluster.num_devices

    batches: list[BatchOutcome] = []
    reports: list[SimReport] = []
    for batch in trace.batch_ids:
        selections = trace.batch_selections(batch)
        if mode == InferenceMode.IDEAL:
            tokens, layers = selections.shape[:2]
            selections = balanced_selections(
                tokens, layers, trace.experts_per_layer, trace.top_k
            )

        schedules, outcomes = _layer_schedules(
            scenario,
            selections,
            profile,
            mode,
            max_packed=max_packed,
            seed=(seed, batch),
            first_layer=first_layer,
        )
        workload = build_inference_step(
            scenario, schedules, -(-selections.shape[0] // num_devices)
        )
        report = engine.run(workload)
        reports.append(report)
        batches.append(
            BatchOutcome(
                batch=batch,
                inference_time=report.step_time,
                outcomes=tuple(outcomes),
                plans=tuple(schedule.plan for schedule in schedules),
            )
        )

    summary = None
    if mode in ESTIMATING_MODES:
        summary = accuracy(
            outcome for batch in batches for outcome in batch.outcomes
        )

    first = reports[0] if reports else SimReport()
    report = replace(
        first,
        inference_times=tuple(batch.inference_time for batch in batches),
        estimation_accuracy=summary.estimation_accuracy if summary else None,
        finetune_rate=summary.finetune_rate if summary else None,
        all_to_all_times=tuple(
            window.duration for window in all_to_all_windows(first)
        ),
    )
    run = InferenceRun(
        mode=mode,
        report=report,
        batches=tuple(batches),
        accuracy=summary,
        layer_all_to_all_times=layer_all_to_all_times(reports),
    )
    logger.info(
        f"{mode}: {len(batches)} batches, median {run.median:.6f}s, "
        f"p95 {run.p95:.6f}s"
    )
    return run


def layer_all_to_all_times(reports: Iterable[SimReport]) -> dict[int, float]:
    """Mean summed token-exchange time per layer over all batches."""
    totals: defaultdict[int, list[float]] = defaultdict(list)
    for report in reports:
        per_layer: defaultdict[int, float] = defaultdict(float)
        for window in all_to_all_windows(report):
            if window.layer is not None:
                per_layer[window.layer] += window.duration
        for layer, duration in per_layer.items():
            totals[layer].append(duration)

    return {
        layer: sum(durations) / len(durations)
        for layer, durations in sorted(totals.items())
    }


def normalized_times(
    runs: Mapping[InferenceMode, InferenceRun],
) -> dict[InferenceMode, NormalizedTimes]:
    """p50 and p95 of every mode over the Ideal median."""
    if InferenceMode.IDEAL not in runs:
        raise InvalidSpec([Violation("modes", "Ideal is needed to normalize")])

    reference = runs[InferenceMode.IDEAL].median
    if reference <= 0:
        raise InvalidSpec([Violation("Ideal", "median time must be > 0")])

    return {
        mode: NormalizedTimes(run.median / reference, run.p95 / reference)
        for mode, run in runs.items()
    }


def path_length_sweep(
    scenario: Scenario,
    training_trace: TraceSet,
    inference_trace: TraceSet,
    path_lengths: Sequence[int],
    *,
    max_packed: int = constants.DEFAULT_MAX_PACKED,
    seed: int = 0,
) -> list[PathLengthPoint]:
    """Accuracy and finetune rate per path length.

    Every length is scored on the same layers, those the longest can
    estimate.
    """
    if not path_lengths:
        return []

    first_layer = max(path_lengths)
    points = []
    for path_length in path_lengths:
        profile = build_profile(training_trace, path_length)
        run = simulate_inference(
            scenario,
            inference_trace,
            InferenceMode.LINA,
            profile,
            max_packed=max_packed,
            seed=seed,
            first_layer=first_layer,
        )
        summary = run.accuracy or AccuracySummary(0.0, 0.0, {})
        points.append(
            PathLengthPoint(
                path_length=path_length,
                estimation_accuracy=summary.estimation_accuracy,
                finetune_rate=summary.finetune_rate,
            )
        )
    return points
