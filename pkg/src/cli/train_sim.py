from __future__ import annotations

import argparse
from functools import partial
from pathlib import Path
from typing import Any, NamedTuple

from moe_sched import constants
from moe_sched.core import Phase
from moe_sched.trainsched import (
    PackingState,
    PolicyName,
    SchedulerPolicy,
    TrainingRun,
    packing_limit,
    run_training,
)
from moe_sched.trainsched.metrics import (
    compute_utilization,
    partition_overhead,
    percentile,
    slowdown_factors,
)
from moe_sched.trainsched.sweeps import contention_sweep, partition_sweep

from .config import ScenarioConfig, add_common_arguments, config_from_args
from .jobs import run_jobs
from .output import (
    print_row,
    print_section,
    print_written,
    write_summary,
    write_timeline,
)


class TrainSimResult(NamedTuple):
    body: dict[str, Any]
    runs: dict[str, TrainingRun]


def _packing(config: ScenarioConfig) -> PackingState | None:
    training = config.require_training()
    if not training.packing.enabled:
        return None

    cluster, model, _ = config.scenario
    ceiling = training.packing.max_experts_per_device
    return PackingState(
        max_experts_per_device=packing_limit(model, cluster, ceiling),
        warmup_steps=training.packing.warmup_steps,
        cadence=training.packing.cadence,
    )


def _distribution(values: tuple[float, ...]) -> dict[str, float]:
    return {
        "median": percentile(values, 50),
        "p95": percentile(values, 95),
        "max": max(values, default=0.0),
    }


def policy_summary(
    run: TrainingRun, config: ScenarioConfig, baseline: float | None
) -> dict[str, Any]:
    report = run.report
    slowdowns = slowdown_factors(report)
    layer_times = {
        str(phase): list(report.moe_layer_times.get(phase, ()))
        for phase in (Phase.FORWARD, Phase.BACKWARD)
    }
    return {
        "step_time_s": report.step_time,
        "mean_step_time_s": run.mean_step_time,
        "speedup_vs_baseline": (
            baseline / run.mean_step_time
            if baseline and run.mean_step_time > 0
            else None
        ),
        "all_to_all_times_s": list(report.all_to_all_times),
        "slowdown": _distribution(slowdowns),
        "slowdown_factors": list(slowdowns),
        "moe_layer_times_s": layer_times,
        "moe_layer_p95_s": {
            phase: percentile(times, 95)
            for phase, times in layer_times.items()
        },
        "pipelining_efficiency": report.pipelining_efficiency,
        "compute_utilization": compute_utilization(report),
        "partition_overhead": partition_overhead(
            report, config.scenario.cluster
        ),
        "packing_trajectory": list(run.packing_trajectory),
    }


def simulate(config: ScenarioConfig) -> TrainSimResult:
    training = config.require_training()
    packing = _packing(config)

    jobs = {
        str(name): partial(
            run_training,
            config.scenario,
            training.tokens_per_device,
            SchedulerPolicy(
                name=name,
                partition_bytes=training.partition_bytes,
                bucket_bytes=training.bucket_bytes,
            ),
            steps=training.steps,
            packing=packing,
        )
        for name in dict.fromkeys(training.policies)
    }
    runs = run_jobs(jobs)

    baseline = runs.get(str(PolicyName.BASELINE))
    baseline_time = baseline.mean_step_time if baseline else None
    body: dict[str, Any] = {
        "policies": {
            name: policy_summary(run, config, baseline_time)
            for name, run in runs.items()
        }
    }

    if training.contention_samples > 0:
        summary = contention_sweep(config.seed, training.contention_samples)
        body["contention"] = _distribution(summary.samples)

    if training.partition_sweep_mb:
        points = partition_sweep(
            config.scenario,
            training.tokens_per_device,
            [int(size * constants.MB) for size in training.partition_sweep_mb],
        )
        body["partition_sweep"] = [point._asdict() for point in points]

    return TrainSimResult(body=body, runs=runs)


def write_outputs(
    config: ScenarioConfig, result: TrainSimResult
) -> list[Path]:
    out_dir = config.out_dir
    written = [
        write_summary(
            out_dir / constants.TRAIN_SUMMARY_FILE,
            "train",
            config.config_hash,
            result.body,
        )
    ]
    if config.output.timelines:
        for name, run in result.runs.items():
            written.append(
                write_timeline(
                    out_dir / f"timeline_{name}.csv",
                    run.report,
                    config.scenario.cluster,
                )
            )
    return written


def run_train_sim(args: argparse.Namespace):
    config = config_from_args(args)
    result = simulate(config)

    print_section("train")
    for name, summary in result.body["policies"].items():
        print_row(
            name,
            {
                "step_time_s": summary["mean_step_time_s"],
                "speedup": summary["speedup_vs_baseline"],
                "slowdown_median": summary["slowdown"]["median"],
                "pipelining": summary["pipelining_efficiency"],
            },
        )

    for path in write_outputs(config, result):
        print_written(path)


def register_train_sim_subcommand(subparsers):
    train_sim_parser = subparsers.add_parser(
        "train-sim", help="Simulate training steps under each policy."
    )
    add_common_arguments(train_sim_parser)
    train_sim_parser.set_defaults(func=run_train_sim)
