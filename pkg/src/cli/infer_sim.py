from __future__ import annotations

import argparse
import logging
from functools import partial
from pathlib import Path
from typing import Any, NamedTuple

from moe_sched import constants
from moe_sched.errors import ConfigError
from moe_sched.infersched import (
    InferenceMode,
    InferenceRun,
    PopularityProfile,
    load_profile,
    normalized_times,
    path_length_sweep,
    simulate_inference,
)
from moe_sched.infersched.runner import ESTIMATING_MODES
from moe_sched.workload import TraceSet, gen_trace, load_trace

from .build_profile import profile_for, training_trace
from .config import (
    InferenceConfig,
    ScenarioConfig,
    add_common_arguments,
    config_from_args,
)
from .jobs import run_jobs
from .output import (
    print_row,
    print_section,
    print_written,
    write_summary,
    write_timeline,
)

logger = logging.getLogger("moe_sched.cli")


class InferSimResult(NamedTuple):
    body: dict[str, Any]
    runs: dict[str, InferenceRun]


def _inference(config: ScenarioConfig) -> InferenceConfig:
    return config.inference or InferenceConfig()


def inference_trace(config: ScenarioConfig) -> TraceSet:
    if config.trace is not None:
        return load_trace(config.trace)
    if config.generator is None:
        raise ConfigError("trace", "set a trace path or a generator section")

    generator = config.generator
    generated = gen_trace(
        generator.params, config.scenario.model, generator.mode
    )
    return generated.trace


def inference_profile(config: ScenarioConfig) -> PopularityProfile | None:
    inference = _inference(config)
    if inference.profile is not None:
        return load_profile(inference.profile)
    if not ESTIMATING_MODES.intersection(inference.modes):
        return None

    if config.generator is None:
        logger.warning(
            "No profile or generator configured; profiling the inference "
            "trace itself"
        )
    return profile_for(config)


def mode_summary(run: InferenceRun) -> dict[str, Any]:
    summary: dict[str, Any] = {
        "median_s": run.median,
        "p95_s": run.p95,
        "inference_times_s": list(run.inference_times),
        "layer_all_to_all_times_s": {
            str(layer): duration
            for layer, duration in run.layer_all_to_all_times.items()
        },
        "estimation_accuracy": None,
        "finetune_rate": None,
    }
    if run.accuracy is not None:
        summary["estimation_accuracy"] = run.accuracy.estimation_accuracy
        summary["finetune_rate"] = run.accuracy.finetune_rate
        summary["layer_accuracy"] = {
            str(layer): value
            for layer, value in run.accuracy.per_layer.items()
        }

    if run.batches and run.mode != InferenceMode.BASELINE:
        summary["first_batch_plans"] = {
            str(layer): plan.to_dict()
            for layer, plan in enumerate(run.batches[0].plans)
        }
    return summary


def simulate(config: ScenarioConfig) -> InferSimResult:
    inference = _inference(config)
    trace = inference_trace(config)
    profile = inference_profile(config)

    jobs = {
        str(mode): partial(
            simulate_inference,
            config.scenario,
            trace,
            mode,
            profile,
            max_packed=inference.max_packed,
            seed=config.seed,
        )
        for mode in dict.fromkeys(inference.modes)
    }
    runs = run_jobs(jobs)

    modes = {name: mode_summary(run) for name, run in runs.items()}
    if InferenceMode.IDEAL in inference.modes:
        normalized = normalized_times(
            {run.mode: run for run in runs.values()}
        )
        for mode, times in normalized.items():
            modes[str(mode)]["normalized_p50"] = times.p50
            modes[str(mode)]["normalized_p95"] = times.p95

    body: dict[str, Any] = {"modes": modes}
    if inference.path_lengths:
        points = path_length_sweep(
            config.scenario,
            training_trace(config),
            trace,
            inference.path_lengths,
            max_packed=inference.max_packed,
            seed=config.seed,
        )
        body["path_length_sweep"] = [point._asdict() for point in points]

    return InferSimResult(body=body, runs=runs)


def write_outputs(
    config: ScenarioConfig, result: InferSimResult
) -> list[Path]:
    out_dir = config.out_dir
    written = [
        write_summary(
            out_dir / constants.INFER_SUMMARY_FILE,
            "infer",
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


def run_infer_sim(args: argparse.Namespace):
    config = config_from_args(args)
    result = simulate(config)

    print_section("infer")
    for name, summary in result.body["modes"].items():
        print_row(
            name,
            {
                "p50": summary.get("normalized_p50", summary["median_s"]),
                "p95": summary.get("normalized_p95", summary["p95_s"]),
                "accuracy": summary["estimation_accuracy"],
                "finetune_rate": summary["finetune_rate"],
            },
        )

    for path in write_outputs(config, result):
        print_written(path)


def register_infer_sim_subcommand(subparsers):
    infer_sim_parser = subparsers.add_parser(
        "infer-sim", help="Simulate inference batches under each scheduler."
    )
    add_common_arguments(infer_sim_parser)
    infer_sim_parser.set_defaults(func=run_infer_sim)
