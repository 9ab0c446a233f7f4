from __future__ import annotations

import argparse
from pathlib import Path

from moe_sched import constants
from moe_sched.workload import gen_trace, save_trace, save_truth

from .config import ScenarioConfig, add_common_arguments, config_from_args
from .output import print_written


def generate(config: ScenarioConfig) -> list[Path]:
    generator = config.require_generator()
    generated = gen_trace(
        generator.params, config.scenario.model, generator.mode
    )

    out_dir = config.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    trace_path = out_dir / constants.TRACE_FILE
    truth_path = out_dir / constants.TRUTH_FILE
    save_trace(generated.trace, trace_path)
    save_truth(generated.truth, truth_path)
    return [trace_path, truth_path]


def run_gen_trace(args: argparse.Namespace):
    for path in generate(config_from_args(args)):
        print_written(path)


def register_gen_trace_subcommand(subparsers):
    gen_trace_parser = subparsers.add_parser(
        "gen-trace", help="Generate a synthetic expert-selection trace."
    )
    add_common_arguments(gen_trace_parser)
    gen_trace_parser.set_defaults(func=run_gen_trace)
