from __future__ import annotations

import argparse
import logging
from dataclasses import replace
from pathlib import Path

from moe_sched import constants
from moe_sched.errors import ConfigError
from moe_sched.infersched import PopularityProfile, build_profile, save_profile
from moe_sched.workload import TraceMode, TraceSet, gen_trace, load_trace

from .config import ScenarioConfig, add_common_arguments, config_from_args
from .output import print_written

logger = logging.getLogger("moe_sched.cli")


def training_trace(config: ScenarioConfig) -> TraceSet:
    """The config's trace file, else a generated TrainingBalanced trace."""
    if config.trace is not None:
        return load_trace(config.trace)

    if config.generator is None:
        raise ConfigError("trace", "set a trace path or a generator section")

    tokens = (
        config.inference.profile_tokens
        if config.inference is not None
        else config.generator.params.tokens_per_batch
    )
    params = replace(
        config.generator.params, tokens_per_batch=tokens, num_batches=1
    )
    logger.info(f"Generating a {tokens} token training trace for profiling")
    generated = gen_trace(
        params, config.scenario.model, TraceMode.TRAINING_BALANCED
    )
    return generated.trace


def profile_for(config: ScenarioConfig) -> PopularityProfile:
    path_length = (
        config.inference.path_length
        if config.inference is not None
        else constants.DEFAULT_PATH_LENGTH
    )
    return build_profile(training_trace(config), path_length)


def write_profile(config: ScenarioConfig) -> Path:
    path = config.out_dir / constants.PROFILE_FILE
    path.parent.mkdir(parents=True, exist_ok=True)
    save_profile(profile_for(config), path)
    return path


def run_build_profile(args: argparse.Namespace):
    print_written(write_profile(config_from_args(args)))


def register_build_profile_subcommand(subparsers):
    build_profile_parser = subparsers.add_parser(
        "build-profile",
        help="Build a sample-path popularity profile from a training trace.",
    )
    add_common_arguments(build_profile_parser)
    build_profile_parser.set_defaults(func=run_build_profile)
