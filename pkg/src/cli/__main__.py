import argparse
import sys
from collections.abc import Sequence

from moe_sched.errors import MoeSchedError

from .build_profile import register_build_profile_subcommand
from .gen_trace import register_gen_trace_subcommand
from .infer_sim import register_infer_sim_subcommand
from .output import configure_logging, print_failure
from .report import register_report_subcommand
from .train_sim import register_train_sim_subcommand


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="moe-sched")
    subparsers = parser.add_subparsers(dest="command", required=True)

    register_gen_trace_subcommand(subparsers)
    register_build_profile_subcommand(subparsers)
    register_train_sim_subcommand(subparsers)
    register_infer_sim_subcommand(subparsers)
    register_report_subcommand(subparsers)

    return parser


def main(argv: Sequence[str] | None = None):
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)

    try:
        args.func(args)
    except (MoeSchedError, OSError) as err:
        context = getattr(args, "config", None) or args.command
        print_failure(f"{args.command} ({context})", err)
        sys.exit(1)


if __name__ == "__main__":
    main()
