from __future__ import annotations

import argparse
import csv
import hashlib
import json
from pathlib import Path
from typing import Any, NamedTuple

from moe_sched import constants
from moe_sched.errors import ParseError, SchemaMismatch

from .output import print_row, print_section, print_written

REPORT_HEADER = ("kind", "source", "name", "metric", "value")

_METRICS = {
    "train": (
        ("policies", "mean_step_time_s"),
        ("policies", "speedup_vs_baseline"),
        ("policies", "pipelining_efficiency"),
        ("policies", "compute_utilization"),
    ),
    "infer": (
        ("modes", "median_s"),
        ("modes", "p95_s"),
        ("modes", "normalized_p50"),
        ("modes", "normalized_p95"),
        ("modes", "estimation_accuracy"),
        ("modes", "finetune_rate"),
    ),
}


class ReportRow(NamedTuple):
    kind: str
    source: str
    name: str
    metric: str
    value: float | None


def load_summary(path: str | Path) -> dict[str, Any]:
    source = Path(path)
    try:
        summary = json.loads(source.read_bytes().decode("utf-8"))
    except UnicodeDecodeError as err:
        raise ParseError.invalid_utf8(err) from err
    except json.JSONDecodeError as err:
        raise ParseError(err.lineno, f"{source}: {err.msg}") from err

    if not isinstance(summary, dict):
        raise SchemaMismatch(f"{source}: summary must be a JSON object")

    version = summary.get("schema_version")
    if version != constants.SUMMARY_SCHEMA_VERSION:
        raise SchemaMismatch(
            f"{source}: schema version {version}, expected "
            f"{constants.SUMMARY_SCHEMA_VERSION}"
        )
    if summary.get("kind") not in _METRICS:
        raise SchemaMismatch(f"{source}: unknown kind {summary.get('kind')}")
    return summary


def inputs_hash(summaries: list[dict[str, Any]]) -> str:
    canonical = json.dumps(summaries, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def report_rows(source: str, summary: dict[str, Any]) -> list[ReportRow]:
    kind = summary["kind"]
    rows = []
    for group, metric in _METRICS[kind]:
        for name, values in sorted(summary.get(group, {}).items()):
            rows.append(
                ReportRow(kind, source, name, metric, values.get(metric))
            )
    return rows


def build_report(
    paths: list[str], out_dir: Path
) -> tuple[list[ReportRow], str]:
    summaries = [load_summary(path) for path in paths]
    rows = [
        row
        for path, summary in zip(paths, summaries, strict=True)
        for row in report_rows(Path(path).name, summary)
    ]
    rows.sort(key=lambda row: row.kind != "train")

    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / constants.REPORT_FILE).open(
        "w", encoding="utf-8", newline=""
    ) as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(REPORT_HEADER)
        for row in rows:
            writer.writerow(
                (*row[:4], "" if row.value is None else repr(row.value))
            )

    return rows, inputs_hash(summaries)


def run_report(args: argparse.Namespace):
    out_dir = Path(args.out or ".")
    rows, digest = build_report(args.summaries, out_dir)

    for kind in _METRICS:
        section = [row for row in rows if row.kind == kind]
        if not section:
            continue

        print_section(kind)
        names: dict[tuple[str, str], dict[str, Any]] = {}
        for row in section:
            names.setdefault((row.source, row.name), {})[row.metric] = row.value
        for (source, name), metrics in names.items():
            print_row(f"{source}:{name}", metrics)

    print_written(out_dir / constants.REPORT_FILE)
    print(f"sha256 {digest}")


def register_report_subcommand(subparsers):
    report_parser = subparsers.add_parser(
        "report", help="Compare summary files from earlier runs."
    )
    report_parser.add_argument(
        "summaries", nargs="+", help="Summary JSON files"
    )
    report_parser.add_argument(
        "--out", default=None, help="Directory for report.csv"
    )
    report_parser.add_argument(
        "--verbose", "-v", action="count", default=0, help="Verbose output"
    )
    report_parser.set_defaults(func=run_report)
