from __future__ import annotations

import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any

from colorist import BrightColor, Color

from moe_sched import constants
from moe_sched.core import ClusterSpec, SimReport
from moe_sched.engine import device_label


def _label(name: str):
    return f"{Color.MAGENTA}{name}{Color.OFF}"


def _name(name: str):
    return f"{Color.YELLOW}{name}{Color.OFF}"


def _value(value: str):
    return f"{Color.CYAN}{value}{Color.OFF}"


def _section(name: str):
    return f"{BrightColor.BLUE}{name}{BrightColor.OFF}"


def _good(message: str):
    return f"{BrightColor.GREEN}{message}{BrightColor.OFF}"


def _error(message: str):
    return f"{Color.RED}{message}{Color.OFF}"


def configure_logging(verbose: int):
    match verbose:
        case 0:
            level = logging.WARNING
        case 1:
            level = logging.INFO
        case _:
            level = logging.DEBUG
    logging.basicConfig(
        level=level, format="%(levelname)s %(name)s: %(message)s"
    )


def print_section(title: str):
    print(_section(title))


def print_row(name: str, metrics: dict[str, Any]):
    cells = "  ".join(
        f"{_label(key)}={_value(_format(value))}"
        for key, value in metrics.items()
    )
    print(f"  {_name(name)}  {cells}")


def print_written(path: Path):
    print(_good(f"wrote {path}"))


def print_failure(context: str, err: BaseException):
    print(_error(f"{context}: {err}"), file=sys.stderr)


def _format(value: Any) -> str:
    match value:
        case None:
            return "-"
        case float():
            return f"{value:.6g}"
        case _:
            return str(value)


def dump_json(value: Any) -> str:
    return json.dumps(value, indent=2, sort_keys=True) + "\n"


def write_summary(
    path: Path, kind: str, config_hash: str, body: dict[str, Any]
) -> Path:
    """Key-sorted summary with schema version; no timestamps."""
    path.parent.mkdir(parents=True, exist_ok=True)
    summary = {
        "schema_version": constants.SUMMARY_SCHEMA_VERSION,
        "kind": kind,
        "config_hash": config_hash,
        **body,
    }
    path.write_text(dump_json(summary), encoding="utf-8")
    return path


def write_timeline(path: Path, report: SimReport, cluster: ClusterSpec) -> Path:
    """Ops and compute tasks as CSV rows ordered by start time."""
    rows = [
        (
            record.start,
            record.op_id,
            str(record.kind),
            record.devices,
            record.end,
            record.isolated,
        )
        for record in report.op_records
    ]
    rows.extend(
        (
            record.start,
            record.task_id,
            f"compute:{record.tag}",
            device_label(record.devices, cluster),
            record.end,
            record.end - record.start,
        )
        for record in report.task_records
    )
    rows.sort(key=lambda row: (row[0], row[1]))

    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as stream:
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(constants.TIMELINE_HEADER)
        for start, item_id, kind, devices, end, isolated in rows:
            writer.writerow(
                (
                    item_id,
                    kind,
                    devices,
                    f"{start:.9f}",
                    f"{end:.9f}",
                    f"{isolated:.9f}",
                )
            )
    return path
