from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any

import numpy as np

from moe_sched.errors import ParseError, SchemaMismatch

from .generator import GeneratorParams, GroundTruth, TraceMode, TraceSet

logger = logging.getLogger("moe_sched.workload")

_METADATA_KEYS = ("layers", "experts", "top_k", "seed")


def _dumps(value: Any) -> str:
    return json.dumps(value, separators=(",", ":"), sort_keys=True)


def save_trace(trace: TraceSet, path: str | Path):
    with Path(path).open("w", encoding="utf-8", newline="\n") as stream:
        stream.write(_dumps(trace.metadata()))
        stream.write("\n")
        for batch, token, selection in zip(
            trace.batch.tolist(),
            trace.token.tolist(),
            trace.selections.tolist(),
            strict=True,
        ):
            stream.write(_dumps({"b": batch, "t": token, "sel": selection}))
            stream.write("\n")


def _parse_line(line: bytes, number: int) -> dict[str, Any]:
    try:
        value = json.loads(line.decode("utf-8"))
    except UnicodeDecodeError as err:
        raise ParseError.invalid_utf8(err, number) from err
    except json.JSONDecodeError as err:
        raise ParseError(number, f"invalid JSON ({err.msg})") from err

    if not isinstance(value, dict):
        raise ParseError(number, "expected a JSON object")
    return value


def _metadata(value: dict[str, Any]) -> dict[str, Any]:
    for key in _METADATA_KEYS:
        if key not in value:
            raise ParseError(1, f"metadata is missing '{key}'")

    for key in ("layers", "experts", "top_k"):
        if not isinstance(value[key], int) or value[key] <= 0:
            raise SchemaMismatch(f"metadata '{key}' must be a positive int")

    return value


def _trace_params(metadata: dict[str, Any]) -> GeneratorParams | None:
    raw = metadata.get("params")
    if raw is None:
        return None
    try:
        return GeneratorParams(**raw)
    except TypeError as err:
        raise SchemaMismatch(f"metadata params: {err}") from err


def _trace_mode(metadata: dict[str, Any]) -> TraceMode | None:
    raw = metadata.get("mode")
    if raw is None:
        return None
    try:
        return TraceMode(raw)
    except ValueError:
        raise SchemaMismatch(f"unknown trace mode '{raw}'") from None


def load_trace(path: str | Path) -> TraceSet:
    batches: list[int] = []
    tokens: list[int] = []
    selections: list[list[list[int]]] = []
    metadata: dict[str, Any] | None = None

    with Path(path).open("rb") as stream:
        for number, line in enumerate(stream, start=1):
            if not line.strip():
                continue

            value = _parse_line(line, number)
            if metadata is None:
                metadata = _metadata(value)
                continue

            try:
                batch, token, selection = value["b"], value["t"], value["sel"]
            except KeyError as err:
                raise ParseError(number, f"missing key {err}") from None

            if not isinstance(batch, int) or not isinstance(token, int):
                raise ParseError(number, "'b' and 't' must be integers")
            if not isinstance(selection, list) or not all(
                isinstance(layer, list)
                and all(isinstance(expert, int) for expert in layer)
                for layer in selection
            ):
                raise ParseError(number, "'sel' must be a list of int lists")

            _check_selection(selection, metadata, number)
            batches.append(batch)
            tokens.append(token)
            selections.append(selection)

    if metadata is None:
        raise ParseError(1, "missing metadata line")

    extra = {
        key: value
        for key, value in metadata.items()
        if key not in (*_METADATA_KEYS, "mode", "params")
    }
    trace = TraceSet(
        num_layers=metadata["layers"],
        experts_per_layer=metadata["experts"],
        top_k=metadata["top_k"],
        batch=np.array(batches, dtype=np.int64),
        token=np.array(tokens, dtype=np.int64),
        selections=np.array(selections, dtype=np.int64).reshape(
            len(selections), metadata["layers"], metadata["top_k"]
        ),
        seed=metadata["seed"],
        mode=_trace_mode(metadata),
        params=_trace_params(metadata),
        extra=extra,
    )
    logger.debug(f"Loaded {trace.num_tokens} tokens from {path}")
    return trace


def _check_selection(
    selection: list[list[int]], metadata: dict[str, Any], number: int
):
    if len(selection) != metadata["layers"]:
        raise SchemaMismatch(
            f"line {number}: {len(selection)} layers, expected "
            f"{metadata['layers']}"
        )

    for layer in selection:
        if len(layer) != metadata["top_k"]:
            raise SchemaMismatch(
                f"line {number}: {len(layer)} experts per layer, expected "
                f"{metadata['top_k']}"
            )
        for expert in layer:
            if not 0 <= expert < metadata["experts"]:
                raise SchemaMismatch(
                    f"line {number}: expert {expert} outside "
                    f"[0, {metadata['experts']})"
                )


def save_truth(truth: GroundTruth, path: str | Path):
    Path(path).write_text(
        json.dumps(truth.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_truth(path: str | Path) -> GroundTruth:
    try:
        raw = json.loads(Path(path).read_bytes().decode("utf-8"))
        return GroundTruth(
            transitions=np.array(raw["transitions"], dtype=np.int64),
            marginals=np.array(raw["marginals"], dtype=float),
            rows=np.array(raw["rows"], dtype=float),
        )
    except UnicodeDecodeError as err:
        raise ParseError.invalid_utf8(err) from err
    except json.JSONDecodeError as err:
        raise ParseError(err.lineno, err.msg) from err
    except (KeyError, TypeError) as err:
        raise SchemaMismatch(f"ground truth: {err}") from err
