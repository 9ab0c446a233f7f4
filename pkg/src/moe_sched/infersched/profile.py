from __future__ import annotations

import json
import logging
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from moe_sched import constants
from moe_sched.errors import (
    InvalidSpec,
    ParseError,
    ProfileMissing,
    SchemaMismatch,
    TraceTooShort,
    Violation,
)
from moe_sched.workload import TraceSet

logger = logging.getLogger("moe_sched.infersched")

type SamplePath = tuple[int, ...]


@dataclass(frozen=True, eq=False)
class PopularityProfile:
    """Next-layer expert distributions keyed by sample path.

    `distributions[target][path]` is the distribution over experts of layer
    `target` for tokens whose top-1 experts over the layers just before it
    were `path`. Every suffix length from 1 to `path_length` is stored so
    unseen paths can back off.
    """

    path_length: int
    num_layers: int
    experts_per_layer: int
    marginals: np.ndarray
    distributions: Mapping[int, Mapping[SamplePath, np.ndarray]] = field(
        default_factory=dict
    )

    @property
    def first_layer(self) -> int:
        return self.path_length

    def layers(self) -> range:
        return range(self.first_layer, self.num_layers)

    def lookup(self, target: int, path: SamplePath) -> np.ndarray:
        """Distribution for the longest known suffix of `path`, else the
        layer marginal."""
        if target not in self.distributions:
            raise ProfileMissing(f"profile has no entries for layer {target}")

        known = self.distributions[target]
        for start in range(len(path)):
            suffix = path[start:]
            if suffix in known:
                return known[suffix]
        return self.marginals[target]


def _normalized(counts: np.ndarray) -> np.ndarray:
    totals = counts.sum(axis=-1, keepdims=True)
    return counts / np.where(totals > 0, totals, 1)


def build_profile(
    trace: TraceSet, path_length: int = constants.DEFAULT_PATH_LENGTH
) -> PopularityProfile:
    if path_length < 1:
        raise InvalidSpec([Violation("path_length", "must be >= 1")])
    if trace.num_layers < path_length + 1:
        raise TraceTooShort(
            f"path length {path_length} needs {path_length + 1} layers, "
            f"trace has {trace.num_layers}"
        )

    experts = trace.experts_per_layer
    paths = trace.paths()

    marginals = np.stack(
        [
            np.bincount(paths[:, layer], minlength=experts)
            for layer in range(trace.num_layers)
        ]
    ).astype(float)
    marginals = _normalized(marginals)

    distributions: dict[int, dict[SamplePath, np.ndarray]] = {}
    for target in range(path_length, trace.num_layers):
        entries: dict[SamplePath, np.ndarray] = {}
        for length in range(1, path_length + 1):
            history = paths[:, target - length : target]
            if not len(history):
                continue
            unique, inverse = np.unique(history, axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
            counts = np.bincount(
                inverse * experts + paths[:, target],
                minlength=len(unique) * experts,
            ).reshape(len(unique), experts)
            for row, distribution in zip(
                unique.tolist(), _normalized(counts.astype(float)), strict=True
            ):
                entries[tuple(row)] = distribution
        distributions[target] = entries

    logger.info(
        f"Built profile with path length {path_length} over "
        f"{trace.num_tokens} tokens"
    )
    return PopularityProfile(
        path_length=path_length,
        num_layers=trace.num_layers,
        experts_per_layer=experts,
        marginals=marginals,
        distributions=distributions,
    )


def profile_to_dict(profile: PopularityProfile) -> dict[str, Any]:
    entries = []
    for target in sorted(profile.distributions):
        known = profile.distributions[target]
        for path in sorted(known, key=lambda item: (len(item), item)):
            distribution = known[path]
            entries.append(
                {
                    "layer": target,
                    "path": list(path),
                    "dist": {
                        str(expert): float(distribution[expert])
                        for expert in np.flatnonzero(distribution).tolist()
                    },
                }
            )

    return {
        "l": profile.path_length,
        "layers": profile.num_layers,
        "experts": profile.experts_per_layer,
        "marginals": profile.marginals.tolist(),
        "paths": entries,
    }


def profile_from_dict(raw: Mapping[str, Any]) -> PopularityProfile:
    try:
        path_length = int(raw["l"])
        num_layers = int(raw["layers"])
        experts = int(raw["experts"])
        marginals = np.array(raw["marginals"], dtype=float)

        distributions: dict[int, dict[SamplePath, np.ndarray]] = {
            target: {} for target in range(path_length, num_layers)
        }
        for entry in raw["paths"]:
            distribution = np.zeros(experts)
            for expert, probability in entry["dist"].items():
                distribution[int(expert)] = probability
            distributions[int(entry["layer"])][tuple(entry["path"])] = (
                distribution
            )
    except (KeyError, TypeError, ValueError, IndexError) as err:
        raise SchemaMismatch(f"profile: {err}") from err

    if marginals.shape != (num_layers, experts):
        raise SchemaMismatch(
            f"profile marginals shape {marginals.shape}, expected "
            f"{(num_layers, experts)}"
        )

    return PopularityProfile(
        path_length=path_length,
        num_layers=num_layers,
        experts_per_layer=experts,
        marginals=marginals,
        distributions=distributions,
    )


def save_profile(profile: PopularityProfile, path: str | Path):
    Path(path).write_text(
        json.dumps(profile_to_dict(profile), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_profile(path: str | Path) -> PopularityProfile:
    source = Path(path)
    if not source.exists():
        raise ProfileMissing(f"no profile at {source}")

    try:
        raw = json.loads(source.read_bytes().decode("utf-8"))
    except UnicodeDecodeError as err:
        raise ParseError.invalid_utf8(err) from err
    except json.JSONDecodeError as err:
        raise ParseError(err.lineno, err.msg) from err

    return profile_from_dict(raw)
