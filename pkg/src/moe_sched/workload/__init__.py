from __future__ import annotations

from .generator import (
    GeneratedTrace,
    GeneratorParams,
    GroundTruth,
    TraceMode,
    TraceSet,
    gen_trace,
    ground_truth,
)
from .pattern import expert_popularity, measure_pattern, skew_ratio
from .tracefile import load_trace, load_truth, save_trace, save_truth

__all__ = [
    "GeneratedTrace",
    "GeneratorParams",
    "GroundTruth",
    "TraceMode",
    "TraceSet",
    "expert_popularity",
    "gen_trace",
    "ground_truth",
    "load_trace",
    "load_truth",
    "measure_pattern",
    "save_trace",
    "save_truth",
    "skew_ratio",
]
