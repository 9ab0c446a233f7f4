from __future__ import annotations

from .lowering import build_training_step, lower_backward
from .packing import (
    PackingSample,
    PackingState,
    adjust_packing,
    measure_packing,
    packing_limit,
)
from .pipeline import partition_moe_layer, pipeline_moe_layer
from .policies import (
    PolicyName,
    SchedulerPolicy,
    parse_policy,
    schedule,
)
from .runner import StepOutcome, TrainingRun, run_training, simulate_step
from .step import (
    BackwardWorkload,
    StepLayout,
    build_backward,
    build_forward,
)

__all__ = [
    "BackwardWorkload",
    "PackingSample",
    "PackingState",
    "PolicyName",
    "SchedulerPolicy",
    "StepLayout",
    "StepOutcome",
    "TrainingRun",
    "adjust_packing",
    "build_backward",
    "build_forward",
    "build_training_step",
    "lower_backward",
    "measure_packing",
    "packing_limit",
    "parse_policy",
    "partition_moe_layer",
    "pipeline_moe_layer",
    "run_training",
    "schedule",
    "simulate_step",
]
