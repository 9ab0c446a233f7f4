from __future__ import annotations

from .allocate import (
    AllocationPlan,
    RoutedTokens,
    allocate,
    first_fit_decreasing,
    home_device,
    identity_plan,
    route_tokens,
)
from .estimate import Estimate, estimate_popularity
from .profile import (
    PopularityProfile,
    build_profile,
    load_profile,
    profile_from_dict,
    profile_to_dict,
    save_profile,
)
from .runner import (
    InferenceMode,
    InferenceRun,
    NormalizedTimes,
    PathLengthPoint,
    normalized_times,
    path_length_sweep,
    simulate_inference,
)
from .step import LayerSchedule, build_inference_step
from .twophase import (
    AccuracySummary,
    PhaseTwoOutcome,
    accuracy,
    top_set,
    two_phase_step,
)

__all__ = [
    "AccuracySummary",
    "AllocationPlan",
    "Estimate",
    "InferenceMode",
    "InferenceRun",
    "LayerSchedule",
    "NormalizedTimes",
    "PathLengthPoint",
    "PhaseTwoOutcome",
    "PopularityProfile",
    "RoutedTokens",
    "accuracy",
    "allocate",
    "build_inference_step",
    "build_profile",
    "estimate_popularity",
    "first_fit_decreasing",
    "home_device",
    "identity_plan",
    "load_profile",
    "normalized_times",
    "path_length_sweep",
    "profile_from_dict",
    "profile_to_dict",
    "route_tokens",
    "save_profile",
    "simulate_inference",
    "top_set",
    "two_phase_step",
]
