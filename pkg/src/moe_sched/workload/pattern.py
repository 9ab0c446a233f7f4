from __future__ import annotations

import numpy as np

from moe_sched.errors import InvalidSpec, TraceTooShort, Violation

from .generator import TraceSet


def transition_counts(trace: TraceSet, layer: int) -> np.ndarray:
    """Top-1 expert pair counts between `layer` and the next layer."""
    experts = trace.experts_per_layer
    paths = trace.paths()
    flat = paths[:, layer] * experts + paths[:, layer + 1]
    return np.bincount(flat, minlength=experts * experts).reshape(
        experts, experts
    )


def measure_pattern(trace: TraceSet, k: int) -> tuple[float, ...]:
    """Per layer, the share of tokens whose next-layer expert is among the
    top-k next experts of the tokens that picked the same expert."""
    if trace.num_layers < 2:
        raise TraceTooShort(
            f"pattern needs 2 layers, trace has {trace.num_layers}"
        )
    if k <= 0:
        raise InvalidSpec([Violation("k", "must be > 0")])
    if not trace.num_tokens:
        return tuple(0.0 for _ in range(trace.num_layers - 1))

    ratios = []
    for layer in range(trace.num_layers - 1):
        counts = transition_counts(trace, layer)
        local_top = np.sort(counts, axis=1)[:, -k:]
        ratios.append(float(local_top.sum() / trace.num_tokens))
    return tuple(ratios)


def expert_popularity(trace: TraceSet, layer: int) -> np.ndarray:
    """Share of all selection slots each expert received at `layer`."""
    counts = np.bincount(
        trace.selections[:, layer, :].ravel(),
        minlength=trace.experts_per_layer,
    )
    total = counts.sum()
    return counts / total if total else counts.astype(float)


def skew_ratio(trace: TraceSet, layer: int) -> float:
    """Token count of the most popular expert over the least popular one."""
    counts = np.bincount(
        trace.selections[:, layer, :].ravel(),
        minlength=trace.experts_per_layer,
    )
    if counts.min() == 0:
        return float("inf")
    return float(counts.max() / counts.min())
