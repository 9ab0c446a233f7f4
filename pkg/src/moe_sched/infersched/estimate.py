from __future__ import annotations

from typing import NamedTuple

import numpy as np

from moe_sched.errors import InvalidSpec, LayerTooEarly, Violation

from .profile import PopularityProfile


class Estimate(NamedTuple):
    layer: int
    popularity: np.ndarray
    top_experts: np.ndarray
    probabilities: np.ndarray


def ranked_experts(values: np.ndarray, count: int) -> np.ndarray:
    """Indices of the `count` largest values, ties by ascending index."""
    return np.argsort(-np.asarray(values), kind="stable")[:count]


def estimate_popularity(
    profile: PopularityProfile, paths: np.ndarray, layer: int, k: int
) -> Estimate:
    """Expected share of the batch's tokens bound for each expert of `layer`.

    `paths` holds every token's top-1 expert for the layers already gated
    (at least up to `layer - 1`). Each token adds the probabilities of the
    top-k experts of its path's distribution, divided by the token count.
    """
    if layer < profile.first_layer:
        raise LayerTooEarly(
            f"layer {layer} precedes the first estimated layer "
            f"{profile.first_layer}"
        )
    if paths.ndim != 2 or paths.shape[1] < layer:
        raise InvalidSpec(
            [Violation("paths", f"needs top-1 history up to layer {layer}")]
        )
    if k <= 0:
        raise InvalidSpec([Violation("k", "must be > 0")])

    experts = profile.experts_per_layer
    k = min(k, experts)
    tokens = paths.shape[0]
    popularity = np.zeros(experts)
    top_experts = np.zeros((tokens, k), dtype=np.int64)
    probabilities = np.zeros((tokens, k))
    if not tokens:
        return Estimate(layer, popularity, top_experts, probabilities)

    history = paths[:, layer - profile.path_length : layer]
    unique, inverse = np.unique(history, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=len(unique))

    for index, path in enumerate(unique.tolist()):
        distribution = profile.lookup(layer, tuple(path))
        chosen = ranked_experts(distribution, k)
        members = inverse == index
        top_experts[members] = chosen
        probabilities[members] = distribution[chosen]
        popularity[chosen] += counts[index] * distribution[chosen]

    return Estimate(
        layer=layer,
        popularity=popularity / tokens,
        top_experts=top_experts,
        probabilities=probabilities,
    )
