from __future__ import annotations

import enum
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, NamedTuple

import numpy as np

from moe_sched import constants
from moe_sched.core import ModelSpec
from moe_sched.errors import InvalidSpec, Violation

logger = logging.getLogger("moe_sched.workload")


class TraceMode(enum.StrEnum):
    TRAINING_BALANCED = "TrainingBalanced"
    INFERENCE_SKEWED = "InferenceSkewed"


# Seed stream tags; ground truth always comes from stream 0 so traces of
# either mode generated with one seed share their transition maps.
_TRUTH_STREAM = 0
_MODE_STREAM = {TraceMode.TRAINING_BALANCED: 1, TraceMode.INFERENCE_SKEWED: 2}


@dataclass(frozen=True, kw_only=True)
class GeneratorParams:
    pattern_strength: float
    zipf_s: float = 0.0
    tokens_per_batch: int = 1024
    num_batches: int = 1
    seed: int = 0
    batch_concentration: float | None = constants.DEFAULT_BATCH_CONCENTRATION

    def __post_init__(self):
        violations = []
        if not 0.0 <= self.pattern_strength <= 1.0:
            violations.append(
                Violation("pattern_strength", "must be within [0, 1]")
            )
        if self.zipf_s < 0:
            violations.append(Violation("zipf_s", "must be >= 0"))
        if self.tokens_per_batch <= 0:
            violations.append(Violation("tokens_per_batch", "must be > 0"))
        if self.num_batches <= 0:
            violations.append(Violation("num_batches", "must be > 0"))
        if self.seed < 0:
            violations.append(Violation("seed", "must be >= 0"))
        if self.batch_concentration is not None and (
            self.batch_concentration <= 0
        ):
            violations.append(Violation("batch_concentration", "must be > 0"))
        if violations:
            raise InvalidSpec(violations)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True, kw_only=True, eq=False)
class TraceSet:
    """Per-token, per-layer expert selections.

    `selections` has shape (tokens, layers, top_k); column 0 of the last axis
    is the highest-ranked expert and doubles as the path key.
    """

    num_layers: int
    experts_per_layer: int
    top_k: int
    batch: np.ndarray
    token: np.ndarray
    selections: np.ndarray
    seed: int | None = None
    mode: TraceMode | None = None
    params: GeneratorParams | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("batch", "token", "selections"):
            array = np.array(getattr(self, name), dtype=np.int64)
            array.setflags(write=False)
            object.__setattr__(self, name, array)

        if self.selections.size == 0:
            selections = self.selections.reshape(
                0, self.num_layers, self.top_k
            )
            selections.setflags(write=False)
            object.__setattr__(self, "selections", selections)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TraceSet):
            return NotImplemented
        return (
            self.metadata() == other.metadata()
            and np.array_equal(self.batch, other.batch)
            and np.array_equal(self.token, other.token)
            and np.array_equal(self.selections, other.selections)
        )

    __hash__ = None  # type: ignore[assignment]

    @property
    def num_tokens(self) -> int:
        return int(self.selections.shape[0])

    @property
    def batch_ids(self) -> tuple[int, ...]:
        return tuple(int(batch) for batch in np.unique(self.batch))

    def batch_selections(self, batch: int) -> np.ndarray:
        return self.selections[self.batch == batch]

    def paths(self) -> np.ndarray:
        """Top-1 expert per token and layer."""
        return self.selections[:, :, 0]

    def metadata(self) -> dict[str, Any]:
        metadata: dict[str, Any] = {
            "layers": self.num_layers,
            "experts": self.experts_per_layer,
            "top_k": self.top_k,
            "seed": self.seed,
        }
        if self.mode is not None:
            metadata["mode"] = str(self.mode)
        if self.params is not None:
            metadata["params"] = self.params.to_dict()
        metadata.update(self.extra)
        return metadata


class GroundTruth(NamedTuple):
    transitions: np.ndarray
    marginals: np.ndarray
    rows: np.ndarray

    def to_dict(self) -> dict[str, Any]:
        return {
            "transitions": self.transitions.tolist(),
            "marginals": self.marginals.tolist(),
            "rows": self.rows.tolist(),
        }


class GeneratedTrace(NamedTuple):
    trace: TraceSet
    truth: GroundTruth


def zipf_weights(num_experts: int, s: float) -> np.ndarray:
    weights = 1.0 / np.arange(1, num_experts + 1, dtype=float) ** s
    return weights / weights.sum()


def ground_truth(
    params: GeneratorParams, model: ModelSpec, mode: TraceMode
) -> GroundTruth:
    """Transition maps, layer marginals and exact pooled transition rows.

    A sticky token (probability p) follows the layer-to-layer map from its
    first-layer expert; every other token draws each layer independently.
    """
    num_layers, num_experts = model.num_layers, model.experts_per_layer
    rng = np.random.default_rng([params.seed, _TRUTH_STREAM])

    transitions = np.array(
        [rng.permutation(num_experts) for _ in range(num_layers - 1)],
        dtype=np.int64,
    ).reshape(num_layers - 1, num_experts)

    ranked = [rng.permutation(num_experts) for _ in range(num_layers)]
    if mode == TraceMode.TRAINING_BALANCED:
        marginals = np.full((num_layers, num_experts), 1.0 / num_experts)
    else:
        weights = zipf_weights(num_experts, params.zipf_s)
        marginals = np.zeros((num_layers, num_experts))
        for layer, order in enumerate(ranked):
            marginals[layer, order] = weights

    p = params.pattern_strength
    rows = np.zeros((num_layers - 1, num_experts, num_experts))
    sticky = marginals[0].copy()
    for layer in range(num_layers - 1):
        joint = (1 - p) * np.outer(marginals[layer], marginals[layer + 1])
        joint[np.arange(num_experts), transitions[layer]] += p * sticky

        totals = joint.sum(axis=1, keepdims=True)
        rows[layer] = np.divide(
            joint,
            totals,
            out=np.broadcast_to(marginals[layer + 1], joint.shape).copy(),
            where=totals > 0,
        )

        pushed = np.zeros(num_experts)
        pushed[transitions[layer]] = sticky
        sticky = pushed

    return GroundTruth(transitions=transitions, marginals=marginals, rows=rows)


def _fill_top_k(
    primary: np.ndarray,
    weights: np.ndarray,
    top_k: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Primary expert first, the rest drawn without replacement by weight.

    Gumbel-top-k over log weights; the primary gets an infinite key.
    """
    tokens, num_experts = primary.shape[0], weights.shape[0]
    with np.errstate(divide="ignore"):
        keys = np.log(weights)[None, :] + rng.gumbel(size=(tokens, num_experts))
    keys[np.arange(tokens), primary] = np.inf
    return np.argsort(-keys, axis=1, kind="stable")[:, :top_k]


def rebalance(
    selection: np.ndarray,
    sticky: np.ndarray,
    num_experts: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Move expert slots until every count is the floor or ceiling of the
    mean. Non-sticky tokens move first, then secondary choices."""
    selection = selection.copy()
    counts = np.bincount(selection.ravel(), minlength=num_experts)
    cost = (
        sticky[:, None].astype(int) * 2
        + (np.arange(selection.shape[1]) == 0)[None, :]
    )

    while counts.max() - counts.min() >= 2:
        donor = int(np.argmax(counts))
        receiver = int(np.argmin(counts))

        holds_receiver = (selection == receiver).any(axis=1)
        candidates = (selection == donor) & ~holds_receiver[:, None]
        best = cost[candidates].min()
        tokens, slots = np.nonzero(candidates & (cost == best))
        pick = int(rng.integers(len(tokens)))

        selection[tokens[pick], slots[pick]] = receiver
        counts[donor] -= 1
        counts[receiver] += 1

    return selection


def _batch_selections(
    params: GeneratorParams,
    model: ModelSpec,
    mode: TraceMode,
    truth: GroundTruth,
    batch: int,
) -> np.ndarray:
    rng = np.random.default_rng([params.seed, _MODE_STREAM[mode], batch])
    tokens = params.tokens_per_batch
    num_layers, num_experts = model.num_layers, model.experts_per_layer

    marginals = truth.marginals
    if (
        mode == TraceMode.INFERENCE_SKEWED
        and params.batch_concentration is not None
    ):
        marginals = np.array(
            [
                rng.dirichlet(params.batch_concentration * row)
                for row in truth.marginals
            ]
        )

    sticky = rng.random(tokens) < params.pattern_strength
    primary = np.empty((tokens, num_layers), dtype=np.int64)
    primary[:, 0] = rng.choice(num_experts, size=tokens, p=marginals[0])
    for layer in range(1, num_layers):
        independent = rng.choice(num_experts, size=tokens, p=marginals[layer])
        followed = truth.transitions[layer - 1][primary[:, layer - 1]]
        primary[:, layer] = np.where(sticky, followed, independent)

    selections = np.empty((tokens, num_layers, model.gating_top_k), np.int64)
    for layer in range(num_layers):
        chosen = _fill_top_k(
            primary[:, layer], marginals[layer], model.gating_top_k, rng
        )
        if mode == TraceMode.TRAINING_BALANCED:
            chosen = rebalance(chosen, sticky, num_experts, rng)
        selections[:, layer, :] = chosen

    return selections


def gen_trace(
    params: GeneratorParams, model: ModelSpec, mode: TraceMode
) -> GeneratedTrace:
    truth = ground_truth(params, model, mode)

    batches = [
        _batch_selections(params, model, mode, truth, batch)
        for batch in range(params.num_batches)
    ]
    tokens = params.tokens_per_batch
    trace = TraceSet(
        num_layers=model.num_layers,
        experts_per_layer=model.experts_per_layer,
        top_k=model.gating_top_k,
        batch=np.repeat(np.arange(params.num_batches), tokens),
        token=np.tile(np.arange(tokens), params.num_batches),
        selections=np.concatenate(batches),
        seed=params.seed,
        mode=mode,
        params=params,
    )
    logger.info(
        f"Generated {mode} trace: {trace.num_tokens} tokens, "
        f"{model.num_layers} layers, {model.experts_per_layer} experts"
    )
    return GeneratedTrace(trace=trace, truth=truth)
