from __future__ import annotations

import logging
import math
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any, NamedTuple

import numpy as np

from moe_sched import constants
from moe_sched.errors import InfeasiblePlan, InvalidSpec, Violation

logger = logging.getLogger("moe_sched.infersched")

CAPACITY_BISECTIONS = 40
_SLACK = 1e-12


class Item(NamedTuple):
    expert: int
    size: float


@dataclass(frozen=True, eq=False)
class AllocationPlan:
    num_devices: int
    num_experts: int
    max_packed: int
    device_experts: tuple[tuple[int, ...], ...]
    shares: np.ndarray | None = None
    popularity: np.ndarray | None = None

    @property
    def replicas(self) -> tuple[tuple[int, ...], ...]:
        hosts: list[list[int]] = [[] for _ in range(self.num_experts)]
        for device, experts in enumerate(self.device_experts):
            for expert in experts:
                hosts[expert].append(device)
        return tuple(tuple(devices) for devices in hosts)

    @property
    def replica_counts(self) -> np.ndarray:
        return np.array([len(hosts) for hosts in self.replicas], np.int64)

    def swapped_experts(self, device: int) -> int:
        """Hosted experts whose weights are not resident on `device`."""
        return sum(
            1
            for expert in self.device_experts[device]
            if home_device(expert, self.num_devices) != device
        )

    def to_dict(self) -> dict[str, Any]:
        plan: dict[str, Any] = {
            "devices": [list(experts) for experts in self.device_experts],
            "replicas": self.replica_counts.tolist(),
        }
        if self.shares is not None:
            plan["shares"] = self.shares.tolist()
        return plan


class RoutedTokens(NamedTuple):
    pair_tokens: np.ndarray
    device_expert_tokens: np.ndarray


def home_device(expert: int, num_devices: int) -> int:
    return expert % num_devices


def identity_plan(num_experts: int, num_devices: int) -> AllocationPlan:
    """Static placement: every expert on its home device only."""
    device_experts = tuple(
        tuple(range(device, num_experts, num_devices))
        for device in range(num_devices)
    )
    return AllocationPlan(
        num_devices=num_devices,
        num_experts=num_experts,
        max_packed=max(1, math.ceil(num_experts / num_devices)),
        device_experts=device_experts,
    )


def first_fit_decreasing(
    items: Sequence[Item], capacity: float, max_slots: int
) -> list[list[Item]]:
    """Pack items into as few bins as first-fit-decreasing manages.

    A bin holds at most `max_slots` items, never two of the same expert,
    and never more than `capacity` in total size.
    """
    bins: list[list[Item]] = []
    loads: list[float] = []
    for item in sorted(items, key=lambda item: (-item.size, item.expert)):
        for index, contents in enumerate(bins):
            if (
                len(contents) < max_slots
                and loads[index] + item.size <= capacity + _SLACK
                and all(other.expert != item.expert for other in contents)
            ):
                contents.append(item)
                loads[index] += item.size
                break
        else:
            bins.append([item])
            loads.append(item.size)
    return bins


def _fits(
    items: Sequence[Item], num_devices: int, capacity: float, max_slots: int
) -> list[list[Item]] | None:
    bins = first_fit_decreasing(items, capacity, max_slots)
    return bins if len(bins) <= num_devices else None


def pack_replicas(
    items: Sequence[Item], num_devices: int, max_slots: int
) -> list[list[Item]] | None:
    """Smallest device capacity (found by bisection) at which FFD fits.

    Capacity starts at one device's fair share; None when the items do not
    fit even with unbounded capacity.
    """
    if not items:
        return []

    low = max(1.0, max(item.size for item in items))
    packed = _fits(items, num_devices, low, max_slots)
    if packed is not None:
        return packed

    high = sum(item.size for item in items)
    packed = _fits(items, num_devices, high, max_slots)
    if packed is None:
        return None

    for _ in range(CAPACITY_BISECTIONS):
        middle = (low + high) / 2
        attempt = _fits(items, num_devices, middle, max_slots)
        if attempt is None:
            low = middle
        else:
            high, packed = middle, attempt
    return packed


def replica_counts(shares: np.ndarray, num_devices: int) -> np.ndarray:
    """Round-half-up device shares, at least one replica per estimated
    expert and at most one per device."""
    counts = np.floor(shares + 0.5).astype(np.int64)
    return np.where(shares > 0, np.clip(counts, 1, num_devices), 0)


def trim_replicas(
    replicas: np.ndarray, shares: np.ndarray, budget: int
) -> np.ndarray:
    """Drop replicas from the most replicated expert until at most `budget`
    remain; the less popular expert goes first on ties. Never below one."""
    replicas = replicas.copy()
    while replicas.sum() > budget:
        largest = replicas.max()
        if largest <= 1:
            break
        candidates = np.flatnonzero(replicas == largest)
        replicas[candidates[int(np.argmin(shares[candidates]))]] -= 1
    return replicas


def allocate(
    popularity: Sequence[float] | np.ndarray,
    num_devices: int,
    *,
    max_packed: int = constants.DEFAULT_MAX_PACKED,
    seed: int | Sequence[int] = 0,
) -> AllocationPlan:
    popularity = np.asarray(popularity, dtype=float)
    num_experts = popularity.shape[0]

    violations = []
    if num_devices <= 0:
        violations.append(Violation("num_devices", "must be > 0"))
    if max_packed <= 0:
        violations.append(Violation("max_packed", "must be > 0"))
    if (popularity < 0).any():
        violations.append(Violation("popularity", "must be >= 0"))
    if violations:
        raise InvalidSpec(violations)

    if num_experts > num_devices * max_packed:
        raise InfeasiblePlan(
            f"{num_experts} experts exceed {num_devices} devices x "
            f"{max_packed} slots"
        )

    total = popularity.sum()
    shares = (
        num_devices * popularity / total if total > 0 else np.zeros(num_experts)
    )
    replicas = replica_counts(shares, num_devices)
    unestimated = np.flatnonzero(replicas == 0).tolist()

    # Estimated experts share N replicas; past N of them each keeps one.
    estimated = num_experts - len(unestimated)
    free_slots = num_devices * max_packed - len(unestimated)
    replicas = trim_replicas(
        replicas, shares, min(free_slots, max(num_devices, estimated))
    )

    while True:
        items = [
            Item(expert, float(shares[expert] / replicas[expert]))
            for expert in np.flatnonzero(replicas).tolist()
            for _ in range(replicas[expert])
        ]
        packed = pack_replicas(items, num_devices, max_packed)
        if packed is not None:
            break

        largest = int(np.argmax(replicas))
        if replicas[largest] <= 1:
            raise InfeasiblePlan("replicas cannot be placed within slots")
        replicas[largest] -= 1

    device_experts = [
        [item.expert for item in contents] for contents in packed
    ]
    loads = [sum(item.size for item in contents) for contents in packed]
    device_experts.extend([] for _ in range(num_devices - len(packed)))
    loads.extend(0.0 for _ in range(num_devices - len(packed)))

    rng = np.random.default_rng(seed)
    _place_unestimated(unestimated, device_experts, loads, max_packed, rng)

    plan = AllocationPlan(
        num_devices=num_devices,
        num_experts=num_experts,
        max_packed=max_packed,
        device_experts=tuple(tuple(experts) for experts in device_experts),
        shares=shares,
        popularity=popularity,
    )
    logger.debug(f"Allocation replicas {plan.replica_counts.tolist()}")
    return plan


def _place_unestimated(
    experts: Sequence[int],
    device_experts: list[list[int]],
    loads: list[float],
    max_packed: int,
    rng: np.random.Generator,
):
    """Round-robin onto empty devices, then the least-loaded open device
    with a random tie-break."""
    empty = [
        device for device, hosted in enumerate(device_experts) if not hosted
    ]
    for expert in experts:
        if empty:
            device_experts[empty.pop(0)].append(expert)
            continue

        open_devices = [
            device
            for device, hosted in enumerate(device_experts)
            if len(hosted) < max_packed
        ]
        lightest = min(loads[device] for device in open_devices)
        candidates = [
            device
            for device in open_devices
            if loads[device] <= lightest + _SLACK
        ]
        chosen = candidates[int(rng.integers(len(candidates)))]
        device_experts[chosen].append(expert)


def route_tokens(plan: AllocationPlan, counts: np.ndarray) -> RoutedTokens:
    """Split each expert's tokens over its replicas.

    Origins are dealt out in device order in contiguous runs, so replica
    loads of one expert differ by at most one token.
    """
    num_devices, num_experts = counts.shape
    pair_tokens = np.zeros((num_devices, plan.num_devices), np.int64)
    device_expert_tokens = np.zeros((plan.num_devices, num_experts), np.int64)

    for expert, hosts in enumerate(plan.replicas):
        column = counts[:, expert]
        total = int(column.sum())
        if not total:
            continue
        if not hosts:
            raise InfeasiblePlan(f"expert {expert} has tokens but no replica")

        base, extra = divmod(total, len(hosts))
        quotas = [base + (index < extra) for index in range(len(hosts))]
        origin_edges = np.concatenate(([0], np.cumsum(column)))
        replica_edges = np.concatenate(([0], np.cumsum(quotas)))

        for index, device in enumerate(hosts):
            low, high = replica_edges[index], replica_edges[index + 1]
            taken = np.clip(
                np.minimum(origin_edges[1:], high)
                - np.maximum(origin_edges[:-1], low),
                0,
                None,
            )
            pair_tokens[:, device] += taken
            device_expert_tokens[device, expert] += int(taken.sum())

    return RoutedTokens(
        pair_tokens=pair_tokens, device_expert_tokens=device_expert_tokens
    )
