import itertools
import unittest

import numpy as np

from moe_sched.errors import InfeasiblePlan, InvalidSpec
from moe_sched.infersched import (
    AllocationPlan,
    allocate,
    first_fit_decreasing,
    identity_plan,
    route_tokens,
)
from moe_sched.infersched.allocate import Item


def _fewest_bins(items, capacity: float, max_slots: int) -> int:
    """Exhaustive search over every assignment of items to bins."""
    best = len(items)

    def place(index: int, loads: list[float], slots: list[int]):
        nonlocal best
        if len(loads) >= best:
            return
        if index == len(items):
            best = len(loads)
            return

        size = items[index].size
        for position in range(len(loads)):
            if slots[position] < max_slots and (
                loads[position] + size <= capacity
            ):
                loads[position] += size
                slots[position] += 1
                place(index + 1, loads, slots)
                loads[position] -= size
                slots[position] -= 1

        place(index + 1, [*loads, size], [*slots, 1])

    place(0, [], [])
    return best


class TestAllocate(unittest.TestCase):
    def test_uniform_popularity_is_identity(self):
        plan = allocate(np.full(16, 1 / 16), 16)

        self.assertEqual(
            identity_plan(16, 16).device_experts, plan.device_experts
        )
        self.assertListEqual([1] * 16, plan.replica_counts.tolist())

    def test_hot_expert_replicated(self):
        plan = allocate([0.75, 0.25], 4)

        self.assertListEqual([3, 1], plan.replica_counts.tolist())
        self.assertEqual(((0,), (0,), (0,), (1,)), plan.device_experts)
        self.assertAlmostEqual(4.0, plan.shares.sum())

    def test_unestimated_experts_still_placed(self):
        plan = allocate([0.5, 0.5, 0.0, 0.0], 4, seed=3)

        self.assertListEqual([2, 2, 1, 1], plan.replica_counts.tolist())

    def test_replicas_fit_devices(self):
        plan = allocate([0.4, 0.4, 0.2], 4)

        self.assertListEqual([1, 2, 1], plan.replica_counts.tolist())

    def test_more_experts_than_devices_keep_one_replica(self):
        plan = allocate(np.full(6, 1 / 6), 4)

        self.assertListEqual([1] * 6, plan.replica_counts.tolist())

    def test_zero_popularity_spreads_round_robin(self):
        plan = allocate(np.zeros(4), 4)

        self.assertEqual(((0,), (1,), (2,), (3,)), plan.device_experts)

    def test_seeded(self):
        popularity = [0.6, 0.4, 0.0, 0.0, 0.0, 0.0]

        self.assertEqual(
            allocate(popularity, 4, seed=[1, 2]).device_experts,
            allocate(popularity, 4, seed=[1, 2]).device_experts,
        )

    def test_random_plans_respect_slots(self):
        rng = np.random.default_rng(17)
        for _ in range(200):
            devices = int(rng.integers(1, 9))
            max_packed = int(rng.integers(1, 5))
            experts = int(rng.integers(1, devices * max_packed + 1))
            popularity = rng.dirichlet(np.ones(experts))
            popularity[rng.random(experts) < 0.3] = 0.0

            plan = allocate(popularity, devices, max_packed=max_packed)

            self.assertEqual(devices, len(plan.device_experts))
            for hosted in plan.device_experts:
                self.assertLessEqual(len(hosted), max_packed)
                self.assertEqual(len(hosted), len(set(hosted)))
            self.assertTrue(all(plan.replica_counts >= 1))
            self.assertLessEqual(
                plan.replica_counts.sum(), devices * max_packed
            )
            estimated = popularity > 0
            self.assertLessEqual(
                plan.replica_counts[estimated].sum(),
                max(devices, int(estimated.sum())),
            )

    def test_too_many_experts(self):
        with self.assertRaises(InfeasiblePlan):
            allocate(np.full(9, 1 / 9), 2, max_packed=4)

    def test_negative_popularity(self):
        with self.assertRaises(InvalidSpec):
            allocate([0.5, -0.1], 2)


class TestFirstFitDecreasing(unittest.TestCase):
    def test_matches_exhaustive_search(self):
        # Sizes that divide each other; first-fit-decreasing is exact there.
        for count in range(1, 7):
            for sizes in itertools.combinations_with_replacement(
                (0.25, 0.5, 1.0), count
            ):
                items = [
                    Item(expert, size) for expert, size in enumerate(sizes)
                ]

                bins = first_fit_decreasing(items, 1.0, 4)

                self.assertEqual(
                    _fewest_bins(items, 1.0, 4), len(bins), msg=str(sizes)
                )

    def test_replicas_never_share_a_device(self):
        items = [Item(0, 0.25)] * 4

        bins = first_fit_decreasing(items, 1.0, 4)

        self.assertEqual(4, len(bins))

    def test_slot_limit(self):
        items = [Item(expert, 0.1) for expert in range(5)]

        bins = first_fit_decreasing(items, 1.0, 2)

        self.assertListEqual([2, 2, 1], [len(contents) for contents in bins])


class TestRouteTokens(unittest.TestCase):
    def test_replicas_split_evenly(self):
        plan = AllocationPlan(
            num_devices=4,
            num_experts=4,
            max_packed=4,
            device_experts=((0, 1), (0, 2), (0, 3), (0,)),
        )
        counts = np.zeros((4, 4), np.int64)
        counts[:, 0] = [101, 100, 100, 100]

        routed = route_tokens(plan, counts)

        self.assertListEqual(
            [101, 100, 100, 100],
            routed.device_expert_tokens.sum(axis=1).tolist(),
        )
        np.testing.assert_array_equal(
            counts.sum(axis=1), routed.pair_tokens.sum(axis=1)
        )

    def test_conserves_tokens(self):
        rng = np.random.default_rng(5)
        counts = rng.integers(0, 50, size=(4, 6))
        plan = allocate(counts.sum(axis=0) / counts.sum(), 4)

        routed = route_tokens(plan, counts)

        np.testing.assert_array_equal(
            counts.sum(axis=0), routed.device_expert_tokens.sum(axis=0)
        )
        np.testing.assert_array_equal(
            counts.sum(axis=1), routed.pair_tokens.sum(axis=1)
        )
        for expert, hosts in enumerate(plan.replicas):
            loads = routed.device_expert_tokens[list(hosts), expert]
            self.assertLessEqual(loads.max() - loads.min(), 1)

    def test_expert_without_replica(self):
        plan = AllocationPlan(
            num_devices=2,
            num_experts=2,
            max_packed=1,
            device_experts=((0,), ()),
        )
        with self.assertRaises(InfeasiblePlan):
            route_tokens(plan, np.array([[0, 3], [0, 0]]))
