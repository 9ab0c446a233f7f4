import unittest

import numpy as np

from moe_sched.core import BatchAssignment, CostModel
from moe_sched.errors import InvalidSpec
from moe_sched.infersched import (
    PhaseTwoOutcome,
    accuracy,
    allocate,
    identity_plan,
    top_set,
    two_phase_step,
)


def _assignment(counts: list[int]) -> BatchAssignment:
    experts = np.repeat(np.arange(len(counts)), counts)
    return BatchAssignment(
        origin_device=np.zeros(len(experts), np.int64), selection=experts
    )


class TestTopSet(unittest.TestCase):
    def test_ties_go_to_lower_id(self):
        self.assertEqual(frozenset((0, 1)), top_set([3, 3, 3, 1], 2))
        self.assertEqual(frozenset((1, 3)), top_set([0, 2, 1, 2], 2))


class TestTwoPhaseStep(unittest.TestCase):
    def test_matching_estimate_resumes(self):
        plan = allocate([0.4, 0.3, 0.2, 0.1], 4)

        outcome = two_phase_step(
            plan, _assignment([40, 30, 20, 10]), 1, CostModel()
        )

        self.assertTrue(outcome.matched)
        self.assertIs(plan, outcome.plan_used)
        self.assertAlmostEqual(1.45e-3, outcome.overhead_charged)

    def test_wrong_estimate_replans(self):
        plan = allocate([0.4, 0.3, 0.1, 0.1, 0.05, 0.05, 0.0, 0.0], 4)

        outcome = two_phase_step(
            plan,
            _assignment([0, 0, 0, 0, 0, 0, 50, 50]),
            1,
            CostModel(),
            layer=5,
        )

        self.assertFalse(outcome.matched)
        self.assertEqual(5, outcome.layer)
        self.assertEqual(frozenset((6, 7)), outcome.actual_top)
        self.assertAlmostEqual(6.2e-3, outcome.overhead_charged)
        np.testing.assert_allclose(
            [0, 0, 0, 0, 0, 0, 0.5, 0.5], outcome.plan_used.popularity
        )
        self.assertListEqual(
            [2, 2], outcome.plan_used.replica_counts[6:].tolist()
        )

    def test_overheads_follow_cost_model(self):
        cost = CostModel(resume_signal_cost=1e-3, sched_phase_cost=5e-3)
        plan = allocate([0.5, 0.5, 0.0, 0.0], 2)

        matched = two_phase_step(plan, _assignment([5, 5, 0, 0]), 1, cost)
        missed = two_phase_step(plan, _assignment([0, 0, 5, 5]), 1, cost)

        self.assertEqual(1e-3, matched.overhead_charged)
        self.assertEqual(5e-3, missed.overhead_charged)

    def test_compares_whole_top_set(self):
        # E = 2k: every expert is in both sets.
        plan = allocate([0.9, 0.1, 0.0, 0.0], 4)

        outcome = two_phase_step(
            plan, _assignment([0, 0, 5, 5]), 2, CostModel()
        )

        self.assertTrue(outcome.matched)

    def test_plan_needs_popularity(self):
        with self.assertRaises(InvalidSpec):
            two_phase_step(
                identity_plan(4, 4), _assignment([1, 1, 1, 1]), 1, CostModel()
            )

    def test_positive_k(self):
        plan = allocate([0.5, 0.5], 2)
        with self.assertRaises(InvalidSpec):
            two_phase_step(plan, _assignment([1, 1]), 0, CostModel())


class TestAccuracy(unittest.TestCase):
    def _outcome(self, layer: int, matched: bool) -> PhaseTwoOutcome:
        actual = frozenset((0, 1)) if matched else frozenset((2, 3))
        return PhaseTwoOutcome(
            layer=layer,
            estimated_top=frozenset((0, 1)),
            actual_top=actual,
            plan_used=identity_plan(4, 4),
            overhead_charged=0.0,
        )

    def test_rates(self):
        summary = accuracy(
            [
                self._outcome(3, True),
                self._outcome(3, False),
                self._outcome(4, True),
                self._outcome(4, True),
            ]
        )

        self.assertAlmostEqual(0.75, summary.estimation_accuracy)
        self.assertAlmostEqual(0.25, summary.finetune_rate)
        self.assertDictEqual({3: 0.5, 4: 1.0}, summary.per_layer)

    def test_no_outcomes(self):
        self.assertEqual((0.0, 0.0, {}), tuple(accuracy([])))
