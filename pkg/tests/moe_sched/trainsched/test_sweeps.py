import unittest

from moe_sched import engine
from moe_sched.trainsched.sweeps import contention_sweep, contention_workload


class TestContentionSweep(unittest.TestCase):
    def test_slowdown_distribution(self):
        summary = contention_sweep(seed=7, samples=500)

        self.assertEqual(500, len(summary.samples))
        self.assertGreaterEqual(summary.median, 1.4)
        self.assertLessEqual(summary.median, 2.2)
        self.assertGreaterEqual(summary.max, 3.0)
        self.assertGreaterEqual(min(summary.samples), 1.0 - 1e-9)

    def test_deterministic_samples(self):
        first = engine.run(contention_workload(seed=3, sample=11))
        second = engine.run(contention_workload(seed=3, sample=11))

        self.assertEqual(first, second)
