import itertools
import unittest

import numpy as np

from moe_sched.core import ClusterSpec, CostModel, ModelSpec, validate_spec
from moe_sched.errors import InvalidSpec, ProfileMissing
from moe_sched.infersched import (
    InferenceMode,
    build_profile,
    normalized_times,
    path_length_sweep,
    simulate_inference,
)
from moe_sched.workload import TraceSet


def _scenario(layers: int = 4, attention: float = 0.0):
    return validate_spec(
        ClusterSpec(
            num_devices=4,
            devices_per_node=4,
            inter_node_bw=100e9,
            intra_node_bw=100e9,
        ),
        ModelSpec(
            num_layers=layers,
            experts_per_layer=4,
            token_embedding_bytes=8,
            gating_top_k=1,
        ),
        CostModel(
            ffn_cost_per_token=1e-5, attention_cost_per_token=attention
        ),
    )


def _trace(paths, batches=None) -> TraceSet:
    paths = np.asarray(paths)
    return TraceSet(
        num_layers=paths.shape[1],
        experts_per_layer=4,
        top_k=1,
        batch=np.zeros(len(paths)) if batches is None else batches,
        token=np.arange(len(paths)),
        selections=paths[:, :, None],
    )


def _sum_paths(values=range(4)):
    """Layer 3 expert is the sum of the first three, modulo 4."""
    return [
        (a, b, c, (a + b + c) % 4)
        for a, b, c in itertools.product(values, repeat=3)
    ]


def _hot_trace(tokens: int = 8192, batches: int = 2) -> TraceSet:
    """Every token picks expert 3 at every layer."""
    return _trace(
        np.full((tokens * batches, 4), 3),
        np.repeat(np.arange(batches), tokens),
    )


class TestPathLength(unittest.TestCase):
    def test_longer_paths_estimate_better(self):
        training = _trace(_sum_paths())
        inference = _trace(_sum_paths((2, 3)) * 16)

        points = path_length_sweep(
            _scenario(), training, inference, [1, 2, 3]
        )

        self.assertListEqual([1, 2, 3], [point.path_length for point in points])
        self.assertEqual(0.0, points[0].estimation_accuracy)
        self.assertEqual(1.0, points[0].finetune_rate)
        self.assertEqual(0.0, points[1].estimation_accuracy)
        self.assertEqual(1.0, points[2].estimation_accuracy)
        self.assertEqual(0.0, points[2].finetune_rate)


class TestInferenceModes(unittest.TestCase):
    def test_estimation_hides_scheduling(self):
        # 32 tokens per device; 8 ms of attention covers phase one.
        scenario = _scenario(attention=2.5e-4)
        profile = build_profile(_trace(_sum_paths()), path_length=3)
        inference = _trace(_sum_paths((2, 3)) * 16)

        lina = simulate_inference(
            scenario, inference, InferenceMode.LINA, profile
        )
        blocking = simulate_inference(
            scenario, inference, InferenceMode.LINA_NO_ESTIMATION
        )

        self.assertEqual(1.0, lina.accuracy.estimation_accuracy)
        self.assertLess(lina.median, blocking.median - 4e-3)
        self.assertIsNone(blocking.accuracy)

    def test_finetune_catches_wrong_estimates(self):
        scenario = _scenario()
        uniform = build_profile(
            _trace(list(itertools.product(range(4), repeat=4))),
            path_length=1,
        )
        trace = _hot_trace()

        runs = {
            mode: simulate_inference(scenario, trace, mode, uniform)
            for mode in InferenceMode
        }

        self.assertLess(
            runs[InferenceMode.LINA].p95,
            runs[InferenceMode.LINA_NO_FINETUNE].p95,
        )
        self.assertEqual(0.0, runs[InferenceMode.LINA].accuracy[0])
        self.assertLess(
            runs[InferenceMode.IDEAL].median, runs[InferenceMode.LINA].median
        )
        self.assertLess(
            runs[InferenceMode.LINA].median,
            runs[InferenceMode.BASELINE].median,
        )

        normalized = normalized_times(runs)
        self.assertEqual(1.0, normalized[InferenceMode.IDEAL].p50)
        self.assertGreater(normalized[InferenceMode.BASELINE].p50, 1.0)

    def test_one_time_per_batch(self):
        run = simulate_inference(
            _scenario(),
            _hot_trace(tokens=64, batches=3),
            InferenceMode.BASELINE,
        )

        self.assertEqual(3, len(run.inference_times))
        self.assertEqual(run.inference_times, run.report.inference_times)
        self.assertEqual([0, 1, 2, 3], sorted(run.layer_all_to_all_times))


class TestInferenceErrors(unittest.TestCase):
    def test_estimating_modes_need_profile(self):
        for mode in (InferenceMode.LINA, InferenceMode.LINA_NO_FINETUNE):
            with self.assertRaises(ProfileMissing):
                simulate_inference(_scenario(), _hot_trace(64, 1), mode)

    def test_trace_must_match_model(self):
        with self.assertRaises(InvalidSpec):
            simulate_inference(
                _scenario(layers=3),
                _hot_trace(64, 1),
                InferenceMode.BASELINE,
            )

    def test_normalizing_needs_ideal(self):
        run = simulate_inference(
            _scenario(), _hot_trace(64, 1), InferenceMode.BASELINE
        )
        with self.assertRaises(InvalidSpec):
            normalized_times({InferenceMode.BASELINE: run})


class TestEstimationAccuracy(unittest.TestCase):
    def test_partly_predictable_batches(self):
        # Three batches follow the learned layer-3 rule, two are shifted.
        training = _trace(_sum_paths())
        patterned = _sum_paths((2, 3)) * 4
        shifted = [(a, b, c, (d + 1) % 4) for a, b, c, d in patterned]
        inference = _trace(
            patterned * 3 + shifted * 2,
            np.repeat(np.arange(5), len(patterned)),
        )

        short, long = path_length_sweep(
            _scenario(), training, inference, [1, 3]
        )

        self.assertAlmostEqual(0.6, long.estimation_accuracy)
        self.assertGreaterEqual(long.estimation_accuracy, 0.55)
        self.assertLessEqual(long.estimation_accuracy, 0.65)
        self.assertAlmostEqual(0.4, short.estimation_accuracy)
        self.assertGreater(short.finetune_rate, long.finetune_rate)


def _skewed_scenario():
    # 10 ms of attention per layer hides phase one entirely.
    return validate_spec(
        ClusterSpec(
            num_devices=8,
            devices_per_node=8,
            inter_node_bw=100e9,
            intra_node_bw=100e9,
        ),
        ModelSpec(
            num_layers=4,
            experts_per_layer=4,
            token_embedding_bytes=8,
            gating_top_k=1,
        ),
        CostModel(ffn_cost_per_token=1e-5, attention_cost_per_token=1e-4),
    )


def _skewed_trace(batches: int = 3) -> TraceSet:
    """Expert popularity 4:2:1:1, each token keeps its expert."""
    batch = [
        (expert,) * 4
        for expert, count in enumerate((400, 200, 100, 100))
        for _ in range(count)
    ]
    return _trace(batch * batches, np.repeat(np.arange(batches), len(batch)))


class TestSkewedInference(unittest.TestCase):
    def test_close_to_ideal(self):
        profile = build_profile(
            _trace([(expert,) * 4 for expert in range(4)]), path_length=1
        )
        runs = {
            mode: simulate_inference(
                _skewed_scenario(), _skewed_trace(), mode, profile
            )
            for mode in (
                InferenceMode.IDEAL,
                InferenceMode.LINA,
                InferenceMode.LINA_NO_ESTIMATION,
                InferenceMode.BASELINE,
            )
        }

        normalized = normalized_times(runs)
        lina = normalized[InferenceMode.LINA].p50
        self.assertEqual(
            1.0, runs[InferenceMode.LINA].accuracy.estimation_accuracy
        )
        self.assertGreater(lina, 1.0)
        self.assertLessEqual(lina, 1.3)
        self.assertLess(lina, normalized[InferenceMode.BASELINE].p50)
        self.assertLess(
            runs[InferenceMode.LINA].median,
            runs[InferenceMode.LINA_NO_ESTIMATION].median,
        )

    def test_hot_expert_spread_over_spare_devices(self):
        profile = build_profile(
            _trace([(expert,) * 4 for expert in range(4)]), path_length=1
        )

        run = simulate_inference(
            _skewed_scenario(), _skewed_trace(1), InferenceMode.LINA, profile
        )

        plan = run.batches[0].plans[1]
        self.assertListEqual([4, 2, 1, 1], plan.replica_counts.tolist())
        self.assertLessEqual(plan.replica_counts.sum(), plan.num_devices)
