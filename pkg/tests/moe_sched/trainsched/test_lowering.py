import unittest

import numpy as np

from moe_sched.core import (
    ClusterSpec,
    CostModel,
    ModelSpec,
    OpKind,
    validate_spec,
)
from moe_sched.engine import TaskTag
from moe_sched.trainsched import (
    StepLayout,
    build_backward,
    build_forward,
    build_training_step,
    lower_backward,
    partition_moe_layer,
    pipeline_moe_layer,
)
from moe_sched.trainsched.step import (
    GradientTensor,
    balanced_pair_bytes,
    gradient_allreduces,
    gradient_buckets,
    parameter_exchange_bytes,
)

MB = 1_000_000

CLUSTER = ClusterSpec(
    num_devices=4,
    devices_per_node=4,
    inter_node_bw=1e9,
    intra_node_bw=1e9,
)
COST = CostModel(
    attention_cost_per_token=4e-6,
    gate_cost_per_token=1e-6,
    ffn_cost_per_token=2e-6,
    combine_cost_per_token=1e-6,
)


def _model(layers: int = 2, grads=(1 * MB, 3 * MB), **fields) -> ModelSpec:
    return ModelSpec(
        num_layers=layers,
        experts_per_layer=4,
        token_embedding_bytes=1000,
        nonexpert_grad_bytes=grads,
        gating_top_k=1,
        **fields,
    )


class TestBalancedTraffic(unittest.TestCase):
    def test_equal_pairs(self):
        matrix = balanced_pair_bytes(_model(), CLUSTER, 1000)

        np.testing.assert_array_equal(np.full((4, 4), 250_000), matrix)

    def test_packing_keeps_traffic_in_group(self):
        matrix = balanced_pair_bytes(_model(), CLUSTER, 1000, 2)

        block = np.full((2, 2), 500_000)
        zeros = np.zeros((2, 2))
        np.testing.assert_array_equal(
            np.block([[block, zeros], [zeros, block]]), matrix
        )

    def test_parameter_exchange(self):
        model = _model(expert_param_bytes=100)

        matrix = parameter_exchange_bytes(model, CLUSTER, previous=1, current=2)

        self.assertEqual(600, matrix.sum())
        self.assertEqual(100, matrix[1, 0])
        self.assertEqual(0, np.trace(matrix))


class TestBuildForward(unittest.TestCase):
    def test_two_alltoalls_per_layer(self):
        forward = build_forward(_model(layers=24), CLUSTER, COST, 1000)
        backward = build_backward(_model(layers=24), CLUSTER, COST, 1000)

        self.assertEqual(48, len(forward.ops))
        self.assertEqual(48, sum(len(layer.ops) for layer in backward.layers))
        self.assertTrue(
            all(op.kind == OpKind.ALL_TO_ALL for op in forward.ops)
        )

    def test_sequential_layers(self):
        forward = build_forward(_model(), CLUSTER, COST, 1000, after=("x",))
        tasks = {task.task_id: task for task in forward.tasks}

        self.assertEqual(
            frozenset(("x",)), tasks["fwd.L0.attention"].dependencies
        )
        self.assertEqual(
            frozenset(("fwd.L0.combine",)),
            tasks["fwd.L1.attention"].dependencies,
        )
        self.assertAlmostEqual(2e-3, tasks["fwd.L0.ffn"].duration)
        self.assertEqual("fwd.L1.combine", forward.last_task_id)


class TestBuildBackward(unittest.TestCase):
    def test_reverse_layer_order(self):
        backward = build_backward(_model(), CLUSTER, COST, 1000)

        self.assertListEqual([1, 0], [layer.layer for layer in backward.layers])
        first, second = backward.layers
        self.assertEqual(
            frozenset((first.attention[-1].task_id,)),
            second.combine.dependencies,
        )
        self.assertTrue(first.combine.lookahead)
        self.assertEqual("bwd.L0.attention.g1", backward.last_task_id)

    def test_backward_costs_double(self):
        backward = build_backward(_model(), CLUSTER, COST, 1000)
        layer = backward.layers[0]

        self.assertAlmostEqual(4e-3, layer.expert.duration)
        self.assertAlmostEqual(2e-3, layer.gate.duration)

    def test_attention_split_per_gradient(self):
        backward = build_backward(_model(), CLUSTER, COST, 1000)
        pieces = backward.layers[0].attention

        self.assertAlmostEqual(2e-3, pieces[0].duration)
        self.assertAlmostEqual(6e-3, pieces[1].duration)
        self.assertEqual(
            frozenset((pieces[0].task_id,)), pieces[1].dependencies
        )
        self.assertListEqual(
            ["L1.g0", "L1.g1", "L0.g0", "L0.g1"],
            [gradient.name for gradient in backward.gradients],
        )

    def test_no_gradients_no_allreduce(self):
        backward = build_backward(_model(grads=()), CLUSTER, COST, 1000)

        self.assertEqual((), backward.gradients)
        self.assertListEqual([], gradient_allreduces(backward, StepLayout()))
        self.assertEqual(
            ["bwd.L1.attention"],
            [task.task_id for task in backward.layers[0].attention],
        )


class TestGradientAllReduce(unittest.TestCase):
    def _gradients(self):
        return [
            GradientTensor(f"L{layer}.g{index}", 10 * MB, layer, f"t{index}")
            for layer in (1, 0)
            for index in range(3)
        ]

    def test_buckets_stay_within_layer(self):
        buckets = gradient_buckets(self._gradients(), 25 * MB)

        self.assertListEqual(
            [["L1.g0", "L1.g1"], ["L1.g2"], ["L0.g0", "L0.g1"], ["L0.g2"]],
            [[gradient.name for gradient in bucket] for bucket in buckets],
        )

    def test_partitioned_per_gradient(self):
        backward = build_backward(
            _model(grads=(10 * MB,)), CLUSTER, COST, 1000
        )

        ops = gradient_allreduces(
            backward, StepLayout(per_gradient=True, partition_bytes=4 * MB)
        )

        self.assertListEqual(
            ["ar.L1.g0#0", "ar.L1.g0#1", "ar.L1.g0#2"],
            [op.op_id for op in ops[:3]],
        )
        self.assertListEqual(
            [4 * MB, 4 * MB, 2 * MB], [op.tensor_bytes for op in ops[:3]]
        )
        self.assertEqual(
            frozenset(("bwd.L1.attention.g0",)), ops[0].dependencies
        )

    def test_bucket_names(self):
        backward = build_backward(_model(), CLUSTER, COST, 1000)

        ops = gradient_allreduces(backward, StepLayout(bucket_bytes=25 * MB))

        self.assertListEqual(
            ["ar.L1.g0-g1", "ar.L0.g0-g1"], [op.op_id for op in ops]
        )
        self.assertEqual(4 * MB, ops[0].tensor_bytes)


class TestMoeLayerGraphs(unittest.TestCase):
    def setUp(self):
        # 750 kB sent per device; three micro-ops of 250 kB.
        backward = build_backward(_model(layers=1), CLUSTER, COST, 1000)
        self.layer = backward.layers[0]

    def test_pipeline(self):
        graph = pipeline_moe_layer(self.layer, 250_000)
        tasks = {task.task_id: task for task in graph.tasks}
        ops = {op.op_id: op for op in graph.ops}

        experts = [task for task in graph.tasks if task.tag == TaskTag.FFN]
        self.assertEqual(3, len(experts))
        self.assertAlmostEqual(
            self.layer.expert.duration,
            sum(task.duration for task in experts),
        )
        for index in range(3):
            self.assertEqual(
                frozenset((f"bwd.L0.dispatch#{index}",)),
                tasks[f"bwd.L0.ffn#{index}"].dependencies,
            )
            self.assertEqual(
                frozenset((f"bwd.L0.ffn#{index}",)),
                ops[f"bwd.L0.restore#{index}"].dependencies,
            )
        self.assertEqual(
            frozenset(f"bwd.L0.restore#{index}" for index in range(3)),
            tasks["bwd.L0.gate"].dependencies,
        )

    def test_partition_without_pipeline(self):
        graph = partition_moe_layer(self.layer, 250_000)
        tasks = {task.task_id: task for task in graph.tasks}

        self.assertEqual(
            frozenset(f"bwd.L0.dispatch#{index}" for index in range(3)),
            tasks["bwd.L0.ffn"].dependencies,
        )
        self.assertEqual(6, len(graph.ops))

    def test_whole_layer_unchanged(self):
        backward = build_backward(_model(layers=1), CLUSTER, COST, 1000)

        tasks, ops = lower_backward(backward, StepLayout())

        self.assertIn("bwd.L0.dispatch", [op.op_id for op in ops])
        self.assertIn("bwd.L0.ffn", [task.task_id for task in tasks])


class TestTrainingStep(unittest.TestCase):
    def test_packing_change_exchanges_parameters(self):
        scenario = validate_spec(
            CLUSTER, _model(expert_param_bytes=1000), COST
        )

        workload = build_training_step(
            scenario,
            1000,
            StepLayout(),
            experts_per_device=2,
            previous_experts_per_device=1,
        )
        tasks = {task.task_id: task for task in workload.tasks}

        self.assertEqual("exchange", workload.ops[0].op_id)
        self.assertEqual(frozenset(("exchange",)), tasks["swap"].dependencies)
        self.assertEqual(
            frozenset(("swap",)), tasks["fwd.L0.attention"].dependencies
        )

    def test_steady_packing_has_no_exchange(self):
        scenario = validate_spec(CLUSTER, _model(), COST)

        workload = build_training_step(
            scenario, 1000, StepLayout(), include_forward=False
        )

        self.assertNotIn("exchange", [op.op_id for op in workload.ops])
        self.assertFalse(
            any(task.task_id.startswith("fwd") for task in workload.tasks)
        )
