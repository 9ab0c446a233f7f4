import itertools
import tempfile
import unittest
from pathlib import Path

import numpy as np

from moe_sched.core import ModelSpec
from moe_sched.errors import (
    InvalidSpec,
    LayerTooEarly,
    ParseError,
    ProfileMissing,
    SchemaMismatch,
    TraceTooShort,
)
from moe_sched.infersched import (
    PopularityProfile,
    build_profile,
    estimate_popularity,
    load_profile,
    profile_from_dict,
    profile_to_dict,
    save_profile,
)
from moe_sched.workload import GeneratorParams, TraceMode, TraceSet, gen_trace


def _trace(paths, experts: int = 4) -> TraceSet:
    paths = np.asarray(paths)
    return TraceSet(
        num_layers=paths.shape[1],
        experts_per_layer=experts,
        top_k=1,
        batch=np.zeros(paths.shape[0]),
        token=np.arange(paths.shape[0]),
        selections=paths[:, :, None],
    )


def _sum_trace(experts: int = 4) -> TraceSet:
    """Layer 3 expert is the sum of the first three, modulo expert count."""
    return _trace(
        [
            (a, b, c, (a + b + c) % experts)
            for a, b, c in itertools.product(range(experts), repeat=3)
        ],
        experts,
    )


class TestBuildProfile(unittest.TestCase):
    def test_deterministic_transition(self):
        paths = [(expert, (expert + 1) % 4) for expert in range(4)] * 5
        profile = build_profile(_trace(paths), path_length=1)

        for expert in range(4):
            distribution = profile.lookup(1, (expert,))
            self.assertEqual(1.0, distribution[(expert + 1) % 4])
            self.assertEqual(1.0, distribution.sum())

    def test_matches_ground_truth(self):
        generated = gen_trace(
            GeneratorParams(
                pattern_strength=0.6,
                tokens_per_batch=50_000,
                seed=3,
                batch_concentration=None,
            ),
            ModelSpec(
                num_layers=3,
                experts_per_layer=4,
                token_embedding_bytes=8,
                gating_top_k=1,
            ),
            TraceMode.INFERENCE_SKEWED,
        )

        profile = build_profile(generated.trace, path_length=1)

        for target in (1, 2):
            for expert in range(4):
                np.testing.assert_allclose(
                    generated.truth.rows[target - 1][expert],
                    profile.lookup(target, (expert,)),
                    atol=0.02,
                )

    def test_longer_paths_see_more(self):
        trace = _sum_trace()

        short = build_profile(trace, path_length=1)
        full = build_profile(trace, path_length=3)

        np.testing.assert_allclose([0.25] * 4, short.lookup(3, (2,)))
        self.assertEqual(1.0, full.lookup(3, (1, 2, 3))[2])

    def test_backs_off_to_shorter_suffix(self):
        paths = [(0, 1, 2), (1, 1, 3), (0, 1, 3)]
        profile = build_profile(_trace(paths), path_length=2)

        np.testing.assert_allclose(
            [0.5, 0.5], profile.lookup(2, (0, 1))[2:]
        )
        np.testing.assert_allclose(
            [0, 0, 1 / 3, 2 / 3], profile.lookup(2, (3, 1))
        )
        np.testing.assert_allclose(
            profile.marginals[2], profile.lookup(2, (3, 0))
        )

    def test_needs_enough_layers(self):
        with self.assertRaises(TraceTooShort):
            build_profile(_trace([(0, 1)]), path_length=2)

    def test_path_length_positive(self):
        with self.assertRaises(InvalidSpec):
            build_profile(_trace([(0, 1)]), path_length=0)


class TestProfileFile(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self._tmp.cleanup)
        self.dir = Path(self._tmp.name)

    def test_saved_profile_estimates_the_same(self):
        profile = build_profile(_sum_trace(), path_length=2)
        path = self.dir / "profile.json"
        save_profile(profile, path)

        loaded = load_profile(path)
        paths = np.array([[0, 1, 2], [3, 3, 1], [2, 0, 0]])
        np.testing.assert_allclose(
            estimate_popularity(profile, paths, 3, 1).popularity,
            estimate_popularity(loaded, paths, 3, 1).popularity,
        )
        self.assertEqual(2, loaded.path_length)

    def test_missing_file(self):
        with self.assertRaises(ProfileMissing):
            load_profile(self.dir / "absent.json")

    def test_invalid_utf8(self):
        path = self.dir / "profile.json"
        path.write_bytes(b'{\n"l": "\xff"}\n')

        with self.assertRaises(ParseError) as raised:
            load_profile(path)

        self.assertEqual(2, raised.exception.line)

    def test_marginals_shape_checked(self):
        raw = profile_to_dict(build_profile(_sum_trace(), path_length=1))
        raw["marginals"] = raw["marginals"][:2]

        with self.assertRaises(SchemaMismatch):
            profile_from_dict(raw)

    def test_missing_key(self):
        with self.assertRaises(SchemaMismatch):
            profile_from_dict({"l": 1, "layers": 2})


class TestEstimatePopularity(unittest.TestCase):
    def _profile(self) -> PopularityProfile:
        return PopularityProfile(
            path_length=1,
            num_layers=2,
            experts_per_layer=4,
            marginals=np.full((2, 4), 0.25),
            distributions={
                1: {
                    (0,): np.array([0.2, 0.5, 0.3, 0.0]),
                    (1,): np.array([0.0, 1.0, 0.0, 0.0]),
                }
            },
        )

    def test_averages_top_k_probabilities(self):
        estimate = estimate_popularity(
            self._profile(), np.array([[0], [1]]), layer=1, k=1
        )

        self.assertAlmostEqual(0.75, estimate.popularity[1])
        self.assertAlmostEqual(0.75, estimate.popularity.sum())
        self.assertListEqual([[1], [1]], estimate.top_experts.tolist())

    def test_ties_go_to_lower_expert(self):
        estimate = estimate_popularity(
            self._profile(), np.array([[2]]), layer=1, k=2
        )

        self.assertListEqual([[0, 1]], estimate.top_experts.tolist())

    def test_layer_before_profile(self):
        with self.assertRaises(LayerTooEarly):
            estimate_popularity(self._profile(), np.array([[0]]), 0, 1)

    def test_history_too_short(self):
        with self.assertRaises(InvalidSpec):
            estimate_popularity(
                self._profile(), np.zeros((2, 0), np.int64), 1, 1
            )

    def test_empty_batch(self):
        estimate = estimate_popularity(
            self._profile(), np.zeros((0, 1), np.int64), 1, 1
        )
        self.assertEqual(0.0, estimate.popularity.sum())
