import json
import tempfile
import unittest
from pathlib import Path

from cli.config import decode_config, encode_config, load_config
from moe_sched.core import ClusterSpec, CostModel, ModelSpec
from moe_sched.errors import ConfigError, InvalidSpec, ParseError
from moe_sched.infersched import InferenceMode
from moe_sched.trainsched import PolicyName
from moe_sched.workload import TraceMode


def _raw(**sections):
    raw = {
        "cluster": {
            "num_devices": 4,
            "devices_per_node": 2,
            "inter_node_bw": 1e9,
            "intra_node_bw": 4e9,
        },
        "model": {
            "num_layers": 2,
            "experts_per_layer": 4,
            "token_embedding_bytes": 64,
            "gating_top_k": 1,
        },
    }
    raw.update(sections)
    return raw


class TestDecodeConfig(unittest.TestCase):
    def test_minimal(self):
        config = decode_config(_raw())

        self.assertEqual(4, config.scenario.cluster.num_devices)
        self.assertEqual(0, config.seed)
        self.assertIsNone(config.training)
        self.assertEqual(Path("out"), config.out_dir)

    def test_unknown_key_names_its_path(self):
        raw = _raw()
        raw["cluster"]["bogus"] = 1

        with self.assertRaises(ConfigError) as caught:
            decode_config(raw)

        self.assertEqual("cluster.bogus", caught.exception.path)

    def test_unknown_top_level_key(self):
        with self.assertRaises(ConfigError) as caught:
            decode_config(_raw(extras={}))

        self.assertEqual("extras", caught.exception.path)

    def test_missing_section(self):
        raw = _raw()
        del raw["model"]

        with self.assertRaises(ConfigError) as caught:
            decode_config(raw)

        self.assertEqual("model", caught.exception.path)

    def test_missing_required_key(self):
        with self.assertRaises(ConfigError) as caught:
            decode_config(_raw(training={}))

        self.assertEqual("training.tokens_per_device", caught.exception.path)

    def test_wrong_type(self):
        raw = _raw()
        raw["model"]["num_layers"] = "two"

        with self.assertRaises(ConfigError) as caught:
            decode_config(raw)

        self.assertEqual("model.num_layers", caught.exception.path)

    def test_unknown_policy_points_at_list_item(self):
        with self.assertRaises(ConfigError) as caught:
            decode_config(
                _raw(
                    training={
                        "tokens_per_device": 10,
                        "policies": ["Baseline", "Fastest"],
                    }
                )
            )

        self.assertEqual("training.policies[1]", caught.exception.path)

    def test_policy_alias(self):
        config = decode_config(
            _raw(training={"tokens_per_device": 10, "policies": ["Lina"]})
        )

        self.assertEqual((PolicyName.LINA,), config.training.policies)

    def test_invalid_scenario(self):
        raw = _raw()
        raw["cluster"]["devices_per_node"] = 3

        with self.assertRaises(InvalidSpec):
            decode_config(raw)

    def test_generator_takes_top_level_seed(self):
        config = decode_config(
            _raw(seed=9, generator={"pattern_strength": 0.5}), seed=4
        )

        self.assertEqual(4, config.generator.params.seed)
        self.assertEqual(TraceMode.INFERENCE_SKEWED, config.generator.mode)

        with self.assertRaises(ConfigError) as caught:
            decode_config(_raw(generator={"pattern_strength": 0.5, "seed": 1}))
        self.assertEqual("generator.seed", caught.exception.path)

    def test_generator_or_trace(self):
        with self.assertRaises(ConfigError):
            decode_config(
                _raw(generator={"pattern_strength": 0.5}, trace="trace.jsonl")
            )

    def test_hash_ignores_output(self):
        first = decode_config(_raw(output={"dir": "a"}))
        second = decode_config(_raw(output={"dir": "b"}), out="c")
        reseeded = decode_config(_raw(), seed=1)

        self.assertEqual(first.config_hash, second.config_hash)
        self.assertNotEqual(first.config_hash, reseeded.config_hash)
        self.assertEqual(Path("c"), second.out_dir)


class TestEncodeConfig(unittest.TestCase):
    def test_spec_types(self):
        config = decode_config(_raw(cost={"ffn_cost_per_token": 1e-6}))
        cluster, model, cost = config.scenario

        self.assertEqual(cluster, ClusterSpec(**cluster.to_dict()))
        self.assertEqual(model, ModelSpec(**model.to_dict()))
        self.assertEqual(cost, CostModel(**cost.to_dict()))

    def test_full_config(self):
        config = decode_config(
            _raw(
                seed=3,
                model={
                    "num_layers": 2,
                    "experts_per_layer": 4,
                    "token_embedding_bytes": 64,
                    "nonexpert_grad_bytes": [100, 200],
                    "gating_top_k": 1,
                },
                generator={"pattern_strength": 0.6, "zipf_s": 1.0},
                training={
                    "tokens_per_device": 128,
                    "policies": ["Lina", "FixedDeferral"],
                    "packing": {"enabled": True},
                    "partition_sweep_mb": [1, 2.5],
                },
                inference={"modes": ["Ideal", "Lina"], "path_lengths": [1, 2]},
                output={"dir": "results", "timelines": False},
            )
        )

        encoded = json.loads(json.dumps(encode_config(config)))

        self.assertEqual(config, decode_config(encoded))

    def test_trace_config(self):
        config = decode_config(_raw(trace="trace.jsonl"))

        self.assertEqual(config, decode_config(encode_config(config)))


class TestLoadConfig(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self._tmp.cleanup)
        self.dir = Path(self._tmp.name)

    def test_yaml_with_relative_paths(self):
        path = self.dir / "scenario.yaml"
        path.write_text(
            "cluster:\n"
            "  num_devices: 2\n"
            "  devices_per_node: 2\n"
            "  inter_node_bw: 1.0e+9\n"
            "  intra_node_bw: 2.0e+9\n"
            "model:\n"
            "  num_layers: 2\n"
            "  experts_per_layer: 2\n"
            "  token_embedding_bytes: 16\n"
            "trace: traces/trace.jsonl\n"
            "inference:\n"
            "  modes: [Baseline, Ideal]\n"
            "  profile: profile.json\n",
            encoding="utf-8",
        )

        config = load_config(path)

        self.assertEqual(str(self.dir / "traces/trace.jsonl"), config.trace)
        self.assertEqual(
            str(self.dir / "profile.json"), config.inference.profile
        )
        self.assertEqual(
            (InferenceMode.BASELINE, InferenceMode.IDEAL),
            config.inference.modes,
        )

    def test_invalid_yaml(self):
        path = self.dir / "broken.yaml"
        path.write_text("cluster: [1, 2\n", encoding="utf-8")

        with self.assertRaises(ConfigError):
            load_config(path)

    def test_invalid_utf8(self):
        path = self.dir / "scenario.json"
        path.write_bytes(b"\xff\xfe{}")

        with self.assertRaises(ParseError) as raised:
            load_config(path)

        self.assertEqual(1, raised.exception.line)
