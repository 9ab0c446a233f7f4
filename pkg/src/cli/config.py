from __future__ import annotations

import argparse
import enum
import hashlib
import json
from collections.abc import Callable, Mapping
from dataclasses import MISSING, asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any

import yaml

from moe_sched import constants
from moe_sched.core import (
    ClusterSpec,
    CostModel,
    ModelSpec,
    Scenario,
    validate_spec,
)
from moe_sched.errors import ConfigError, MoeSchedError, ParseError
from moe_sched.infersched import InferenceMode
from moe_sched.trainsched import PolicyName, parse_policy
from moe_sched.workload import GeneratorParams, TraceMode

type Decoder = Callable[[Any, str], Any]


@dataclass(frozen=True, kw_only=True)
class PackingConfig:
    enabled: bool = False
    max_experts_per_device: int | None = None
    warmup_steps: int = constants.PACKING_WARMUP_STEPS
    cadence: int = constants.PACKING_CADENCE


@dataclass(frozen=True, kw_only=True)
class TrainingConfig:
    tokens_per_device: int
    policies: tuple[PolicyName, ...] = (PolicyName.BASELINE, PolicyName.LINA)
    steps: int = 1
    partition_bytes: int = constants.DEFAULT_PARTITION_BYTES
    bucket_bytes: int = constants.DEFAULT_BUCKET_BYTES
    packing: PackingConfig = field(default_factory=PackingConfig)
    contention_samples: int = 0
    partition_sweep_mb: tuple[float, ...] = ()


@dataclass(frozen=True, kw_only=True)
class InferenceConfig:
    modes: tuple[InferenceMode, ...] = tuple(InferenceMode)
    path_length: int = constants.DEFAULT_PATH_LENGTH
    path_lengths: tuple[int, ...] = ()
    max_packed: int = constants.DEFAULT_MAX_PACKED
    profile: str | None = None
    profile_tokens: int = 50_000


@dataclass(frozen=True, kw_only=True)
class GeneratorConfig:
    mode: TraceMode = TraceMode.INFERENCE_SKEWED
    params: GeneratorParams


@dataclass(frozen=True, kw_only=True)
class OutputConfig:
    dir: str = "out"
    timelines: bool = True


@dataclass(frozen=True, kw_only=True)
class ScenarioConfig:
    scenario: Scenario
    seed: int = 0
    generator: GeneratorConfig | None = None
    trace: str | None = None
    training: TrainingConfig | None = None
    inference: InferenceConfig | None = None
    output: OutputConfig = field(default_factory=OutputConfig)
    source: dict[str, Any] = field(default_factory=dict, compare=False)

    @property
    def out_dir(self) -> Path:
        return Path(self.output.dir)

    @property
    def config_hash(self) -> str:
        """sha256 of the canonical config, output location excluded."""
        canonical = {
            key: value
            for key, value in self.source.items()
            if key != "output"
        }
        canonical["seed"] = self.seed
        encoded = json.dumps(canonical, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(encoded.encode("utf-8")).hexdigest()

    def require_training(self) -> TrainingConfig:
        if self.training is None:
            raise ConfigError("training", "section is required")
        return self.training

    def require_generator(self) -> GeneratorConfig:
        if self.generator is None:
            raise ConfigError("generator", "section is required")
        return self.generator


def _join(path: str, key: str | int) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else key


def _mapping(raw: Any, path: str) -> dict[str, Any]:
    if not isinstance(raw, dict):
        raise ConfigError(path, "expected a mapping")
    return raw


def _integer(raw: Any, path: str) -> int:
    if isinstance(raw, bool) or not isinstance(raw, int):
        raise ConfigError(path, f"expected an integer, got {raw!r}")
    return raw


def _number(raw: Any, path: str) -> float:
    if isinstance(raw, bool) or not isinstance(raw, int | float):
        raise ConfigError(path, f"expected a number, got {raw!r}")
    return float(raw)


def _boolean(raw: Any, path: str) -> bool:
    if not isinstance(raw, bool):
        raise ConfigError(path, f"expected true or false, got {raw!r}")
    return raw


def _string(raw: Any, path: str) -> str:
    if not isinstance(raw, str):
        raise ConfigError(path, f"expected a string, got {raw!r}")
    return raw


def _optional(decoder: Decoder) -> Decoder:
    def decode(raw: Any, path: str) -> Any:
        return None if raw is None else decoder(raw, path)

    return decode


def _sequence(decoder: Decoder) -> Decoder:
    def decode(raw: Any, path: str) -> tuple:
        if not isinstance(raw, list):
            raise ConfigError(path, "expected a list")
        return tuple(
            decoder(item, _join(path, index)) for index, item in enumerate(raw)
        )

    return decode


def _choice[T](parse: Callable[[str], T]) -> Decoder:
    def decode(raw: Any, path: str) -> T:
        try:
            return parse(_string(raw, path))
        except (ValueError, MoeSchedError) as err:
            raise ConfigError(path, str(err)) from None

    return decode


def _section[T](
    cls: type[T],
    raw: Any,
    path: str,
    decoders: Mapping[str, Decoder],
    **extra: Any,
) -> T:
    """Decode a mapping into `cls`, rejecting unknown and missing keys."""
    values = _mapping(raw, path)
    names = {item.name for item in fields(cls)}  # type: ignore[arg-type]
    for key in values:
        if key not in decoders or key not in names:
            raise ConfigError(_join(path, key), "unknown key")

    for item in fields(cls):  # type: ignore[arg-type]
        if (
            item.name in decoders
            and item.name not in values
            and item.default is MISSING
            and item.default_factory is MISSING
        ):
            raise ConfigError(_join(path, item.name), "required key missing")

    decoded = {
        key: decoders[key](value, _join(path, key))
        for key, value in values.items()
    }
    return cls(**decoded, **extra)


_CLUSTER = {
    "num_devices": _integer,
    "devices_per_node": _integer,
    "inter_node_bw": _number,
    "intra_node_bw": _number,
    "launch_latency": _number,
    "allreduce_algorithm": _string,
}

_MODEL = {
    "num_layers": _integer,
    "experts_per_layer": _integer,
    "token_embedding_bytes": _integer,
    "nonexpert_grad_bytes": _sequence(_integer),
    "gating_top_k": _integer,
    "expert_param_bytes": _integer,
}

_COST = {item.name: _number for item in fields(CostModel)}

_PACKING = {
    "enabled": _boolean,
    "max_experts_per_device": _optional(_integer),
    "warmup_steps": _integer,
    "cadence": _integer,
}


def _packing(raw: Any, path: str) -> PackingConfig:
    return _section(PackingConfig, raw, path, _PACKING)


_TRAINING = {
    "tokens_per_device": _integer,
    "policies": _sequence(_choice(parse_policy)),
    "steps": _integer,
    "partition_bytes": _integer,
    "bucket_bytes": _integer,
    "packing": _packing,
    "contention_samples": _integer,
    "partition_sweep_mb": _sequence(_number),
}

_INFERENCE = {
    "modes": _sequence(_choice(InferenceMode)),
    "path_length": _integer,
    "path_lengths": _sequence(_integer),
    "max_packed": _integer,
    "profile": _optional(_string),
    "profile_tokens": _integer,
}

_GENERATOR_PARAMS = {
    "pattern_strength": _number,
    "zipf_s": _number,
    "tokens_per_batch": _integer,
    "num_batches": _integer,
    "batch_concentration": _optional(_number),
}

_OUTPUT = {"dir": _string, "timelines": _boolean}


def _generator(raw: Any, path: str, seed: int) -> GeneratorConfig:
    values = dict(_mapping(raw, path))
    mode = _choice(TraceMode)(
        values.pop("mode", str(TraceMode.INFERENCE_SKEWED)),
        _join(path, "mode"),
    )
    if "seed" in values:
        raise ConfigError(_join(path, "seed"), "use the top-level seed")
    params = _section(
        GeneratorParams, values, path, _GENERATOR_PARAMS, seed=seed
    )
    return GeneratorConfig(mode=mode, params=params)


_TOP_LEVEL = frozenset(
    (
        "seed",
        "cluster",
        "model",
        "cost",
        "generator",
        "trace",
        "training",
        "inference",
        "output",
    )
)


def decode_config(
    raw: Any,
    *,
    seed: int | None = None,
    out: str | None = None,
    base_dir: Path | None = None,
) -> ScenarioConfig:
    values = _mapping(raw, "")
    for key in values:
        if key not in _TOP_LEVEL:
            raise ConfigError(key, "unknown key")
    for key in ("cluster", "model"):
        if key not in values:
            raise ConfigError(key, "required key missing")

    config_seed = _integer(values.get("seed", 0), "seed")
    if seed is not None:
        config_seed = seed

    scenario = validate_spec(
        cluster=_section(ClusterSpec, values["cluster"], "cluster", _CLUSTER),
        model=_section(ModelSpec, values["model"], "model", _MODEL),
        cost=_section(CostModel, values.get("cost", {}), "cost", _COST),
    )

    generator = None
    if "generator" in values:
        generator = _generator(values["generator"], "generator", config_seed)

    trace = _optional(_string)(values.get("trace"), "trace")
    if generator is not None and trace is not None:
        raise ConfigError("trace", "set either generator or trace, not both")
    if trace is not None and base_dir is not None:
        trace = str(base_dir / trace)

    training = None
    if "training" in values:
        training = _section(
            TrainingConfig, values["training"], "training", _TRAINING
        )

    inference = None
    if "inference" in values:
        inference = _section(
            InferenceConfig, values["inference"], "inference", _INFERENCE
        )
        if inference.profile is not None and base_dir is not None:
            inference = replace(
                inference, profile=str(base_dir / inference.profile)
            )

    output = _section(OutputConfig, values.get("output", {}), "output", _OUTPUT)
    if out is not None:
        output = replace(output, dir=out)

    return ScenarioConfig(
        scenario=scenario,
        seed=config_seed,
        generator=generator,
        trace=trace,
        training=training,
        inference=inference,
        output=output,
        source=values,
    )


def _plain(value: Any) -> Any:
    """Tuples and enums as JSON sees them."""
    if isinstance(value, tuple | list):
        return [_plain(item) for item in value]
    if isinstance(value, dict):
        return {key: _plain(item) for key, item in value.items()}
    if isinstance(value, enum.Enum):
        return str(value.value)
    return value


def encode_config(config: ScenarioConfig) -> dict[str, Any]:
    """The raw document `decode_config` turns back into `config`."""
    raw: dict[str, Any] = {"seed": config.seed, **config.scenario.to_dict()}
    if config.generator is not None:
        params = config.generator.params.to_dict()
        del params["seed"]
        raw["generator"] = {"mode": str(config.generator.mode), **params}
    if config.trace is not None:
        raw["trace"] = config.trace
    if config.training is not None:
        raw["training"] = _plain(asdict(config.training))
    if config.inference is not None:
        raw["inference"] = _plain(asdict(config.inference))
    raw["output"] = asdict(config.output)
    return raw


def read_document(path: str | Path) -> Any:
    source = Path(path)
    try:
        text = source.read_bytes().decode("utf-8")
    except UnicodeDecodeError as err:
        raise ParseError.invalid_utf8(err) from err

    if source.suffix in (".yaml", ".yml"):
        try:
            return yaml.safe_load(text)
        except yaml.YAMLError as err:
            raise ConfigError("", f"invalid YAML ({err})") from err

    try:
        return json.loads(text)
    except json.JSONDecodeError as err:
        raise ParseError(err.lineno, err.msg) from err


def load_config(
    path: str | Path, *, seed: int | None = None, out: str | None = None
) -> ScenarioConfig:
    return decode_config(
        read_document(path), seed=seed, out=out, base_dir=Path(path).parent
    )


def config_from_args(args: argparse.Namespace) -> ScenarioConfig:
    return load_config(args.config, seed=args.seed, out=args.out)


def add_common_arguments(parser: argparse.ArgumentParser):
    parser.add_argument(
        "--config", "-c", required=True, help="Scenario config (JSON or YAML)"
    )
    parser.add_argument(
        "--seed", type=int, default=None, help="Override the config seed"
    )
    parser.add_argument(
        "--out", default=None, help="Override the output directory"
    )
    parser.add_argument(
        "--verbose", "-v", action="count", default=0, help="Verbose output"
    )
