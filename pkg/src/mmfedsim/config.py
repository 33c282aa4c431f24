"""Experiment configuration files and run manifests."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Optional

from . import __version__
from .data import ModalitySpec, PopulationConfig, total_channels
from .engine import STRATEGIES, FLConfig
from .errors import ConfigError, DimensionError
from .nn.layers import layer_from_dict, layer_to_dict
from .nn.model import ArchSpec, OptimizerConfig

AXES = ("p_inc", "M")
METRICS = ("euclidean", "cosine")


def _check_keys(data: Any, allowed, path: str) -> dict:
    if not isinstance(data, dict):
        raise ConfigError(path, "expected an object")
    unknown = sorted(set(data) - set(allowed))
    if unknown:
        raise ConfigError(f"{path}.{unknown[0]}", "unknown field")
    return data


def _build(cls, data: dict, path: str, **fixed):
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(data, names, path)
    try:
        return cls(**{**data, **fixed})
    except ConfigError as exc:
        sub = exc.field.split(".")[-1]
        raise ConfigError(f"{path}.{sub}", exc.message) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from None


def _optimizer(data, path) -> OptimizerConfig:
    return _build(OptimizerConfig, data, path)


def population_from_dict(data: dict) -> PopulationConfig:
    data = dict(_check_keys(data, [f.name for f in dataclasses.fields(PopulationConfig)], "population"))
    if "modalities" in data:
        mods = data["modalities"]
        if not isinstance(mods, list):
            raise ConfigError("population.modalities", "expected a list")
        data["modalities"] = tuple(
            _build(ModalitySpec, m, f"population.modalities[{i}]") for i, m in enumerate(mods)
        )
    if "samples_per_client" in data:
        spc = data["samples_per_client"]
        if not (isinstance(spc, list) and len(spc) == 2):
            raise ConfigError("population.samples_per_client", "expected [min, max]")
        data["samples_per_client"] = tuple(int(v) for v in spc)
    try:
        return PopulationConfig(**data)
    except ConfigError as exc:
        if exc.field.startswith("population"):
            raise
        raise ConfigError("population." + exc.field, exc.message) from None
    except (TypeError, ValueError) as exc:
        raise ConfigError("population", str(exc)) from None


def fl_from_dict(data: dict) -> FLConfig:
    data = dict(_check_keys(data, [f.name for f in dataclasses.fields(FLConfig)], "fl"))
    for key in ("optimizer", "moon_optimizer"):
        if key in data:
            data[key] = _optimizer(data[key], f"fl.{key}")
    try:
        return FLConfig(**data)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("fl", str(exc)) from None


@dataclass(frozen=True)
class ArchOverrides:
    """Encoder template knobs; ``layers`` replaces the default conv stack."""

    d_enc: int = 128
    d_proj: int = 64
    layers: Optional[tuple] = None

    def build(self, population: PopulationConfig) -> ArchSpec:
        channels = total_channels(population.modalities)
        if self.layers is None:
            return ArchSpec.default(
                channels, population.window_len, population.num_classes, self.d_enc, self.d_proj
            )
        layers = tuple(layer_from_dict(d) for d in self.layers)
        shape = (channels, population.window_len)
        return ArchSpec(layers, self.d_enc, self.d_proj, population.num_classes, shape)


@dataclass(frozen=True)
class CostOverrides:
    per_modality_channels: int = 3
    window_len: int = 1000
    num_classes: int = 4
    fusion_shared_dim: Optional[int] = None
    bytes_per_param: int = 8
    num_clients: int = 100
    selection_fraction: float = 0.1
    rounds: int = 20
    harmony_unimodal_fraction: float = 0.5


@dataclass(frozen=True)
class SweepOverrides:
    p_inc: tuple = (0.4, 0.6, 0.8)
    M: tuple = (5, 10, 15, 20, 25, 30)
    cost_only: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    population: PopulationConfig = field(default_factory=PopulationConfig)
    fl: FLConfig = field(default_factory=FLConfig)
    arch: ArchOverrides = field(default_factory=ArchOverrides)
    cost: CostOverrides = field(default_factory=CostOverrides)
    sweep: SweepOverrides = field(default_factory=SweepOverrides)
    strategies: tuple = ("flism", "fedavg")
    seeds: tuple = (0, 1, 2, 3, 4)
    output_dir: str = "results"
    embed_metric: str = "euclidean"

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("seeds", "must be non-empty")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds", "must be distinct")
        if not self.strategies:
            raise ConfigError("strategies", "must be non-empty")
        for i, s in enumerate(self.strategies):
            if s not in STRATEGIES:
                raise ConfigError(f"strategies[{i}]", f"unknown strategy {s!r}; one of {STRATEGIES}")
        if self.embed_metric not in METRICS:
            raise ConfigError("embed_metric", f"must be one of {METRICS}")
        if not self.output_dir:
            raise ConfigError("output_dir", "must be non-empty")
        try:
            self.arch.build(self.population)
        except DimensionError as exc:
            raise ConfigError("arch", f"does not fit population.window_len: {exc}") from None

    def build_arch(self) -> ArchSpec:
        return self.arch.build(self.population)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["arch"]["layers"] = None if self.arch.layers is None else [dict(x) for x in self.arch.layers]
        return _jsonable(d)

    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _int_list(value, path) -> tuple:
    if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
        raise ConfigError(path, "expected a list of integers")
    return tuple(value)


def experiment_from_dict(data: dict) -> ExperimentConfig:
    names = [f.name for f in dataclasses.fields(ExperimentConfig)]
    _check_keys(data, names, "config")
    kw: dict = {}
    if "population" in data:
        kw["population"] = population_from_dict(data["population"])
    if "fl" in data:
        kw["fl"] = fl_from_dict(data["fl"])
    if "arch" in data:
        arch = dict(_check_keys(data["arch"], ("d_enc", "d_proj", "layers"), "arch"))
        if arch.get("layers") is not None:
            try:
                layers = [layer_to_dict(layer_from_dict(x)) for x in arch["layers"]]
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError("arch.layers", f"bad layer description: {exc}") from None
            arch["layers"] = tuple(layers)
        kw["arch"] = _build(ArchOverrides, arch, "arch")
    if "cost" in data:
        kw["cost"] = _build(CostOverrides, data["cost"], "cost")
    if "sweep" in data:
        sweep = dict(_check_keys(data["sweep"], ("p_inc", "M", "cost_only"), "sweep"))
        if "p_inc" in sweep:
            if not isinstance(sweep["p_inc"], list) or not all(
                isinstance(v, (int, float)) and 0 <= v <= 1 for v in sweep["p_inc"]
            ):
                raise ConfigError("sweep.p_inc", "expected a list of ratios in [0, 1]")
            sweep["p_inc"] = tuple(float(v) for v in sweep["p_inc"])
        if "M" in sweep:
            sweep["M"] = _int_list(sweep["M"], "sweep.M")
            for m in sweep["M"]:
                if not 2 <= m <= 64:
                    raise ConfigError("sweep.M", f"M={m} outside [2, 64]")
        kw["sweep"] = _build(SweepOverrides, sweep, "sweep")
    if "strategies" in data:
        if not isinstance(data["strategies"], list):
            raise ConfigError("strategies", "expected a list")
        kw["strategies"] = tuple(str(s).lower() for s in data["strategies"])
    if "seeds" in data:
        kw["seeds"] = _int_list(data["seeds"], "seeds")
    for key in ("output_dir", "embed_metric"):
        if key in data:
            kw[key] = data[key]
    try:
        return ExperimentConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError("config", str(exc)) from None


def load_config(path) -> ExperimentConfig:
    """Parse and validate a JSON config; syntax errors report line and column."""
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}, column {exc.colno}", exc.msg) from None
    return experiment_from_dict(data)


def default_config_dict() -> dict:
    text = resources.files("mmfedsim").joinpath("defaults.json").read_text()
    return json.loads(text)


def default_config() -> ExperimentConfig:
    return experiment_from_dict(default_config_dict())


@dataclass
class RunManifest:
    config_hash: str
    tool_version: str
    command: str
    files: dict  # seed label -> list of relative paths
    wall_clock_seconds: float

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def make_manifest(cfg: ExperimentConfig, command: str, files: dict, seconds: float) -> RunManifest:
    return RunManifest(cfg.config_hash(), __version__, command, files, float(seconds))


def thread_cap(env=None) -> int:
    """Worker cap from ``SIM_THREADS``; defaults to the number of cores."""
    env = os.environ if env is None else env
    raw = env.get("SIM_THREADS")
    if raw is None or raw == "":
        return os.cpu_count() or 1
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError("SIM_THREADS", f"not an integer: {raw!r}") from None
    if n < 1:
        raise ConfigError("SIM_THREADS", "must be >= 1")
    return n
