"""Run configuration: one JSON document, validated exhaustively.

Component seeds are never read from the file; they are derived from the
single global ``seed`` with :func:`hreid.tree.derive_seed`, so any
component can be re-run on its own and still reproduce its bytes.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field, replace
from typing import Optional

from .engine import ATTRIBUTE_SOURCES
from .nn import HeadConfig, TripletConfig
from .synth import AttributeSpec, SynthConfig
from .tree import BuildConfig, ProbeConfig, derive_seed


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FlatConfig:
    """Shape of the single-network baseline."""

    hidden_layers: tuple[int, ...] = (512, 512)
    embedding_dim: int = 32


@dataclass(frozen=True)
class EvalConfig:
    attribute_source: str = "ground_truth"
    exclude_same_camera: bool = False
    top_k: int = 10
    n_random_trees: int = 5

    def __post_init__(self):
        if self.attribute_source not in ATTRIBUTE_SOURCES:
            raise ConfigError(f"attribute_source must be one of {ATTRIBUTE_SOURCES}")
        if self.top_k < 1:
            raise ConfigError("top_k must be >= 1")
        if self.n_random_trees < 0:
            raise ConfigError("n_random_trees must be >= 0")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    synth: SynthConfig = field(default_factory=SynthConfig)
    data_dir: Optional[str] = None
    build: BuildConfig = field(default_factory=BuildConfig)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    triplet: TripletConfig = field(default_factory=TripletConfig)
    head: HeadConfig = field(default_factory=HeadConfig)
    flat: FlatConfig = field(default_factory=FlatConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    fixed_layers: Optional[int] = None

    def __post_init__(self):
        if self.fixed_layers is not None and self.fixed_layers < 1:
            raise ConfigError("fixed_layers must be >= 1")

    # per-component views with derived seeds
    def synth_config(self) -> SynthConfig:
        return replace(self.synth, seed=derive_seed(self.seed, "synth"))

    def build_config(self) -> BuildConfig:
        return replace(self.build, seed=derive_seed(self.seed, "build"))

    def probe_config(self) -> ProbeConfig:
        return replace(self.probe, seed=derive_seed(self.seed, "probe"))

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=int(seed))

    def to_dict(self) -> dict:
        def clean(obj):
            d = dataclasses.asdict(obj)
            d.pop("seed", None)
            return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        synth = self.synth.to_dict()
        synth.pop("seed")
        return {
            "seed": self.seed,
            "synth": synth,
            "data_dir": self.data_dir,
            "build": clean(self.build),
            "probe": clean(self.probe),
            "triplet": clean(self.triplet),
            "head": clean(self.head),
            "flat": clean(self.flat),
            "eval": clean(self.eval),
            "fixed_layers": self.fixed_layers,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("run config must be a JSON object")
        _reject_unknown(d, {f.name for f in dataclasses.fields(cls)}, "run config")
        kw = {}
        if "seed" in d:
            kw["seed"] = _int(d["seed"], "seed")
        if "data_dir" in d:
            kw["data_dir"] = d["data_dir"]
        if "fixed_layers" in d:
            kw["fixed_layers"] = None if d["fixed_layers"] is None else _int(
                d["fixed_layers"], "fixed_layers")
        if "synth" in d:
            sd = dict(d["synth"])
            _reject_unknown(sd, set(SynthConfig.__dataclass_fields__) - {"seed"}, "synth")
            try:
                kw["synth"] = SynthConfig.from_dict(sd)
            except (TypeError, ValueError) as e:
                raise ConfigError(f"synth: {e}") from None
        sections = {"build": BuildConfig, "probe": ProbeConfig, "triplet": TripletConfig,
                    "head": HeadConfig, "flat": FlatConfig, "eval": EvalConfig}
        for name, typ in sections.items():
            if name in d:
                kw[name] = _section(typ, d[name], name)
        try:
            return cls(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from None


def _int(v, name):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name} must be an integer")
    return v


def _reject_unknown(d: dict, allowed: set, where: str) -> None:
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _section(typ, d, name):
    if not isinstance(d, dict):
        raise ConfigError(f"{name} must be a JSON object")
    allowed = {f.name for f in dataclasses.fields(typ)} - {"seed"}
    _reject_unknown(d, allowed, name)
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    try:
        return typ(**d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from None


def load_run_config(path) -> RunConfig:
    try:
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return RunConfig.from_dict(raw)


__all__ = ["AttributeSpec", "ConfigError", "EvalConfig", "FlatConfig", "RunConfig",
           "load_run_config"]
