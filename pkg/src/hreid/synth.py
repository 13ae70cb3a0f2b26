"""Synthetic re-identification datasets with tunable attribute difficulty.

Every attribute owns a block of dedicated feature axes.  Value centres of an
attribute sit ``separation`` apart inside that block, so ``separation``
controls how linearly discernible the attribute is under isotropic noise.
Attribute values are drawn per identity along a chain: attribute ``i``
copies the (index-mapped) value of attribute ``i - 1`` with probability
``correlation_with_previous``, otherwise it is drawn uniformly.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .data import Attribute, AttributeSchema, Dataset, write_dataset

__all__ = ["AttributeSpec", "SynthConfig", "generate", "write_dataset",
           "load_synth_config"]

JITTER_SCALE = 0.5


@dataclass(frozen=True)
class AttributeSpec:
    name: str
    values: tuple[str, ...] = ("no", "yes")
    separation: float = 3.0
    correlation_with_previous: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if len(self.values) < 2:
            raise ValueError(f"attribute {self.name!r} needs at least 2 values")
        if self.separation < 0:
            raise ValueError(f"attribute {self.name!r}: separation must be >= 0")
        c = self.correlation_with_previous
        if c is not None and not 0.0 <= c <= 1.0:
            raise ValueError(f"attribute {self.name!r}: correlation must lie in [0, 1]")


def _default_attributes() -> tuple[AttributeSpec, ...]:
    # Three easy, mutually independent attributes, each shadowed by a hard
    # attribute that is strongly tied to it.
    return (
        AttributeSpec("gender", ("male", "female"), 6.0, None),
        AttributeSpec("hair", ("short", "long"), 1.0, 0.9),
        AttributeSpec("upper", ("dark", "light"), 5.5, 0.0),
        AttributeSpec("bag", ("no", "yes"), 1.0, 0.9),
        AttributeSpec("lower", ("pants", "skirt"), 5.0, 0.0),
        AttributeSpec("hat", ("no", "yes"), 1.0, 0.9),
    )


@dataclass(frozen=True)
class SynthConfig:
    seed: int = 0
    n_identities: int = 100
    images_per_identity: int = 50
    feature_dim: int = 32
    attributes: tuple[AttributeSpec, ...] = field(default_factory=_default_attributes)
    noise_sigma: float = 1.0
    train_fraction: float = 0.5
    gallery_fraction: float = 0.4
    query_fraction: float = 0.1
    n_cameras: int = 6

    def __post_init__(self):
        attrs = tuple(a if isinstance(a, AttributeSpec) else AttributeSpec(**a)
                      for a in self.attributes)
        object.__setattr__(self, "attributes", attrs)
        if self.n_identities < 1 or self.images_per_identity < 1:
            raise ValueError("n_identities and images_per_identity must be positive")
        if not attrs:
            raise ValueError("at least one attribute is required")
        if self.feature_dim < len(attrs):
            raise ValueError(
                f"feature_dim {self.feature_dim} < number of attributes {len(attrs)}"
            )
        if self.noise_sigma <= 0:
            raise ValueError("noise_sigma must be positive")
        if self.n_cameras < 1:
            raise ValueError("n_cameras must be positive")
        fr = (self.train_fraction, self.gallery_fraction, self.query_fraction)
        if min(fr) < 0 or abs(sum(fr) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be non-negative and sum to 1, got {fr}")
        if self.query_fraction > 0 and self.gallery_fraction == 0:
            raise ValueError("queries need a non-empty gallery")
        if len({a.name for a in attrs}) != len(attrs):
            raise ValueError("attribute names must be unique")

    @property
    def schema(self) -> AttributeSchema:
        return AttributeSchema(tuple(Attribute(a.name, a.values) for a in self.attributes))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["attributes"] = [
            {**asdict(a), "values": list(a.values)} for a in self.attributes
        ]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
        d = dict(d)
        if "attributes" in d:
            attrs = []
            for a in d["attributes"]:
                bad = set(a) - set(AttributeSpec.__dataclass_fields__)
                if bad:
                    raise ValueError(f"unknown attribute keys: {sorted(bad)}")
                attrs.append(AttributeSpec(**a))
            d["attributes"] = tuple(attrs)
        return cls(**d)


def load_synth_config(path) -> SynthConfig:
    with open(path, encoding="utf-8") as f:
        return SynthConfig.from_dict(json.load(f))


def _value_offsets(n_values: int, separation: float, n_axes: int) -> np.ndarray:
    """(n_values, n_axes) centres with pairwise distance ``separation``.

    Uses a regular simplex when the block has room for one, otherwise places
    the values on a line with adjacent centres ``separation`` apart.
    """
    out = np.zeros((n_values, n_axes))
    if n_values <= n_axes:
        out[:, :n_values] = np.eye(n_values) * separation / math.sqrt(2.0)
        out -= out.mean(axis=0)
    else:
        out[:, 0] = (np.arange(n_values) - (n_values - 1) / 2.0) * separation
    return out


def _split_counts(n: int, cfg: SynthConfig) -> tuple[int, int, int]:
    n_query = int(round(cfg.query_fraction * n))
    n_gallery = int(round(cfg.gallery_fraction * n))
    if n_query and not n_gallery:
        n_gallery = 1
    n_query = min(n_query, n - n_gallery)
    n_train = n - n_query - n_gallery
    return n_train, n_gallery, n_query


def generate(config: SynthConfig) -> Dataset:
    """Deterministic synthetic dataset for ``config``."""
    rng = np.random.default_rng(config.seed)
    attrs = config.attributes
    dim = config.feature_dim
    axes_per = dim // len(attrs)

    offsets = [_value_offsets(len(a.values), a.separation, axes_per) for a in attrs]

    n_ids = config.n_identities
    values = np.zeros((n_ids, len(attrs)), dtype=np.int64)
    for j, a in enumerate(attrs):
        k = len(a.values)
        uniform = rng.integers(0, k, size=n_ids)
        if j == 0 or a.correlation_with_previous is None:
            values[:, j] = uniform
            continue
        copy = rng.random(n_ids) < a.correlation_with_previous
        values[:, j] = np.where(copy, values[:, j - 1] % k, uniform)

    centers = rng.normal(0.0, JITTER_SCALE * config.noise_sigma, size=(n_ids, dim))
    for j in range(len(attrs)):
        block = slice(j * axes_per, (j + 1) * axes_per)
        centers[:, block] += offsets[j][values[:, j]]

    m = config.images_per_identity
    n = n_ids * m
    ident = np.repeat(np.arange(n_ids), m)
    feats = centers[ident] + rng.normal(0.0, config.noise_sigma, size=(n, dim))
    feats = feats.astype(np.float32).astype(np.float64)
    cameras = rng.integers(0, config.n_cameras, size=n)

    n_train, n_gallery, _ = _split_counts(m, config)
    splits = np.empty(n, dtype=object)
    for i in range(n_ids):
        order = rng.permutation(m)
        lab = np.empty(m, dtype=object)
        lab[order[:n_train]] = "train"
        lab[order[n_train:n_train + n_gallery]] = "gallery"
        lab[order[n_train + n_gallery:]] = "query"
        splits[i * m:(i + 1) * m] = lab

    width = max(4, len(str(n_ids - 1)))
    return Dataset(
        schema=config.schema,
        sample_ids=[f"s{i:07d}" for i in range(n)],
        identity_ids=[f"id{k:0{width}d}" for k in ident],
        camera_ids=[f"c{c}" for c in cameras],
        splits=splits.astype(str),
        labels=values[ident],
        features=feats,
        feature_dim=dim,
    )


def generate_to(config: SynthConfig, out_dir) -> dict[str, Path]:
    return write_dataset(generate(config), out_dir)
