"""Dataset representation, on-disk formats and attribute subsetting.

A dataset is held column-wise: string columns for ids/splits, an integer
label matrix (one column per schema attribute, ``-1`` = unlabeled) and a
float feature matrix.  ``Sample`` is a row view for callers that want one.

On-disk layout (one directory)::

    manifest.csv   sample_id, identity_id, camera_id, split, attr_<name>...
    schema.json    {"feature_dim": d, "attributes": [{"name", "values"}]}
    features.bin   b"HREID1" | u32 rows | u32 dim | float32 row-major (LE)
"""

from __future__ import annotations

import csv
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

SPLITS = ("train", "gallery", "query")
UNLABELED = -1
UNLABELED_TOKEN = "?"
FEATURE_MAGIC = b"HREID1"
_HEADER = struct.Struct("<6sII")

MANIFEST_NAME = "manifest.csv"
SCHEMA_NAME = "schema.json"
FEATURES_NAME = "features.bin"


class DatasetError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass(frozen=True)
class Attribute:
    name: str
    values: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(self.values))
        if len(self.values) < 2:
            raise DatasetError(f"attribute {self.name!r} needs at least 2 values")
        if len(set(self.values)) != len(self.values):
            raise DatasetError(f"attribute {self.name!r} has duplicate values")

    def index(self, value: str) -> int:
        try:
            return self.values.index(value)
        except ValueError:
            raise DatasetError(
                f"unknown value {value!r} for attribute {self.name!r}"
            ) from None


@dataclass(frozen=True)
class AttributeSchema:
    attributes: tuple[Attribute, ...]

    def __post_init__(self):
        object.__setattr__(self, "attributes", tuple(self.attributes))
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise DatasetError("attribute names must be unique")

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def __len__(self):
        return len(self.attributes)

    def __contains__(self, name):
        return name in self.names

    def position(self, name: str) -> int:
        for i, a in enumerate(self.attributes):
            if a.name == name:
                return i
        raise DatasetError(f"unknown attribute {name!r}")

    def get(self, name: str) -> Attribute:
        return self.attributes[self.position(name)]

    def to_dict(self) -> dict:
        return {"attributes": [{"name": a.name, "values": list(a.values)}
                               for a in self.attributes]}

    @classmethod
    def from_dict(cls, d: dict) -> "AttributeSchema":
        return cls(tuple(Attribute(a["name"], tuple(a["values"]))
                         for a in d["attributes"]))


@dataclass(frozen=True)
class Condition:
    """One edge on a root-to-node path: ``attribute == values[value_index]``."""

    attribute: str
    value_index: int

    def check(self, schema: AttributeSchema) -> None:
        attr = schema.get(self.attribute)
        if not 0 <= self.value_index < len(attr.values):
            raise DatasetError(
                f"value index {self.value_index} out of range for {self.attribute!r}"
            )

    def to_dict(self) -> dict:
        return {"attribute": self.attribute, "value_index": self.value_index}

    @classmethod
    def from_dict(cls, d: dict) -> "Condition":
        return cls(d["attribute"], int(d["value_index"]))


@dataclass(frozen=True)
class Sample:
    sample_id: str
    identity_id: str
    camera_id: str
    split: str
    attribute_values: dict
    features: np.ndarray


def _readonly(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable column store of samples.

    ``labels[i, j]`` is the value index of attribute ``j`` for sample ``i``
    or ``UNLABELED``.
    """

    schema: AttributeSchema
    sample_ids: np.ndarray
    identity_ids: np.ndarray
    camera_ids: np.ndarray
    splits: np.ndarray
    labels: np.ndarray
    features: np.ndarray
    feature_dim: int = field(default=-1)

    def __post_init__(self):
        n = len(self.sample_ids)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != n:
            if n == 0 and feats.size == 0:
                feats = feats.reshape(0, max(self.feature_dim, 0))
            else:
                raise DatasetError("feature matrix does not match sample count")
        dim = self.feature_dim if self.feature_dim >= 0 else feats.shape[1]
        if feats.shape[1] != dim:
            raise DatasetError(
                f"dimension mismatch: features have {feats.shape[1]}, expected {dim}"
            )
        if dim < 1:
            raise DatasetError("feature_dim must be positive")
        labels = np.asarray(self.labels, dtype=np.int64).reshape(n, len(self.schema))
        object.__setattr__(self, "feature_dim", int(dim))
        object.__setattr__(self, "features", _readonly(feats))
        object.__setattr__(self, "labels", _readonly(labels))
        for name in ("sample_ids", "identity_ids", "camera_ids", "splits"):
            col = np.asarray(getattr(self, name), dtype=str).reshape(n)
            object.__setattr__(self, name, _readonly(col))

        if len(np.unique(self.sample_ids)) != n:
            seen = set()
            for sid in self.sample_ids.tolist():
                if sid in seen:
                    raise DatasetError(f"duplicate sample_id: {sid}")
                seen.add(sid)
        bad = ~np.isin(self.splits, SPLITS)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise DatasetError(
                f"sample {self.sample_ids[i]}: unknown split {self.splits[i]!r}"
            )
        for j, attr in enumerate(self.schema.attributes):
            col = labels[:, j]
            bad = (col < UNLABELED) | (col >= len(attr.values))
            if bad.any():
                i = int(np.flatnonzero(bad)[0])
                raise DatasetError(
                    f"sample {self.sample_ids[i]}: invalid label for {attr.name!r}"
                )
        unl = (labels[self.splits == "train"] == UNLABELED).any(axis=1)
        if unl.any():
            i = int(np.flatnonzero(self.splits == "train")[np.flatnonzero(unl)[0]])
            raise DatasetError(
                f"training sample {self.sample_ids[i]} has unlabeled attributes"
            )

    def __len__(self):
        return len(self.sample_ids)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.schema == other.schema
            and self.feature_dim == other.feature_dim
            and all(
                np.array_equal(getattr(self, c), getattr(other, c))
                for c in ("sample_ids", "identity_ids", "camera_ids", "splits",
                          "labels", "features")
            )
        )

    __hash__ = None

    def __getitem__(self, i: int) -> Sample:
        attrs = {
            a.name: int(self.labels[i, j])
            for j, a in enumerate(self.schema.attributes)
            if self.labels[i, j] != UNLABELED
        }
        return Sample(
            str(self.sample_ids[i]), str(self.identity_ids[i]),
            str(self.camera_ids[i]), str(self.splits[i]), attrs, self.features[i],
        )

    @property
    def samples(self) -> list[Sample]:
        return [self[i] for i in range(len(self))]

    def take(self, index) -> "Dataset":
        """Sub-dataset of the given row indices or boolean mask, order preserved."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        elif index.size == 0:
            index = index.astype(np.intp)
        return Dataset(
            self.schema, self.sample_ids[index], self.identity_ids[index],
            self.camera_ids[index], self.splits[index], self.labels[index],
            self.features[index], self.feature_dim,
        )

    def split(self, name: str) -> "Dataset":
        if name not in SPLITS:
            raise DatasetError(f"unknown split {name!r}")
        return self.take(self.splits == name)

    def column(self, attribute: str) -> np.ndarray:
        return self.labels[:, self.schema.position(attribute)]

    def identities(self) -> list[str]:
        return sorted(set(self.identity_ids.tolist()))

    def check_query_coverage(self, strict: bool = False) -> list[str]:
        """Identities queried but absent from the gallery.

        Logged as a warning, or raised when ``strict``.
        """
        gallery = set(self.identity_ids[self.splits == "gallery"].tolist())
        missing = sorted(
            set(self.identity_ids[self.splits == "query"].tolist()) - gallery
        )
        if missing:
            msg = f"{len(missing)} query identities have no gallery image (e.g. {missing[0]})"
            if strict:
                raise DatasetError(msg)
            log.warning(msg)
        return missing


def condition_mask(dataset: Dataset, conditions: Iterable[Condition]) -> np.ndarray:
    mask = np.ones(len(dataset), dtype=bool)
    for c in conditions:
        c.check(dataset.schema)
        mask &= dataset.column(c.attribute) == c.value_index
    return mask


def filter_by_conditions(dataset: Dataset, conditions: Sequence[Condition]) -> Dataset:
    """Samples satisfying every condition, in original order."""
    return dataset.take(condition_mask(dataset, conditions))


def attribute_histogram(dataset: Dataset, attribute: str) -> list[int]:
    attr = dataset.schema.get(attribute)
    col = dataset.column(attribute)
    col = col[col != UNLABELED]
    return np.bincount(col, minlength=len(attr.values)).astype(int).tolist()


# -- file formats -----------------------------------------------------------

def write_features(path, features: np.ndarray) -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    rows, dim = features.shape
    with open(path, "wb") as f:
        f.write(_HEADER.pack(FEATURE_MAGIC, rows, dim))
        f.write(features.tobytes(order="C"))


def read_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        head = f.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise DatasetError(f"{path}: truncated feature header")
        magic, rows, dim = _HEADER.unpack(head)
        if magic != FEATURE_MAGIC:
            raise DatasetError(f"{path}: magic mismatch ({magic!r})")
        payload = f.read()
    if len(payload) != rows * dim * 4:
        raise DatasetError(
            f"{path}: expected {rows}x{dim} float32 payload, got {len(payload)} bytes"
        )
    return np.frombuffer(payload, dtype="<f4").reshape(rows, dim).astype(np.float64)


def load_schema(path) -> tuple[AttributeSchema, int]:
    with open(path, encoding="utf-8") as f:
        raw = json.load(f)
    try:
        return AttributeSchema.from_dict(raw), int(raw["feature_dim"])
    except (KeyError, TypeError) as e:
        raise DatasetError(f"{path}: malformed schema ({e})") from None


def load_dataset(manifest_path, features_path, schema_path=None,
                 strict: bool = False) -> Dataset:
    """Read a manifest/feature pair; the schema sidecar defaults to
    ``schema.json`` next to the manifest."""
    manifest_path = Path(manifest_path)
    schema_path = Path(schema_path) if schema_path else manifest_path.with_name(SCHEMA_NAME)
    schema, dim = load_schema(schema_path)
    features = read_features(features_path)

    expected = ["sample_id", "identity_id", "camera_id", "split"] + [
        f"attr_{a.name}" for a in schema.attributes
    ]
    with open(manifest_path, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header != expected:
            raise DatasetError(
                f"{manifest_path}: malformed header, expected {','.join(expected)}"
            )
        rows = list(reader)

    if len(rows) != features.shape[0]:
        raise DatasetError(
            f"row count mismatch: manifest has {len(rows)}, features have {features.shape[0]}"
        )
    if features.shape[1] != dim:
        raise DatasetError(
            f"dimension mismatch: schema says {dim}, features have {features.shape[1]}"
        )

    labels = np.full((len(rows), len(schema)), UNLABELED, dtype=np.int64)
    for i, row in enumerate(rows):
        if len(row) != len(expected):
            raise DatasetError(f"{manifest_path}: row {i + 2} has {len(row)} columns")
        for j, attr in enumerate(schema.attributes):
            cell = row[4 + j]
            if cell == UNLABELED_TOKEN:
                continue
            try:
                labels[i, j] = attr.index(cell)
            except DatasetError as e:
                raise DatasetError(f"sample {row[0]}: {e}") from None

    cols = list(zip(*rows)) if rows else [(), (), (), ()]
    ds = Dataset(schema, cols[0], cols[1], cols[2], cols[3], labels, features, dim)
    ds.check_query_coverage(strict)
    return ds


def load_dataset_dir(directory, strict: bool = False) -> Dataset:
    d = Path(directory)
    return load_dataset(d / MANIFEST_NAME, d / FEATURES_NAME, d / SCHEMA_NAME, strict)


def write_dataset(dataset: Dataset, out_dir) -> dict[str, Path]:
    """Write manifest, schema and features into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "manifest": out / MANIFEST_NAME,
        "schema": out / SCHEMA_NAME,
        "features": out / FEATURES_NAME,
    }
    schema = dataset.schema
    with open(paths["manifest"], "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "identity_id", "camera_id", "split"]
                   + [f"attr_{a.name}" for a in schema.attributes])
        for i in range(len(dataset)):
            cells = [
                UNLABELED_TOKEN if v == UNLABELED else schema.attributes[j].values[v]
                for j, v in enumerate(dataset.labels[i].tolist())
            ]
            w.writerow([dataset.sample_ids[i], dataset.identity_ids[i],
                        dataset.camera_ids[i], dataset.splits[i]] + cells)
    doc = {"feature_dim": dataset.feature_dim, **schema.to_dict()}
    with open(paths["schema"], "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2)
        f.write("\n")
    write_features(paths["features"], dataset.features)
    return paths


def empty_like(dataset: Dataset) -> Dataset:
    return dataset.take(np.zeros(0, dtype=int))

