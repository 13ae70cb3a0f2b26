"""Attribute hierarchies: structure, per-node architecture search, training.

The structure comes from two signals.  Attribute difficulty is the
validation error of a linear probe on the input features; easier
attributes are identified first.  Redundancy is the conditional value
distribution of each remaining attribute on the node's training subset;
attributes whose outcome is already (nearly) implied by the path are
skipped.
"""

from __future__ import annotations

import copy
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterator, Optional, Sequence

import numpy as np

from .data import AttributeSchema, Condition, Dataset, condition_mask
from .evaluation import retrieval_map
from .nn import (CostModel, HeadConfig, Network, NetworkSpec, TripletConfig,
                 classification_accuracy, cost_of, fit_linear_classifier,
                 forward_batch, train_classifier_head, train_embedding)

log = logging.getLogger(__name__)

MODEL_FORMAT_VERSION = 1
_BAND_EPS = 1e-12


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-component seed: ``seed + crc32(tag)`` folded to 32 bits."""
    return (int(seed) + zlib.crc32(tag.encode("utf-8"))) % (2 ** 32)


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class ProbeConfig:
    epochs: int = 200
    learning_rate: float = 0.01
    batch_size: int = 32
    validation_fraction: float = 0.2
    seed: int = 0


@dataclass(frozen=True)
class BuildConfig:
    weak_band_low: float = 0.3
    weak_band_high: float = 0.7
    min_node_samples: int = 50
    max_depth: int = 5
    arch_candidate_depths: tuple[int, ...] = (1, 2, 3, 4)
    arch_stop_threshold: float = 5e-6
    hidden_width: int = 128
    embedding_dim: int = 32
    quick_train_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "arch_candidate_depths",
                           tuple(int(d) for d in self.arch_candidate_depths))
        if not 0 < self.weak_band_low < self.weak_band_high < 1:
            raise ValueError("need 0 < weak_band_low < weak_band_high < 1")
        if self.min_node_samples < 0 or self.max_depth < 0:
            raise ValueError("min_node_samples and max_depth must be >= 0")
        d = self.arch_candidate_depths
        if not d or min(d) < 1 or list(d) != sorted(set(d)):
            raise ValueError("arch_candidate_depths must be increasing positive integers")
        if self.hidden_width < 1 or self.embedding_dim < 1:
            raise ValueError("hidden_width and embedding_dim must be positive")
        if not 0 < self.quick_train_fraction <= 1:
            raise ValueError("quick_train_fraction must lie in (0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["arch_candidate_depths"] = list(self.arch_candidate_depths)
        return d


# -- difficulty ---------------------------------------------------------------

@dataclass(frozen=True)
class DifficultyRank:
    """Attributes ordered from easiest (lowest probe error) to hardest."""

    entries: tuple[tuple[str, float], ...]

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def error(self, name: str) -> float:
        return dict(self.entries)[name]

    def to_dict(self) -> list:
        return [{"attribute": n, "validation_error": e} for n, e in self.entries]


def probe_error(X, y, n_classes: int, probe: ProbeConfig) -> float:
    """Validation error of a linear classifier on a seeded holdout split."""
    rng = np.random.default_rng(probe.seed)
    order = rng.permutation(len(X))
    n_val = max(1, int(round(probe.validation_fraction * len(X))))
    val, fit = order[:n_val], order[n_val:]
    W, b = fit_linear_classifier(X[fit], y[fit], n_classes, probe.epochs,
                                 probe.learning_rate, probe.batch_size, probe.seed)
    return 1.0 - classification_accuracy(X[val] @ W + b, y[val])


def rank_attribute_difficulty(train: Dataset, probe: ProbeConfig = ProbeConfig()) -> DifficultyRank:
    if len(train) == 0:
        raise ValueError("empty train split")
    entries = []
    for attr in train.schema.attributes:
        y = train.column(attr.name)
        keep = y >= 0
        if len(np.unique(y[keep])) < 2:
            log.warning("attribute %r has a single observed value; left out of the rank",
                        attr.name)
            continue
        err = probe_error(train.features[keep], y[keep], len(attr.values), probe)
        entries.append((attr.name, float(err)))
    entries.sort(key=lambda e: (e[1], e[0]))
    return DifficultyRank(tuple(entries))


# -- correlations -------------------------------------------------------------

@dataclass(frozen=True)
class CorrelationTable:
    """``rows[k][v] = Pr(k = v | path_conditions)``; ``None`` = unsupported."""

    path_conditions: tuple[Condition, ...]
    rows: dict
    support: int

    def to_dict(self) -> dict:
        return {
            "conditions": [c.to_dict() for c in self.path_conditions],
            "support": self.support,
            "rows": {k: (None if v is None else list(v)) for k, v in self.rows.items()},
        }


def correlation_table(train: Dataset, conditions: Sequence[Condition],
                      candidates) -> CorrelationTable:
    mask = condition_mask(train, conditions)
    rows = {}
    for name in candidates:
        col = train.column(name)[mask]
        col = col[col >= 0]
        if len(col) == 0:
            rows[name] = None
            continue
        counts = np.bincount(col, minlength=len(train.schema.get(name).values))
        rows[name] = tuple((counts / len(col)).tolist())
    return CorrelationTable(tuple(conditions), rows, int(mask.sum()))


def is_weakly_correlated(probs, config: BuildConfig) -> bool:
    """Band test: the path leaves the attribute genuinely undecided.

    Eligible iff no value is more likely than ``weak_band_high``; for binary
    attributes the rarer value must additionally reach ``weak_band_low``.
    """
    if probs is None:
        return False
    if max(probs) > config.weak_band_high + _BAND_EPS:
        return False
    if len(probs) == 2 and min(probs) < config.weak_band_low - _BAND_EPS:
        return False
    return True


def select_next_attribute(rank: DifficultyRank, table: CorrelationTable,
                          identified, config: BuildConfig) -> Optional[str]:
    for name in rank.names:
        if name in identified or name not in table.rows:
            continue
        if is_weakly_correlated(table.rows[name], config):
            return name
    return None


# -- hierarchy ---------------------------------------------------------------

@dataclass
class HierarchyNode:
    node_id: str
    conditions: tuple[Condition, ...]
    attribute: Optional[str] = None
    children: dict = field(default_factory=dict)
    train_subset_size: int = 0
    spec: Optional[NetworkSpec] = None
    network: Optional[Network] = None
    pass_through: bool = False

    @property
    def depth(self) -> int:
        return len(self.conditions)

    @property
    def is_leaf(self) -> bool:
        return not self.children

    @property
    def cost(self) -> CostModel:
        return cost_of(self.spec) if self.spec is not None else CostModel(0, 0)

    def to_dict(self) -> dict:
        return {
            "node_id": self.node_id,
            "conditions": [c.to_dict() for c in self.conditions],
            "attribute": self.attribute,
            "train_subset_size": self.train_subset_size,
            "spec": None if self.spec is None else self.spec.to_dict(),
            "network": None if self.network is None else self.network.to_dict(),
            "pass_through": self.pass_through,
            "children": [{"value_index": v, "node": ch.to_dict()}
                         for v, ch in sorted(self.children.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HierarchyNode":
        return cls(
            d["node_id"],
            tuple(Condition.from_dict(c) for c in d["conditions"]),
            d["attribute"],
            {int(c["value_index"]): cls.from_dict(c["node"]) for c in d["children"]},
            int(d["train_subset_size"]),
            None if d["spec"] is None else NetworkSpec.from_dict(d["spec"]),
            None if d["network"] is None else Network.from_dict(d["network"]),
            bool(d.get("pass_through", False)),
        )


@dataclass
class Hierarchy:
    schema: AttributeSchema
    feature_dim: int
    root: HierarchyNode
    build_config: BuildConfig = field(default_factory=BuildConfig)
    kind: str = "hierarchical"
    seed: Optional[int] = None
    build_log: dict = field(default_factory=dict, compare=False)

    def nodes(self) -> Iterator[HierarchyNode]:
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(ch for _, ch in sorted(node.children.items(), reverse=True))

    def leaves(self) -> list[HierarchyNode]:
        return [n for n in self.nodes() if n.is_leaf]

    def node(self, node_id: str) -> HierarchyNode:
        for n in self.nodes():
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    def paths(self) -> list[list[HierarchyNode]]:
        out = []

        def walk(node, path):
            path = path + [node]
            if node.is_leaf:
                out.append(path)
            for _, ch in sorted(node.children.items()):
                walk(ch, path)
        walk(self.root, [])
        return out

    @property
    def depth(self) -> int:
        return max(len(p) for p in self.paths()) - 1

    @property
    def is_trained(self) -> bool:
        return all(n.network is not None or n.pass_through for n in self.nodes()) \
            and self.root.network is not None

    def to_dict(self) -> dict:
        return {
            "format_version": MODEL_FORMAT_VERSION,
            "kind": self.kind,
            "seed": self.seed,
            "feature_dim": self.feature_dim,
            "build_config": self.build_config.to_dict(),
            "schema": self.schema.to_dict(),
            "root": self.root.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Hierarchy":
        if d.get("format_version") != MODEL_FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {d.get('format_version')!r}")
        bc = dict(d["build_config"])
        bc["arch_candidate_depths"] = tuple(bc["arch_candidate_depths"])
        return cls(AttributeSchema.from_dict(d["schema"]), int(d["feature_dim"]),
                   HierarchyNode.from_dict(d["root"]), BuildConfig(**bc),
                   d.get("kind", "hierarchical"), d.get("seed"))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)
            f.write("\n")

    @classmethod
    def load(cls, path) -> "Hierarchy":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))

    def describe(self) -> str:
        lines = []
        for n in self.nodes():
            label = n.attribute or ("pass-through" if n.pass_through else "leaf")
            layers = "-" if n.spec is None else len(n.spec.hidden_layers)
            lines.append(f"{'  ' * n.depth}{n.node_id}: {label} "
                         f"(n={n.train_subset_size}, layers={layers})")
        return "\n".join(lines)


def _child_id(parent_id: str, schema: AttributeSchema, attribute: str, value: int) -> str:
    return f"{parent_id}/{attribute}={schema.get(attribute).values[value]}"


def _grow(train: Dataset, config: BuildConfig, choose: Callable, log_entries: list):
    schema = train.schema

    def grow(node_id, conds, identified):
        n = int(condition_mask(train, conds).sum())
        node = HierarchyNode(node_id, tuple(conds), train_subset_size=n)
        entry = {"node_id": node_id, "train_subset_size": n}
        log_entries.append(entry)
        if len(conds) >= config.max_depth:
            entry["leaf_reason"] = "max_depth"
            return node
        if n < config.min_node_samples:
            entry["leaf_reason"] = "min_node_samples"
            return node
        attr = choose(conds, identified, entry)
        if attr is None:
            entry["leaf_reason"] = "no_candidate"
            return node
        entry["attribute"] = attr
        node.attribute = attr
        for v in range(len(schema.get(attr).values)):
            c = list(conds) + [Condition(attr, v)]
            node.children[v] = grow(_child_id(node_id, schema, attr, v), c,
                                    identified | {attr})
        return node

    return grow("root", [], frozenset())


def build_structure(train: Dataset, config: BuildConfig = BuildConfig(),
                    rank: Optional[DifficultyRank] = None,
                    probe: Optional[ProbeConfig] = None) -> Hierarchy:
    """Untrained skeleton from difficulty rank and path-conditional correlations."""
    if len(train) == 0:
        raise ValueError("empty train split")
    if rank is None:
        rank = rank_attribute_difficulty(
            train, probe or ProbeConfig(seed=derive_seed(config.seed, "probe")))
    entries: list = []

    def choose(conds, identified, entry):
        cands = [a for a in rank.names if a not in identified]
        table = correlation_table(train, conds, cands)
        entry["correlation"] = table.to_dict()
        return select_next_attribute(rank, table, identified, config)

    root = _grow(train, config, choose, entries)
    h = Hierarchy(train.schema, train.feature_dim, root, config, "hierarchical", config.seed)
    h.build_log = {"difficulty_rank": rank.to_dict(), "nodes": entries}
    return h


def build_random_tree(train: Dataset, config: BuildConfig = BuildConfig(),
                      seed: int = 0) -> Hierarchy:
    """Skeleton whose attribute at each node is drawn uniformly at random."""
    if len(train) == 0:
        raise ValueError("empty train split")
    rng = np.random.default_rng(seed)
    names = train.schema.names
    entries: list = []

    def choose(conds, identified, entry):
        left = [a for a in names if a not in identified]
        return None if not left else left[int(rng.integers(len(left)))]

    root = _grow(train, config, choose, entries)
    h = Hierarchy(train.schema, train.feature_dim, root, config, "random", seed)
    h.build_log = {"nodes": entries}
    return h


def flat_hierarchy(train: Dataset, hidden_layers: Sequence[int], embedding_dim: int,
                   config: BuildConfig = BuildConfig()) -> Hierarchy:
    """Single-node skeleton standing in for a conventional large network."""
    spec = NetworkSpec(train.feature_dim, tuple(hidden_layers), embedding_dim, 0)
    root = HierarchyNode("root", (), train_subset_size=len(train), spec=spec)
    return Hierarchy(train.schema, train.feature_dim, root, config, "flat", config.seed)


# -- architecture search ---------------------------------------------------------

@dataclass(frozen=True)
class ArchCandidate:
    layers: int
    accuracy: float
    memory: int
    map_score: float
    attribute_accuracy: Optional[float]


@dataclass
class ArchSearchRecord:
    candidates: list
    delta_ad: list
    selected_layers: int
    diagnostic: Optional[str] = None

    def to_dict(self) -> dict:
        return {"candidates": [asdict(c) for c in self.candidates],
                "delta_ad": self.delta_ad, "selected_layers": self.selected_layers,
                "diagnostic": self.diagnostic}


def delta_ad(a_i: float, a_next: float, m_i: float, m_next: float) -> float:
    """Accuracy gained per byte of extra model memory."""
    if m_next == m_i:
        raise ValueError("memory must strictly increase between candidates")
    return (a_next - a_i) / (m_next - m_i)


def select_depth(accuracies: Sequence[float], memories: Sequence[float],
                 threshold: float) -> tuple[int, list[float]]:
    """Index of the last candidate before the accuracy density gain stops
    exceeding ``threshold`` (ties keep the smaller network)."""
    deltas = [delta_ad(accuracies[i], accuracies[i + 1], memories[i], memories[i + 1])
              for i in range(len(accuracies) - 1)]
    chosen = 0
    for d in deltas:
        if d > threshold:
            chosen += 1
        else:
            break
    return chosen, deltas


def _node_spec(input_dim, layers, attribute, schema, config: BuildConfig) -> NetworkSpec:
    classes = len(schema.get(attribute).values) if attribute else 0
    return NetworkSpec(input_dim, (config.hidden_width,) * layers, config.embedding_dim, classes)


def _holdout(n: int, fraction: float, rng) -> tuple[np.ndarray, np.ndarray]:
    order = rng.permutation(n)
    k = int(round(fraction * n))
    return order[k:], order[:k]


def search_architecture(node_train: Dataset, node_input_dim: int,
                        attribute: Optional[str], config: BuildConfig,
                        inputs: Optional[np.ndarray] = None,
                        triplet: TripletConfig = TripletConfig(),
                        head: HeadConfig = HeadConfig(),
                        seed: int = 0) -> tuple[NetworkSpec, ArchSearchRecord]:
    """Grow the node network one hidden layer at a time until the accuracy
    density gain falls to ``arch_stop_threshold``.  Candidates past the
    stopping point are never trained.

    Candidate accuracy is the mean of held-out retrieval mAP and (internal
    nodes only) held-out attribute accuracy, after a shortened training run.
    """
    if len(node_train) == 0:
        raise ValueError("empty node training subset")
    X = np.asarray(node_train.features if inputs is None else inputs, dtype=np.float64)
    depths = config.arch_candidate_depths
    smallest = _node_spec(node_input_dim, depths[0], attribute, node_train.schema, config)

    rng = np.random.default_rng(seed)
    fit, held = _holdout(len(X), 0.2, rng)
    fit_ids = set(node_train.identity_ids[fit].tolist())
    if len(fit_ids) < 2 or len(held) == 0 or not \
            set(node_train.identity_ids[held].tolist()) & fit_ids:
        msg = "degenerate node data; using the smallest candidate"
        log.warning("architecture search: %s", msg)
        return smallest, ArchSearchRecord([], [], depths[0], msg)

    fit_ds, held_ds = node_train.take(fit), node_train.take(held)
    quick = replace(triplet, seed=seed,
                    max_epochs=max(1, int(round(config.quick_train_fraction * triplet.max_epochs))))
    quick_head_epochs = max(1, int(round(config.quick_train_fraction * head.epochs)))

    candidates, deltas = [], []
    for layers in depths:
        spec = _node_spec(node_input_dim, layers, attribute, node_train.schema, config)
        net = Network.initialize(spec, derive_seed(seed, f"arch/{layers}"))
        net = train_embedding(net, fit_ds, quick, X[fit])
        emb_fit, _, _ = forward_batch(net, X[fit])
        map_score = retrieval_map(forward_batch(net, X[held])[0], held_ds.identity_ids,
                                  emb_fit, fit_ds.identity_ids)
        attr_acc = None
        if attribute:
            net = train_classifier_head(net, fit_ds, attribute, quick_head_epochs,
                                        head.batch_size, head.learning_rate, X[fit], seed)
            y = held_ds.column(attribute)
            keep = y >= 0
            _, logits, _ = forward_batch(net, X[held][keep])
            attr_acc = classification_accuracy(logits, y[keep]) if keep.any() else 0.0
        acc = map_score if attr_acc is None else 0.5 * (map_score + attr_acc)
        candidates.append(ArchCandidate(layers, float(acc), cost_of(spec).param_bytes,
                                        float(map_score), attr_acc))
        # deeper candidates are only trained while the gain stays above threshold
        if len(candidates) > 1:
            idx, deltas = select_depth([c.accuracy for c in candidates],
                                       [c.memory for c in candidates],
                                       config.arch_stop_threshold)
            if idx < len(candidates) - 1:
                break

    idx, deltas = select_depth([c.accuracy for c in candidates],
                               [c.memory for c in candidates], config.arch_stop_threshold)
    chosen = candidates[idx].layers
    return (_node_spec(node_input_dim, chosen, attribute, node_train.schema, config),
            ArchSearchRecord(candidates, deltas, chosen))


# -- training ---------------------------------------------------------------

def train_hierarchy(skeleton: Hierarchy, train: Dataset,
                    triplet: TripletConfig = TripletConfig(),
                    head: HeadConfig = HeadConfig(),
                    fixed_layers: Optional[int] = None,
                    seed: int = 0,
                    on_node_trained: Optional[Callable] = None) -> Hierarchy:
    """Train every node root-down on its conditioned subset.

    A node's input is its parent's last hidden activation, computed with the
    (already final) ancestors.  Nodes without a spec get one from
    :func:`search_architecture`, or ``fixed_layers`` hidden layers.  Nodes
    whose subset has fewer than two identities become pass-through leaves.
    """
    h = copy.deepcopy(skeleton)
    h.build_log = dict(skeleton.build_log)
    config = h.build_config
    arch_log = {}
    queue = [(h.root, np.arange(len(train)), np.asarray(train.features, dtype=np.float64))]
    while queue:
        node, rows, X = queue.pop(0)
        sub = train.take(rows)
        if len(set(sub.identity_ids.tolist())) < 2:
            log.warning("node %s has fewer than 2 identities; degraded to a pass-through leaf",
                        node.node_id)
            node.attribute, node.children, node.spec, node.network = None, {}, None, None
            node.pass_through = True
            continue
        node_seed = derive_seed(seed, node.node_id)
        if node.spec is None:
            if fixed_layers is not None:
                node.spec = _node_spec(X.shape[1], fixed_layers, node.attribute,
                                       train.schema, config)
            else:
                node.spec, record = search_architecture(
                    sub, X.shape[1], node.attribute, config, X, triplet, head,
                    derive_seed(seed, "arch:" + node.node_id))
                arch_log[node.node_id] = record.to_dict()
        net = Network.initialize(node.spec, node_seed)
        net = train_embedding(net, sub, replace(triplet, seed=node_seed), X)
        if node.attribute:
            net = train_classifier_head(net, sub, node.attribute, head.epochs,
                                        head.batch_size, head.learning_rate, X,
                                        derive_seed(node_seed, "head"))
        net.body_frozen = True
        node.network = net
        if on_node_trained is not None:
            on_node_trained(node, h)
        if node.children:
            _, _, hidden = forward_batch(net, X)
            col = sub.column(node.attribute)
            for v, child in sorted(node.children.items()):
                m = col == v
                queue.append((child, rows[m], hidden[m]))
    if arch_log:
        h.build_log["architecture_search"] = arch_log
    return h
