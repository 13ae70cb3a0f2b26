"""Routing through a trained hierarchy and partitioned gallery search."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import UNLABELED, Dataset
from .nn import Network, forward_batch
from .tree import Hierarchy

log = logging.getLogger(__name__)

ATTRIBUTE_SOURCES = ("ground_truth", "predicted")
DEFAULT_TOP_K = 10


@dataclass
class RouteTrace:
    node_ids: tuple
    decisions: tuple
    leaf_embedding: np.ndarray
    flops_spent: int
    embeddings: tuple = ()

    @property
    def leaf_id(self) -> str:
        return self.node_ids[-1]

    def embedding_at(self, node_id: str) -> np.ndarray:
        return self.embeddings[self.node_ids.index(node_id)]

    def to_dict(self) -> dict:
        return {
            "node_ids": list(self.node_ids),
            "decisions": [{"attribute": a, "value_index": v, "logits": list(l)}
                          for a, v, l in self.decisions],
            "flops_spent": self.flops_spent,
        }


def _descend(h: Hierarchy, X: np.ndarray, gt_labels: Optional[np.ndarray] = None):
    """Route rows of ``X``; with ``gt_labels`` follow labeled values instead
    of the head's prediction.  Returns traces and a per-row flag marking rows
    that needed a predicted decision in place of a missing label."""
    if not h.is_trained:
        raise ValueError("hierarchy is not trained")
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != h.feature_dim:
        raise ValueError(f"dimension mismatch: hierarchy expects {h.feature_dim} features")
    n = len(X)
    paths = [[] for _ in range(n)]
    decisions = [[] for _ in range(n)]
    embs = [[] for _ in range(n)]
    flops = np.zeros(n, dtype=np.int64)
    fell_back = np.zeros(n, dtype=bool)
    positions = {a: i for i, a in enumerate(h.schema.names)}

    work = [(h.root, np.arange(n), X, None)]
    while work:
        node, idx, Xin, parent_emb = work.pop()
        if len(idx) == 0:
            continue
        if node.pass_through:
            emb = parent_emb
        else:
            emb, logits, hidden = forward_batch(node.network, Xin)
            flops[idx] += node.cost.flops
        for k, i in enumerate(idx):
            paths[i].append(node.node_id)
            embs[i].append(emb[k])
        if not node.children:
            continue
        choice = np.argmax(logits, axis=1)
        if gt_labels is not None:
            lab = gt_labels[idx, positions[node.attribute]]
            missing = lab == UNLABELED
            fell_back[idx[missing]] = True
            choice = np.where(missing, choice, lab)
        for k, i in enumerate(idx):
            decisions[i].append((node.attribute, int(choice[k]), tuple(logits[k].tolist())))
        for v, child in sorted(node.children.items(), reverse=True):
            m = choice == v
            work.append((child, idx[m], hidden[m], emb[m]))

    traces = [
        RouteTrace(tuple(paths[i]), tuple(decisions[i]), embs[i][-1], int(flops[i]),
                   tuple(embs[i]))
        for i in range(n)
    ]
    return traces, fell_back


def route(hierarchy: Hierarchy, features) -> RouteTrace:
    """Send one feature vector from the root to a leaf by argmax decisions."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("route expects a single feature vector")
    return _descend(hierarchy, x[None, :])[0][0]


def route_batch(hierarchy: Hierarchy, X) -> list[RouteTrace]:
    return _descend(hierarchy, X)[0]


# -- gallery ------------------------------------------------------------------

@dataclass
class Partition:
    rows: np.ndarray
    embeddings: np.ndarray


@dataclass
class GalleryIndex:
    """Gallery samples filed under the leaf they reach.

    ``node_members[node_id]`` holds every gallery row whose path crosses the
    node, with its embedding at that node (used for empty-leaf fallback).
    """

    sample_ids: np.ndarray
    identity_ids: np.ndarray
    camera_ids: np.ndarray
    attribute_source: str
    leaf_of: np.ndarray
    node_members: dict
    fallback_samples: list = field(default_factory=list)

    def partition(self, leaf_id: str) -> Partition:
        rows, emb = self.node_members.get(leaf_id, (np.zeros(0, dtype=int), None))
        mask = self.leaf_of[rows] == leaf_id if len(rows) else np.zeros(0, dtype=bool)
        return Partition(rows[mask], None if emb is None else emb[mask])

    def partition_sizes(self) -> dict:
        ids, counts = np.unique(self.leaf_of, return_counts=True)
        return dict(zip(ids.tolist(), counts.tolist()))

    def __len__(self):
        return len(self.sample_ids)

    def to_dict(self) -> dict:
        rows = {}
        for node_id, (r, emb) in self.node_members.items():
            rows[node_id] = {"rows": r.tolist(), "embeddings": emb.tolist()}
        return {
            "attribute_source": self.attribute_source,
            "sample_ids": self.sample_ids.tolist(),
            "identity_ids": self.identity_ids.tolist(),
            "camera_ids": self.camera_ids.tolist(),
            "leaf_of": self.leaf_of.tolist(),
            "node_members": rows,
            "fallback_samples": list(self.fallback_samples),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GalleryIndex":
        members = {k: (np.asarray(v["rows"], dtype=int),
                       np.asarray(v["embeddings"], dtype=np.float64))
                   for k, v in d["node_members"].items()}
        return cls(np.asarray(d["sample_ids"], dtype=str),
                   np.asarray(d["identity_ids"], dtype=str),
                   np.asarray(d["camera_ids"], dtype=str), d["attribute_source"],
                   np.asarray(d["leaf_of"], dtype=str), members,
                   list(d.get("fallback_samples", [])))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f)

    @classmethod
    def load(cls, path) -> "GalleryIndex":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def index_gallery(hierarchy: Hierarchy, gallery: Dataset,
                  source: str = "ground_truth") -> GalleryIndex:
    """Route every gallery sample and file it under its arrival leaf.

    ``ground_truth`` follows labeled attribute values; a missing label falls
    back to the head's prediction for that decision.
    """
    if source not in ATTRIBUTE_SOURCES:
        raise ValueError(f"attribute source must be one of {ATTRIBUTE_SOURCES}")
    if gallery.schema != hierarchy.schema:
        raise ValueError("gallery schema does not match the hierarchy")
    gt = gallery.labels if source == "ground_truth" else None
    traces, fell_back = _descend(hierarchy, gallery.features, gt)
    fallback = gallery.sample_ids[fell_back].tolist()
    for sid in fallback:
        log.debug("gallery sample %s: missing attribute label, routed by prediction", sid)
    if fallback:
        log.warning("%d gallery samples routed by prediction for missing labels",
                    len(fallback))

    members: dict = {}
    for i, t in enumerate(traces):
        for node_id, emb in zip(t.node_ids, t.embeddings):
            members.setdefault(node_id, ([], []))
            members[node_id][0].append(i)
            members[node_id][1].append(emb)
    dim = hierarchy.root.network.spec.embedding_dim
    node_members = {k: (np.asarray(r, dtype=int), np.asarray(e).reshape(len(r), dim))
                    for k, (r, e) in members.items()}
    leaf_of = np.asarray([t.leaf_id for t in traces], dtype=str).reshape(len(traces))
    return GalleryIndex(gallery.sample_ids, gallery.identity_ids, gallery.camera_ids,
                        source, leaf_of, node_members, fallback)


# -- queries ------------------------------------------------------------------

@dataclass
class QueryResult:
    query_id: str
    matches: list
    distances_computed: int
    route: RouteTrace
    fallback_node: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "query_id": self.query_id,
            "matches": [{"sample_id": s, "distance": d} for s, d in self.matches],
            "distances_computed": self.distances_computed,
            "route": self.route.to_dict(),
            "fallback_node": self.fallback_node,
        }


def _check_top_k(top_k):
    if top_k is not None and top_k < 1:
        raise ValueError("top_k must be >= 1")


def rank_gallery(query_emb: np.ndarray, gallery_emb: np.ndarray,
                 gallery_ids: np.ndarray, top_k: Optional[int]) -> list:
    """``(sample_id, distance)`` ascending by distance, ties by sample id."""
    if len(gallery_ids) == 0:
        return []
    diff = gallery_emb - query_emb
    dist = np.sqrt(np.einsum("ij,ij->i", diff, diff))
    order = np.lexsort((gallery_ids, dist))
    if top_k is not None:
        order = order[:top_k]
    return [(str(gallery_ids[j]), float(dist[j])) for j in order]


def _search_node(hierarchy: Hierarchy, index: GalleryIndex, trace: RouteTrace):
    """Node whose gallery members are searched: the leaf, or the nearest
    ancestor with a non-empty subtree."""
    for node_id in reversed(trace.node_ids):
        rows, _ = index.node_members.get(node_id, (np.zeros(0, dtype=int), None))
        if len(rows):
            return node_id
    return None


def _answer(hierarchy, index, query_id, trace, top_k) -> QueryResult:
    node_id = _search_node(hierarchy, index, trace)
    if node_id is None:
        return QueryResult(query_id, [], 0, trace, None)
    if node_id == trace.leaf_id:
        part = index.partition(node_id)
        rows, emb = part.rows, part.embeddings
        q = trace.leaf_embedding
        fallback = None
    else:
        rows, emb = index.node_members[node_id]
        q = trace.embedding_at(node_id)
        fallback = node_id
    matches = rank_gallery(q, emb, index.sample_ids[rows], top_k)
    return QueryResult(query_id, matches, len(rows), trace, fallback)


def query(hierarchy: Hierarchy, index: GalleryIndex, features,
          top_k: Optional[int] = DEFAULT_TOP_K, query_id: str = "") -> QueryResult:
    """Route a query and rank only the gallery partition it arrives at."""
    _check_top_k(top_k)
    return _answer(hierarchy, index, query_id, route(hierarchy, features), top_k)


def query_many(hierarchy: Hierarchy, index: GalleryIndex, queries: Dataset,
               top_k: Optional[int] = DEFAULT_TOP_K) -> list[QueryResult]:
    _check_top_k(top_k)
    traces = route_batch(hierarchy, queries.features)
    return [_answer(hierarchy, index, str(qid), t, top_k)
            for qid, t in zip(queries.sample_ids, traces)]


def flat_query(network: Network, gallery_ids, gallery_embeddings, features,
               top_k: Optional[int] = DEFAULT_TOP_K, query_id: str = "") -> QueryResult:
    """Exhaustive Euclidean ranking against every gallery embedding."""
    _check_top_k(top_k)
    x = np.asarray(features, dtype=np.float64)
    emb, _, _ = forward_batch(network, x[None, :])
    trace = RouteTrace(("root",), (), emb[0], network.cost.flops, (emb[0],))
    gallery_ids = np.asarray(gallery_ids, dtype=str)
    matches = rank_gallery(emb[0], np.asarray(gallery_embeddings), gallery_ids, top_k)
    return QueryResult(query_id, matches, len(gallery_ids), trace)


def write_results_jsonl(results: Sequence[QueryResult], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for r in results:
            f.write(json.dumps(r.to_dict()) + "\n")
