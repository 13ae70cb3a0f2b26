"""Retrieval metrics, worst-case cost accounting and method comparison."""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np


log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroundTruth:
    """Identity/camera lookup for query and gallery samples."""

    identity: dict
    camera: dict
    gallery_ids: tuple

    @classmethod
    def from_dataset(cls, dataset) -> "GroundTruth":
        ids = dataset.sample_ids.tolist()
        gallery = tuple(s for s, sp in zip(ids, dataset.splits.tolist()) if sp == "gallery")
        return cls(dict(zip(ids, dataset.identity_ids.tolist())),
                   dict(zip(ids, dataset.camera_ids.tolist())), gallery)

    def relevant_count(self, query_id: str, exclude_same_camera: bool = False) -> int:
        ident = self.identity[query_id]
        cam = self.camera[query_id]
        return sum(
            1 for g in self.gallery_ids
            if self.identity[g] == ident and not (exclude_same_camera and self.camera[g] == cam)
        )

    def _junk(self, query_id, g, exclude_same_camera):
        return (exclude_same_camera and self.identity[g] == self.identity[query_id]
                and self.camera[g] == self.camera[query_id])


def _ranked_ids(result, gt: GroundTruth, exclude_same_camera: bool) -> list:
    return [g for g, _ in result.matches
            if not gt._junk(result.query_id, g, exclude_same_camera)]


def rank1(results, gt: GroundTruth, exclude_same_camera: bool = False) -> float:
    """Fraction of queries whose top match shares the query identity."""
    if not results:
        return float("nan")
    hits = 0
    for r in results:
        ranked = _ranked_ids(r, gt, exclude_same_camera)
        if not ranked:
            log.warning("query %s returned no matches; counted as a miss", r.query_id)
            continue
        hits += gt.identity[ranked[0]] == gt.identity[r.query_id]
    return hits / len(results)


def average_precision(relevance: Sequence[bool], n_relevant: int) -> float:
    """AP of one ranking; relevant items missing from it count as misses."""
    if n_relevant <= 0:
        raise ValueError("average precision needs at least one relevant item")
    hits, total = 0, 0.0
    for r, rel in enumerate(relevance, start=1):
        if rel:
            hits += 1
            total += hits / r
    return total / n_relevant


def mean_average_precision(results, gt: GroundTruth,
                           exclude_same_camera: bool = False) -> float:
    """mAP over queries; the denominator counts every relevant gallery item,
    including those excluded from the searched partition."""
    aps = []
    for r in results:
        n_rel = gt.relevant_count(r.query_id, exclude_same_camera)
        if n_rel == 0:
            log.warning("query %s has no relevant gallery item; excluded from mAP",
                        r.query_id)
            continue
        ident = gt.identity[r.query_id]
        ranked = _ranked_ids(r, gt, exclude_same_camera)
        aps.append(average_precision([gt.identity[g] == ident for g in ranked], n_rel))
    return float(np.mean(aps)) if aps else float("nan")


def retrieval_map(query_emb, query_ids, gallery_emb, gallery_ids) -> float:
    """mAP of full Euclidean rankings between two embedding sets."""
    query_ids = np.asarray(query_ids)
    gallery_ids = np.asarray(gallery_ids)
    d = ((query_emb[:, None, :] - gallery_emb[None, :, :]) ** 2).sum(-1)
    order = np.argsort(d, axis=1, kind="stable")
    aps = []
    for i in range(len(query_ids)):
        rel = gallery_ids[order[i]] == query_ids[i]
        n_rel = int(rel.sum())
        if n_rel:
            hits = np.cumsum(rel)
            aps.append(float((hits[rel] / (np.flatnonzero(rel) + 1)).sum() / n_rel))
    return float(np.mean(aps)) if aps else 0.0


# -- resources --------------------------------------------------------------

def worst_case_cost(hierarchy) -> tuple[int, int]:
    """Max root-to-leaf path sums of FLOPs and of parameter bytes.

    The two maxima may come from different paths.
    """
    def walk(node):
        c = node.cost
        if not node.children:
            return c.flops, c.param_bytes
        sub = [walk(ch) for ch in node.children.values()]
        return c.flops + max(f for f, _ in sub), c.param_bytes + max(b for _, b in sub)
    return walk(hierarchy.root)


# -- reports ----------------------------------------------------------------

@dataclass
class Metrics:
    rank1: float
    map_score: float
    mean_distances_per_query: float
    mean_flops_per_query: float

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not math.isfinite(v):
                raise ValueError(f"metric {k} is not finite")
        if not (0 <= self.rank1 <= 1 and 0 <= self.map_score <= 1):
            raise ValueError("rank1 and mAP must lie in [0, 1]")


def compute_metrics(results, gt: GroundTruth, exclude_same_camera: bool = False) -> Metrics:
    return Metrics(
        rank1(results, gt, exclude_same_camera),
        mean_average_precision(results, gt, exclude_same_camera),
        float(np.mean([r.distances_computed for r in results])),
        float(np.mean([r.route.flops_spent for r in results])),
    )


@dataclass
class MethodResult:
    """One evaluated method.  ``runs`` holds per-seed results for averaged rows."""

    method: str
    model_bytes: float
    worst_case_flops: float
    metrics: Metrics
    runs: list = field(default_factory=list)
    seed: Optional[int] = None

    @classmethod
    def mean_of(cls, method: str, runs: list["MethodResult"]) -> "MethodResult":
        if not runs:
            raise ValueError("cannot average zero runs")
        m = Metrics(*(float(np.mean([getattr(r.metrics, f) for r in runs]))
                      for f in ("rank1", "map_score", "mean_distances_per_query",
                                "mean_flops_per_query")))
        return cls(method, float(np.mean([r.model_bytes for r in runs])),
                   float(np.mean([r.worst_case_flops for r in runs])), m, list(runs))


REPORT_COLUMNS = [
    "method", "model_bytes", "worst_case_flops", "rank1", "map",
    "mean_distances", "mean_flops",
    "reduction_vs_flat_model_bytes", "reduction_vs_flat_flops",
    "reduction_vs_flat_distances", "reduction_vs_flat_mean_flops",
]


def reduction(value: float, baseline: float) -> float:
    """``1 - value / baseline`` (0.0 when the baseline is zero)."""
    return 0.0 if baseline == 0 else 1.0 - value / baseline


def _row(r: MethodResult, flat: MethodResult) -> dict:
    m, fm = r.metrics, flat.metrics
    return {
        "method": r.method,
        "model_bytes": r.model_bytes,
        "worst_case_flops": r.worst_case_flops,
        "rank1": m.rank1,
        "map": m.map_score,
        "mean_distances": m.mean_distances_per_query,
        "mean_flops": m.mean_flops_per_query,
        "reduction_vs_flat_model_bytes": reduction(r.model_bytes, flat.model_bytes),
        "reduction_vs_flat_flops": reduction(r.worst_case_flops, flat.worst_case_flops),
        "reduction_vs_flat_distances": reduction(m.mean_distances_per_query,
                                                 fm.mean_distances_per_query),
        "reduction_vs_flat_mean_flops": reduction(m.mean_flops_per_query,
                                                  fm.mean_flops_per_query),
    }


def compare(methods: Sequence[MethodResult], baseline: str = "flat") -> list[dict]:
    """Report rows, one per method, with reductions relative to ``baseline``.

    Averaged methods (non-empty ``runs``) are followed by one row per run.
    """
    by_name = {m.method: m for m in methods}
    if baseline not in by_name:
        raise ValueError(f"baseline method {baseline!r} missing from comparison")
    flat = by_name[baseline]
    rows = []
    for m in methods:
        rows.append(_row(m, flat))
        for run in m.runs:
            rows.append(_row(run, flat))
    return rows


def check_same_splits(fingerprints: dict) -> None:
    """Raise if methods were evaluated on different splits."""
    counts = Counter(fingerprints.values())
    if len(counts) > 1:
        raise ValueError(f"mismatched splits across methods: {sorted(fingerprints)}")
