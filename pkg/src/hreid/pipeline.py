"""End-to-end experiment: train the hierarchy, the flat baseline and random
trees on one split, evaluate them on the same gallery/query sets."""

from __future__ import annotations

import hashlib
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

from .config import RunConfig
from .data import Dataset, load_dataset_dir
from .engine import QueryResult, index_gallery, query_many
from .evaluation import (GroundTruth, MethodResult, check_same_splits, compare,
                         compute_metrics, worst_case_cost)
from .synth import generate
from .tree import (Hierarchy, build_random_tree, build_structure, derive_seed,
                   flat_hierarchy, train_hierarchy)

log = logging.getLogger(__name__)

METHODS = ("hierarchical", "flat", "random")


def load_or_generate(run: RunConfig, data_dir=None) -> Dataset:
    directory = data_dir or run.data_dir
    if directory:
        return load_dataset_dir(directory)
    return generate(run.synth_config())


def split_fingerprint(dataset: Dataset) -> str:
    h = hashlib.sha256()
    for col in (dataset.sample_ids, dataset.splits):
        h.update("\n".join(col.tolist()).encode())
    return h.hexdigest()


def build_skeleton(train: Dataset, run: RunConfig, kind: str = "hierarchical",
                   random_seed: Optional[int] = None) -> Hierarchy:
    build = run.build_config()
    if kind == "hierarchical":
        return build_structure(train, build, probe=run.probe_config())
    if kind == "random":
        seed = derive_seed(run.seed, "random_tree/0") if random_seed is None else random_seed
        return build_random_tree(train, build, seed)
    if kind == "flat":
        return flat_hierarchy(train, run.flat.hidden_layers, run.flat.embedding_dim, build)
    raise ValueError(f"unknown method kind {kind!r}")


def train_method(dataset: Dataset, run: RunConfig, kind: str = "hierarchical",
                 random_seed: Optional[int] = None,
                 fixed_layers: Optional[int] = None) -> Hierarchy:
    """Build and train one method on the training split of ``dataset``."""
    train = dataset.split("train")
    if len(set(train.identity_ids.tolist())) < 2:
        raise ValueError("training split has fewer than 2 identities")
    skeleton = build_skeleton(train, run, kind, random_seed)
    tag = f"train/{kind}" if random_seed is None else f"train/{kind}/{random_seed}"
    fixed = fixed_layers if fixed_layers is not None else run.fixed_layers
    return train_hierarchy(skeleton, train, run.triplet, run.head, fixed,
                           derive_seed(run.seed, tag))


def evaluate_model(model: Hierarchy, dataset: Dataset, run: RunConfig, name: str,
                   attribute_source: Optional[str] = None,
                   top_k: Optional[int] = None) -> tuple[MethodResult, list[QueryResult]]:
    """Index the gallery, answer every query over its full partition, score.

    Metrics always rank the whole searched partition; ``top_k`` only trims
    the returned result lists.
    """
    source = attribute_source or run.eval.attribute_source
    index = index_gallery(model, dataset.split("gallery"), source)
    queries = dataset.split("query")
    results = query_many(model, index, queries, top_k=None)
    gt = GroundTruth.from_dataset(dataset)
    metrics = compute_metrics(results, gt, run.eval.exclude_same_camera)
    flops, nbytes = worst_case_cost(model)
    if top_k is not None:
        for r in results:
            r.matches = r.matches[:top_k]
    return MethodResult(name, nbytes, flops, metrics, seed=model.seed), results


@dataclass
class Comparison:
    rows: list
    methods: dict
    models: dict = field(default_factory=dict)
    results: dict = field(default_factory=dict)


def _train_random(args):
    dataset, run, seed = args
    return train_method(dataset, run, "random", random_seed=seed)


def random_tree_seeds(run: RunConfig) -> list[int]:
    return [derive_seed(run.seed, f"random_tree/{i}") for i in range(run.eval.n_random_trees)]


def run_comparison(dataset: Dataset, run: RunConfig, jobs: int = 1,
                   attribute_sources=None, keep_results: bool = False) -> Comparison:
    """Hierarchical vs flat vs random trees (mean row plus one row per seed)."""
    sources = list(attribute_sources or [run.eval.attribute_source])
    models = {
        "hierarchical": train_method(dataset, run, "hierarchical"),
        "flat": train_method(dataset, run, "flat"),
    }
    seeds = random_tree_seeds(run)
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            trees = list(pool.map(_train_random, [(dataset, run, s) for s in seeds]))
    else:
        trees = [train_method(dataset, run, "random", random_seed=s) for s in seeds]
    for s, t in zip(seeds, trees):
        models[f"random_tree[seed={s}]"] = t

    fingerprint = split_fingerprint(dataset)
    check_same_splits({name: fingerprint for name in models})

    methods, results = {}, {}
    for source in sources:
        suffix = "" if len(sources) == 1 else f"[{source}]"
        flat_res, flat_q = evaluate_model(models["flat"], dataset, run, "flat", source)
        methods["flat"] = flat_res
        results["flat"] = flat_q
        name = f"hierarchical{suffix}"
        methods[name], results[name] = evaluate_model(models["hierarchical"], dataset,
                                                      run, name, source)
        runs = []
        for s in seeds:
            key = f"random_tree[seed={s}]"
            res, q = evaluate_model(models[key], dataset, run, f"random_tree{suffix}[seed={s}]",
                                    source)
            runs.append(res)
            results[res.method] = q
        if runs:
            methods[f"random_tree{suffix}"] = MethodResult.mean_of(f"random_tree{suffix}", runs)

    rows = compare(list(methods.values()))
    return Comparison(rows, methods, models, results if keep_results else {})
