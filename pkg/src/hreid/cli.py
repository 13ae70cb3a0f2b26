"""Command-line entry point.

Exit status: 0 on success, 2 when the configuration or input data is
invalid, 1 on I/O failure.  Every subcommand validates its inputs before
writing anything.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

from . import __version__
from .config import ConfigError, RunConfig, load_run_config
from .data import Dataset, load_dataset_dir
from .engine import ATTRIBUTE_SOURCES, GalleryIndex, index_gallery, query_many, write_results_jsonl
from .evaluation import MethodResult, check_same_splits, compare
from .pipeline import (evaluate_model, load_or_generate, run_comparison, split_fingerprint,
                       train_method)
from .report import write_report
from .synth import write_dataset
from .tree import Hierarchy

log = logging.getLogger("hreid")

EXIT_OK, EXIT_IO, EXIT_INVALID = 0, 1, 2


class UsageError(ValueError):
    pass


# -- helpers ------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    run = load_run_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        run = run.with_seed(args.seed)
    if getattr(args, "top_k", None) is not None:
        run = replace(run, eval=replace(run.eval, top_k=args.top_k))
    return run


def _dataset(args, run: RunConfig) -> Dataset:
    return load_or_generate(run, getattr(args, "data", None))


def _sources(args, run: RunConfig) -> list[str]:
    chosen = getattr(args, "attribute_source", None) or [run.eval.attribute_source]
    out = []
    for s in chosen:
        for part in (ATTRIBUTE_SOURCES if s == "both" else (s,)):
            if part not in out:
                out.append(part)
    return out


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _method_name(model: Hierarchy) -> str:
    if model.kind == "random":
        return f"random_tree[seed={model.seed}]"
    return model.kind


def _load_model(path) -> Hierarchy:
    try:
        return Hierarchy.load(path)
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: not a model file ({e})") from None


def _check_model_data(model: Hierarchy, dataset: Dataset, path) -> None:
    if model.schema != dataset.schema or model.feature_dim != dataset.feature_dim:
        raise ValueError(f"{path}: model schema does not match the dataset")
    if not model.is_trained:
        raise ValueError(f"{path}: model is not trained")


def _write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


# -- subcommands --------------------------------------------------------------

def cmd_synth(args) -> int:
    run = _run_config(args)
    if run.data_dir:
        raise ConfigError("synth needs a synth section, not data_dir")
    dataset = load_or_generate(run)
    paths = write_dataset(dataset, _prepare_out(args.out))
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_build(args) -> int:
    run = _run_config(args)
    if args.fixed_layers is not None and args.fixed_layers < 1:
        raise UsageError("--fixed-layers must be >= 1")
    kind = "random" if args.random_seed is not None else args.method
    if kind == "random" and args.random_seed is None:
        raise UsageError("--method random needs --random-seed")
    dataset = _dataset(args, run)
    model = train_method(dataset, run, kind, random_seed=args.random_seed,
                         fixed_layers=args.fixed_layers)
    out = _prepare_out(args.out)
    stem = "random_tree_seed%d" % args.random_seed if kind == "random" else kind
    model_path = out / f"{stem}.model.json"
    log_path = out / f"{stem}.build_log.json"
    model.save(model_path)
    _write_json(model.build_log, log_path)
    print(model.describe())
    print(model_path)
    return EXIT_OK


def cmd_index(args) -> int:
    run = _run_config(args)
    source = _sources(args, run)
    if len(source) != 1:
        raise UsageError("index takes exactly one --attribute-source")
    model = _load_model(args.model)
    dataset = _dataset(args, run)
    _check_model_data(model, dataset, args.model)
    index = index_gallery(model, dataset.split("gallery"), source[0])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    index.save(args.out)
    for leaf, n in sorted(index.partition_sizes().items()):
        print(f"{leaf}\t{n}")
    return EXIT_OK


def cmd_query(args) -> int:
    run = _run_config(args)
    top_k = run.eval.top_k
    model = _load_model(args.model)
    dataset = _dataset(args, run)
    _check_model_data(model, dataset, args.model)
    try:
        index = GalleryIndex.load(args.index)
    except (KeyError, TypeError, json.JSONDecodeError) as e:
        raise ValueError(f"{args.index}: not an index file ({e})") from None
    queries = dataset.split(args.split)
    results = query_many(model, index, queries, top_k=top_k)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_results_jsonl(results, args.out)
    else:
        for r in results:
            print(json.dumps(r.to_dict()))
    return EXIT_OK


def _eval_name(model: Hierarchy, suffix: str) -> str:
    if model.kind == "flat":
        return "flat"
    if model.kind == "random":
        return f"random_tree{suffix}[seed={model.seed}]"
    return model.kind + suffix


def _evaluate(models: dict, dataset: Dataset, run: RunConfig, sources, top_k, dump_dir):
    """Score every model under every source; flat ignores the source and is
    scored once.  Random trees are averaged into one row per source."""
    methods, random_runs, taken = [], {}, set()
    for source in sources:
        suffix = "" if len(sources) == 1 else f"[{source}]"
        for path, model in models.items():
            name = _eval_name(model, suffix)
            if model.kind == "flat" and source != sources[0]:
                continue
            if name in taken:
                name = f"{name}[{Path(path).stem}]"
            taken.add(name)
            res, results = evaluate_model(model, dataset, run, name, source, top_k)
            if dump_dir is not None:
                write_results_jsonl(results, dump_dir / f"queries_{_slug(name)}.jsonl")
            if model.kind == "random":
                random_runs.setdefault(f"random_tree{suffix}", []).append(res)
            else:
                methods.append(res)
    for name, runs in random_runs.items():
        methods.append(MethodResult.mean_of(name, runs))
    methods.sort(key=lambda m: m.method != "flat")
    return methods


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name).strip("_")


def cmd_eval(args) -> int:
    run = _run_config(args)
    sources = _sources(args, run)
    dataset = _dataset(args, run)
    models = {}
    for path in args.model:
        model = _load_model(path)
        _check_model_data(model, dataset, path)
        models[path] = model
    if len(dataset.split("query")) == 0 or len(dataset.split("gallery")) == 0:
        raise ValueError("dataset has no query or gallery split")
    check_same_splits({p: split_fingerprint(dataset) for p in models})

    out = _prepare_out(args.out)
    dump_dir = out if args.dump_queries else None
    methods = _evaluate(models, dataset, run, sources, run.eval.top_k, dump_dir)
    names = [m.method for m in methods]
    baseline = "flat" if "flat" in names else names[0]
    rows = compare(methods, baseline=baseline)
    paths = write_report(rows, methods, out, {"baseline": baseline, "sources": sources},
                         figures=not args.no_figures)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    for p in paths.values():
        print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    run = _run_config(args)
    sources = _sources(args, run)
    if args.jobs < 1:
        raise UsageError("--jobs must be >= 1")
    dataset = _dataset(args, run)
    comp = run_comparison(dataset, run, jobs=args.jobs, attribute_sources=sources,
                          keep_results=args.dump_queries)
    out = _prepare_out(args.out)
    models_dir = out / "models"
    models_dir.mkdir(exist_ok=True)
    for name, model in comp.models.items():
        model.save(models_dir / f"{_slug(name)}.model.json")
        _write_json(model.build_log, models_dir / f"{_slug(name)}.build_log.json")
    if args.dump_queries:
        for name, results in comp.results.items():
            write_results_jsonl(results, out / f"queries_{_slug(name)}.jsonl")
    _write_json(run.to_dict(), out / "run_config.json")
    paths = write_report(comp.rows, list(comp.methods.values()), out,
                         {"baseline": "flat", "sources": sources, "seed": run.seed},
                         figures=not args.no_figures)
    print((out / "report.txt").read_text(encoding="utf-8"), end="")
    for p in paths.values():
        print(p)
    return EXIT_OK


# -- parser -------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, data: bool = True) -> None:
    p.add_argument("--config", help="run configuration (JSON)")
    p.add_argument("--seed", type=int, help="override the global seed")
    if data:
        p.add_argument("--data", help="dataset directory (manifest.csv, schema.json, "
                                      "features.bin); default: config data_dir or synthesize")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hreid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _common(p, data=False)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    for name in ("build", "train"):
        p = sub.add_parser(name, help="derive the tree and train its node networks")
        _common(p)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--method", choices=("hierarchical", "flat", "random"),
                       default="hierarchical")
        p.add_argument("--random-seed", type=int, help="build the random-tree ablation")
        p.add_argument("--fixed-layers", type=int,
                       help="hidden layers per node (skips architecture search)")
        p.set_defaults(func=cmd_build)

    p = sub.add_parser("index", help="file the gallery under the leaves of a model")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True, help="index file (JSON)")
    p.add_argument("--attribute-source", action="append", choices=ATTRIBUTE_SOURCES)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="answer queries against an index")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--index", required=True)
    p.add_argument("--split", default="query", choices=("query", "gallery", "train"))
    p.add_argument("--top-k", type=int)
    p.add_argument("--out", help="JSON-lines output (default: stdout)")
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="score one or more trained models")
    _common(p)
    p.add_argument("--model", required=True, nargs="+")
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--attribute-source", action="append",
                   choices=ATTRIBUTE_SOURCES + ("both",))
    p.add_argument("--top-k", type=int)
    p.add_argument("--dump-queries", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="train every method and write the comparison")
    _common(p)
    p.add_argument("--out", required=True, help="report directory")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--attribute-source", action="append",
                   choices=ATTRIBUTE_SOURCES + ("both",))
    p.add_argument("--top-k", type=int)
    p.add_argument("--dump-queries", action="store_true")
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = os.environ.get("HREID_LOG_LEVEL")
    if level is None:
        level = ("WARNING", "INFO", "DEBUG")[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "top_k", None) is not None and args.top_k < 1:
        print("error: --top-k must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    try:
        return args.func(args)
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
