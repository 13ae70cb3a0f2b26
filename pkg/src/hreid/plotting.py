"""Report figures rendered headless with the Agg backend."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PALETTE = {"flat": "#4d4d4d", "hierarchical": "#1f77b4", "random_tree": "#ff7f0e"}


def _family(method: str) -> str:
    for key in ("hierarchical", "random_tree", "flat"):
        if method.startswith(key):
            return key
    return "flat"


def _is_seed_row(method: str) -> bool:
    return "[seed=" in method


def plot_accuracy_bars(rows: Sequence[dict], path) -> None:
    summary = [r for r in rows if not _is_seed_row(r["method"])]
    names = [r["method"] for r in summary]
    x = range(len(names))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    colors = [PALETTE[_family(n)] for n in names]
    ax1.bar(x, [r["rank1"] for r in summary], color=colors)
    ax1.set_ylabel("rank-1")
    ax2.bar(x, [r["reduction_vs_flat_flops"] for r in summary], color=colors)
    ax2.set_ylabel("worst-case FLOP reduction vs flat")
    reductions = [r["reduction_vs_flat_flops"] for r in summary]
    ax1.set_ylim(0, 1)
    # a tree costlier than flat shows as a negative reduction
    ax2.set_ylim(min(0.0, min(reductions) - 0.05), 1)
    ax2.axhline(0, color="black", lw=0.8)
    for ax in (ax1, ax2):
        ax.set_xticks(list(x))
        ax.set_xticklabels(names, rotation=20, ha="right", fontsize=8)
        ax.grid(axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_tradeoff(rows: Sequence[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6.8, 3.8))
    seen = set()
    for r in rows:
        fam = _family(r["method"])
        seed_row = _is_seed_row(r["method"])
        label = None if (fam, seed_row) in seen else (f"{fam} (per seed)" if seed_row else fam)
        seen.add((fam, seed_row))
        ax.scatter(r["worst_case_flops"], r["rank1"], color=PALETTE[fam],
                   marker="." if seed_row else "o", s=30 if seed_row else 60,
                   alpha=0.6 if seed_row else 1.0, label=label)
    flops = [r["worst_case_flops"] for r in rows]
    if min(flops) > 0 and max(flops) / min(flops) >= 10:
        ax.set_xscale("log")
    ax.set_xlabel("worst-case FLOPs per query")
    ax.set_ylabel("rank-1")
    ax.grid(alpha=0.3)
    ax.legend(fontsize=8, loc="upper left", bbox_to_anchor=(1.02, 1.0))
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_report(rows: Sequence[dict], out_dir) -> dict:
    out = Path(out_dir)
    paths = {"accuracy_figure": out / "accuracy.png", "tradeoff_figure": out / "tradeoff.png"}
    plot_accuracy_bars(rows, paths["accuracy_figure"])
    plot_tradeoff(rows, paths["tradeoff_figure"])
    return paths
