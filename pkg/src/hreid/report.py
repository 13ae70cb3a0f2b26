"""Writers for comparison reports: CSV, JSON and a plain-text table."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

from .evaluation import REPORT_COLUMNS, MethodResult

MAP_FOOTNOTE = ("mAP counts every relevant gallery image in its denominator, "
                "including images excluded from the searched partition.")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(rows: Sequence[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in REPORT_COLUMNS])


def read_csv(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as f:
        rows = list(csv.DictReader(f))
    for row in rows:
        for k in REPORT_COLUMNS[1:]:
            row[k] = float(row[k])
    return rows


def _method_dict(m: MethodResult) -> dict:
    d = {
        "method": m.method,
        "model_bytes": m.model_bytes,
        "worst_case_flops": m.worst_case_flops,
        "metrics": asdict(m.metrics),
        "seed": m.seed,
    }
    if m.runs:
        d["runs"] = [_method_dict(r) for r in m.runs]
    return d


def write_json(rows: Sequence[dict], methods: Sequence[MethodResult], path,
               extra: dict | None = None) -> None:
    doc = {
        "columns": REPORT_COLUMNS,
        "rows": list(rows),
        "methods": [_method_dict(m) for m in methods],
        "notes": [MAP_FOOTNOTE],
    }
    if extra:
        doc.update(extra)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")


def format_table(rows: Sequence[dict]) -> str:
    """Fixed-width table of the headline columns, reductions as percentages."""
    cols = [("method", "method", "{}"), ("model_bytes", "bytes", "{:.0f}"),
            ("worst_case_flops", "flops", "{:.0f}"), ("rank1", "rank1", "{:.3f}"),
            ("map", "mAP", "{:.3f}"), ("mean_distances", "dists", "{:.1f}"),
            ("reduction_vs_flat_flops", "flops red.", "{:.1%}"),
            ("reduction_vs_flat_distances", "dist red.", "{:.1%}")]
    cells = [[h for _, h, _ in cols]]
    for row in rows:
        cells.append([f.format(row[k]) for k, _, f in cols])
    widths = [max(len(r[i]) for r in cells) for i in range(len(cols))]
    lines = ["  ".join(c.ljust(w) if i == 0 else c.rjust(w)
                       for i, (c, w) in enumerate(zip(r, widths))) for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    lines.append("")
    lines.append(f"* {MAP_FOOTNOTE}")
    return "\n".join(lines) + "\n"


def write_report(rows: Sequence[dict], methods: Sequence[MethodResult], out_dir,
                 extra: dict | None = None, figures: bool = True) -> dict:
    """Write report.csv, report.json, report.txt and (optionally) figures."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"csv": out / "report.csv", "json": out / "report.json", "text": out / "report.txt"}
    write_csv(rows, paths["csv"])
    write_json(rows, methods, paths["json"], extra)
    paths["text"].write_text(format_table(rows), encoding="utf-8")
    if figures:
        from .plotting import plot_report
        paths.update(plot_report(rows, out))
    return {k: str(v) for k, v in paths.items()}
