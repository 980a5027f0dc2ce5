"""
Run record serialization: metric rows as JSONL / CSV, plot data and per-user NMSE
"""

import csv
import json
from collections import defaultdict
from dataclasses import asdict, fields
from pathlib import Path
from typing import Dict, Iterable, List, Sequence, Tuple, Union

import numpy as np

from ..errors import InvalidConfigError
from ..experiments import MetricRow, RunRecord, UserNmseRow

FORMATS = ("jsonl", "csv")
PLOT_METRICS = ("map", "rank1", "rank5", "rank10")


def serialize_metric_row(row: MetricRow) -> dict:
    """Serialize one metric row for JSONL / CSV output"""
    return asdict(row)


def metric_row_line(row: MetricRow) -> str:
    """Canonical JSONL line: sorted keys, compact separators"""
    return json.dumps(serialize_metric_row(row), sort_keys=True, separators=(",", ":"))


def _write_csv(path: Path, header: Sequence[str], rows: Iterable[dict]):
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(header), lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def plot_series(rows: Sequence[MetricRow], axis: str, metric: str) -> Tuple[List[float], Dict[str, List[float]]]:
    """
    Mean of ``metric`` over seeds per (variant, x)

    x is snr_db for the SNR axis and feedback_bits for the feedback axis.
    Returns the sorted x values and one series per variant.
    """
    x_field = "snr_db" if axis == "snr" else "feedback_bits"
    buckets: Dict[Tuple[str, float], List[float]] = defaultdict(list)
    for row in rows:
        buckets[(row.variant, getattr(row, x_field))].append(getattr(row, metric))
    xs = sorted({x for _, x in buckets})
    variants = sorted({v for v, _ in buckets})
    series = {
        v: [float(np.mean(buckets[(v, x)])) if (v, x) in buckets else float("nan") for x in xs]
        for v in variants
    }
    return xs, series


def emit_results(record: RunRecord, out_dir: Union[str, Path], formats: Sequence[str] = FORMATS) -> List[Path]:
    """
    Write a RunRecord into ``out_dir``

    Files: metrics.jsonl and/or metrics.csv, plot_<metric>.csv for mAP and
    Rank@k, user_nmse.csv and record.json. Returns the written paths.
    """
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        raise InvalidConfigError(f"unknown output format(s) {bad}, expected {FORMATS}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: List[Path] = []

    if "jsonl" in formats:
        path = out / "metrics.jsonl"
        path.write_text("".join(metric_row_line(r) + "\n" for r in record.rows), encoding="utf-8")
        written.append(path)
    if "csv" in formats:
        path = out / "metrics.csv"
        _write_csv(path, [f.name for f in fields(MetricRow)], (serialize_metric_row(r) for r in record.rows))
        written.append(path)

    x_name = "snr_db" if record.axis == "snr" else "feedback_bits"
    for metric in PLOT_METRICS:
        xs, series = plot_series(record.rows, record.axis, metric)
        path = out / f"plot_{metric}.csv"
        _write_csv(
            path,
            [x_name] + list(series),
            ({x_name: x, **{v: s[i] for v, s in series.items()}} for i, x in enumerate(xs)),
        )
        written.append(path)

    path = out / "user_nmse.csv"
    _write_csv(path, [f.name for f in fields(UserNmseRow)], (asdict(r) for r in record.user_nmse))
    written.append(path)

    path = out / "record.json"
    summary = {
        "config": record.config,
        "config_hash": record.config_hash,
        "seeds": record.seeds,
        "axis": record.axis,
        "losses": record.losses,
        "filter_stats": record.filter_stats,
        "wall_clock_s": record.wall_clock_s,
        "n_rows": len(record.rows),
    }
    path.write_text(json.dumps(summary, sort_keys=True, indent=2), encoding="utf-8")
    written.append(path)
    return written


def read_jsonl(path: Union[str, Path]) -> List[MetricRow]:
    """Metric rows back from a metrics.jsonl file"""
    rows = []
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if line.strip():
            rows.append(MetricRow(**json.loads(line)))
    return rows
