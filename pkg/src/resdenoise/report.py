"""Box-plot summaries of a metrics CSV, written as CSV or JSON."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

from .engine import METRIC_COLUMNS, METRICS_HEADER, format_mean_std, summarize

SUMMARY_FIELDS = ("n", "mean", "std", "min", "q1", "median", "q3", "max")


class ReportError(ValueError):
    pass


def read_metrics_csv(path) -> list:
    """Parse a metrics file written by ``evaluate``; errors carry the line number."""
    path = Path(path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise ReportError(f"{path}: {exc.strerror or exc}") from exc
    if not lines or tuple(lines[0].split(",")) != METRICS_HEADER:
        raise ReportError(f"{path}:1: expected header {','.join(METRICS_HEADER)}")
    rows = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != len(METRICS_HEADER):
            raise ReportError(f"{path}:{lineno}: expected {len(METRICS_HEADER)} fields, got {len(parts)}")
        row = {"id": parts[0], "source": parts[1]}
        for name, text in zip(METRICS_HEADER[2:], parts[2:]):
            try:
                row[name] = float(text)
            except ValueError:
                raise ReportError(f"{path}:{lineno}: field {name!r} is not a number: {text!r}") from None
            if math.isnan(row[name]):
                raise ReportError(f"{path}:{lineno}: field {name!r} is NaN")
        rows.append(row)
    if not rows:
        raise ReportError(f"{path}: no data rows")
    return rows


def summarize_rows(rows) -> dict:
    """source -> metric -> summary, with sources and metrics in a fixed order."""
    out = {}
    for source in sorted({r["source"] for r in rows}):
        sel = [r for r in rows if r["source"] == source]
        out[source] = {}
        for metric in ("sigma",) + METRIC_COLUMNS:
            s = summarize([r[metric] for r in sel])
            s["mean_std"] = format_mean_std(s)
            out[source][metric] = s
    return out


def _num(x):
    return repr(float(x)) if not isinstance(x, int) else str(x)


def report(metrics_path, out_path, fmt="csv") -> dict:
    """Write per-source five-number summaries plus mean and std for every metric column."""
    if fmt not in ("csv", "json"):
        raise ValueError(f"unknown report format {fmt!r}")
    summary = summarize_rows(read_metrics_csv(metrics_path))
    if fmt == "json":
        Path(out_path).write_text(json.dumps(summary, indent=2, sort_keys=False) + "\n", encoding="utf-8")
    else:
        with open(out_path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("source", "metric") + SUMMARY_FIELDS + ("mean_std",))
            for source, metrics in summary.items():
                for metric, s in metrics.items():
                    w.writerow([source, metric] + [_num(s[f]) for f in SUMMARY_FIELDS] + [s["mean_std"]])
    return summary


def read_report(path, fmt="csv") -> dict:
    """Load a report back into the nested-dict form ``report`` returns."""
    if fmt == "json":
        return json.loads(Path(path).read_text(encoding="utf-8"))
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            s = {f: (int(row[f]) if f == "n" else float(row[f])) for f in SUMMARY_FIELDS}
            s["mean_std"] = row["mean_std"]
            out.setdefault(row["source"], {})[row["metric"]] = s
    return out
