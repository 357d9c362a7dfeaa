"""CSV and JSON writers for pattern tables, link sets, metrics and fit traces.

Floats are written with ``repr`` so that files round-trip exactly and repeated
runs produce identical bytes.
"""
from __future__ import annotations

import csv
import json
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Mapping

from .comparison import PatternTable, bits_string
from .errors import DataError
from .estimation import TraceEntry
from .mec import MecSet


def _num(x) -> str:
    if isinstance(x, float):
        return repr(x)
    return str(x)


def write_pattern_table(path, space: PatternTable) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["pattern_bits", "count"])
        for code, count in zip(space.codes.tolist(), space.counts.tolist()):
            w.writerow([bits_string(int(code), space.K), int(count)])


def write_links(path, mec: MecSet) -> None:
    if not mec.is_one_to_one():
        raise DataError("refusing to write a link set that is not one-to-one")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["a_id", "b_id", "pattern_bits", "ratio", "posterior"])
        for (a, b), bits, r, g in zip(mec.id_pairs(), mec.pattern_bits(),
                                      mec.ratios.tolist(), mec.posteriors.tolist()):
            w.writerow([a, b, bits, _num(r), _num(g)])


def read_links(path) -> list[tuple[str, str]]:
    """``(a_id, b_id)`` pairs of a links CSV, as strings."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"a_id", "b_id"} <= set(reader.fieldnames):
            raise DataError(f"{path}: links file needs a_id and b_id columns")
        return [(row["a_id"], row["b_id"]) for row in reader]


def write_metrics(path, metrics: Mapping, timestamp: bool = True) -> None:
    doc = dict(metrics)
    if timestamp:
        doc["timestamp"] = datetime.now(timezone.utc).isoformat(timespec="seconds")
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_trace(path, trace: Iterable[TraceEntry]) -> None:
    trace = list(trace)
    K = len(trace[0].theta) if trace else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "n_M", "D", *[f"theta_{k + 1}" for k in range(K)],
                    *[f"xi_{k + 1}" for k in range(K)]])
        for e in trace:
            w.writerow([e.iteration, _num(float(e.n_M)), _num(float(e.entropy)),
                        *[_num(float(t)) for t in e.theta], *[_num(float(x)) for x in e.xi]])


def write_table(target, rows: list[dict], columns: Iterable[str]) -> None:
    """CSV of ``rows`` restricted to ``columns``; ``target`` is a path or an open text file."""
    columns = list(columns)
    if hasattr(target, "write"):
        _table_rows(csv.writer(target), rows, columns)
        return
    with open(target, "w", newline="") as fh:
        _table_rows(csv.writer(fh), rows, columns)


def _table_rows(w, rows, columns) -> None:
    w.writerow(columns)
    for row in rows:
        w.writerow(["" if row[c] is None else _num(row[c]) for c in columns])
