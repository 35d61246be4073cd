"""CSV/JSON writers and schema-checked readers.

Floats go to CSV with 17 significant digits so every value reads back
bit-for-bit.  JSON uses Python's shortest round-trip float repr.
"""
from __future__ import annotations

import csv
import dataclasses
import json
import math
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

SCHEMA_VERSION = 1

TRAJECTORY_COLUMNS = (("t", float), ("x", float), ("y", float))
FIELD_COLUMNS = (("x", float), ("y", float), ("a", float), ("b", float))
TRACE_COLUMNS = (("n", int), ("N", int), ("S", float), ("p", float), ("B", int), ("J", int))
VERDICT_COLUMNS = (
    ("verdict", str), ("slope", float), ("slope_ci_lo", float), ("slope_ci_hi", float),
    ("recurrences", int), ("mean_return", float), ("throughput", float), ("error", str),
)
SUMMARY_COLUMNS = (
    ("replication", int), ("slots", int), ("successes", int), ("arrivals", int),
    ("max_N", int), ("N_end", int), ("S_end", float), ("diverged", int),
)


class SchemaError(ValueError):
    pass


def fmt(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return format(float(value), ".17g")
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    return str(value)


def write_csv(path, columns: Sequence, rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([c[0] for c in columns])
        for row in rows:
            if len(row) != len(columns):
                raise SchemaError(f"row has {len(row)} fields, expected {len(columns)}")
            w.writerow([fmt(v) for v in row])
    return path


def _parse(text: str, kind, where: str):
    try:
        if kind is float:
            return float(text)
        if kind is int:
            return int(text)
    except ValueError:
        raise SchemaError(f"{where}: cannot parse {text!r} as {kind.__name__}") from None
    return text


def read_csv(path, columns: Sequence) -> list[tuple]:
    """Read a CSV and check it against ``columns``; raises :class:`SchemaError`."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        expected = [c[0] for c in columns]
        if header != expected:
            raise SchemaError(f"{path}: header {header} != {expected}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(columns):
                raise SchemaError(f"{path}:{lineno}: {len(row)} fields, expected {len(columns)}")
            rows.append(tuple(_parse(v, c[1], f"{path}:{lineno}:{c[0]}")
                              for v, c in zip(row, columns)))
    return rows


# -- fluid ------------------------------------------------------------------

def write_trajectory(path, traj) -> Path:
    return write_csv(path, TRAJECTORY_COLUMNS, zip(traj.t, traj.x, traj.y))


def read_trajectory(path) -> list[tuple]:
    return read_csv(path, TRAJECTORY_COLUMNS)


def write_drift_field(path, table: np.ndarray) -> Path:
    return write_csv(path, FIELD_COLUMNS, zip(table["x"], table["y"], table["a"], table["b"]))


def read_drift_field(path) -> list[tuple]:
    return read_csv(path, FIELD_COLUMNS)


# -- simulation -------------------------------------------------------------

def write_trace(path, trace) -> Path:
    r = trace.records
    return write_csv(path, TRACE_COLUMNS, zip(r["n"], r["N"], r["S"], r["p"], r["B"], r["J"]))


def read_trace(path) -> list[tuple]:
    return read_csv(path, TRACE_COLUMNS)


def write_summaries(path, traces) -> Path:
    rows = []
    for i, tr in enumerate(traces):
        s = tr.summary
        rows.append((i, s.slots, s.successes, s.arrivals, s.max_N, s.N_end, s.S_end, s.diverged))
    return write_csv(path, SUMMARY_COLUMNS, rows)


def read_summaries(path) -> list[tuple]:
    return read_csv(path, SUMMARY_COLUMNS)


def _axis_value(v):
    # h/eps objects in an axis are written by label
    return v.label() if hasattr(v, "label") else v


def sweep_columns(axes: Sequence[str], values: dict | None = None) -> tuple:
    kinds = []
    for name in axes:
        sample = None if values is None else values.get(name)
        kinds.append((name, float if sample is None or isinstance(sample, (int, float)) else str))
    return tuple(kinds) + VERDICT_COLUMNS


def write_sweep(path, result) -> Path:
    names = list(result.axes)
    first = {k: v[0] for k, v in result.axes.items()}
    columns = sweep_columns(names, {k: _axis_value(v) for k, v in first.items()})
    rows = []
    for row in result.rows():
        rows.append([_axis_value(row[k]) if not isinstance(row[k], int) else float(row[k])
                     for k in names] + [row[c[0]] for c in VERDICT_COLUMNS])
    return write_csv(path, columns, rows)


def read_sweep(path) -> list[dict]:
    """Read a sweep CSV; axis columns are everything before ``verdict``."""
    with Path(path).open(newline="") as fh:
        header = next(csv.reader(fh), None)
    if not header or "verdict" not in header:
        raise SchemaError(f"{path}: not a sweep table")
    axes = header[: header.index("verdict")]
    rows = read_csv(path, tuple((a, str) for a in axes) + VERDICT_COLUMNS)
    out = []
    for row in rows:
        d = dict(zip(header, row))
        for a in axes:
            try:
                d[a] = float(d[a])
            except ValueError:
                pass
        out.append(d)
    return out


# -- json -------------------------------------------------------------------

def _default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, tuple):
        return list(obj)
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return dataclasses.asdict(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _clean(obj):
    # json has no NaN/inf; write them as null
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, (np.floating,)) and not np.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def dumps(obj: dict) -> str:
    payload = {"schema_version": SCHEMA_VERSION, **obj}
    return json.dumps(_clean(json.loads(json.dumps(payload, default=_default))), indent=2,
                      sort_keys=False) + "\n"


def write_json(path, obj: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path
