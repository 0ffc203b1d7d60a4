"""CSV and JSON report files.

Floats are written with ``repr`` so that a report parses back to exactly the
values that produced it, and nothing time- or host-dependent goes into a
report, so identical runs give identical bytes.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import math
import os
import platform
from dataclasses import dataclass, field
from importlib import metadata

import numpy as np


@dataclass
class Report:
    experiment: str
    config: dict
    header: list
    rows: list
    results: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)


def jsonable(obj):
    """Plain Python structures from numpy scalars/arrays, dataclasses and tuples."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    return obj


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_cell(v) for v in r])
    return buf.getvalue()


def versions() -> dict:
    out = {"python": platform.python_version()}
    for pkg in ("artifact", "numpy", "scipy", "numba", "pydantic"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = None
    return out


def json_document(report: Report) -> dict:
    return jsonable({
        "experiment": report.experiment,
        "config": report.config,
        "versions": versions(),
        "seeds": report.seeds,
        "results": report.results,
        "failures": report.failures,
        "columns": report.header,
    })


def _nonfinite(obj):
    # JSON has no NaN or infinity; write them as strings
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    if isinstance(obj, dict):
        return {k: _nonfinite(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nonfinite(v) for v in obj]
    return obj


def json_text(report: Report) -> str:
    return json.dumps(_nonfinite(json_document(report)), indent=2, sort_keys=True,
                      allow_nan=False) + "\n"


def emit_report(report: Report, out_dir, fmt: str = "both") -> list:
    """Write ``<experiment>.csv`` and/or ``<experiment>.json``; returns the paths."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    if fmt in ("csv", "both"):
        p = os.path.join(out_dir, f"{report.experiment}.csv")
        with open(p, "w", newline="") as fh:
            fh.write(csv_text(report.header, report.rows))
        paths.append(p)
    if fmt in ("json", "both"):
        p = os.path.join(out_dir, f"{report.experiment}.json")
        with open(p, "w") as fh:
            fh.write(json_text(report))
        paths.append(p)
    return paths


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)


def read_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    return rows[0], rows[1:]
