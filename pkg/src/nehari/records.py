"""Line-delimited ``key=value`` records and CSV grid dumps (17 significant digits)."""

from __future__ import annotations

import numbers
from pathlib import Path

import numpy as np


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return "true" if x else "false"
    if isinstance(x, numbers.Integral):
        return str(int(x))
    if isinstance(x, numbers.Real):
        return "%.17g" % float(x)
    if isinstance(x, (tuple, list, np.ndarray)):
        return "|".join(fmt(v) for v in x)
    if x is None:
        return "none"
    return str(x).replace(",", ";").replace("\n", " ")


def record(kind: str, **fields) -> str:
    parts = [f"record={kind}"] + [f"{k}={fmt(v)}" for k, v in fields.items()]
    return ",".join(parts)


def parse_record(line: str) -> dict:
    out = {}
    for part in line.rstrip("\n").split(","):
        key, _, val = part.partition("=")
        out[key] = val
    return out


def write_grid(path, grid) -> None:
    """One CSV row per array row (``ny`` rows of ``nx`` values)."""
    grid = np.atleast_2d(np.asarray(grid, dtype=float))
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in grid:
            fh.write(",".join("%.17g" % v for v in row) + "\n")


def read_grid(path) -> np.ndarray:
    rows = Path(path).read_text(encoding="utf-8").splitlines()
    return np.array([[float(v) for v in r.split(",")] for r in rows if r])
