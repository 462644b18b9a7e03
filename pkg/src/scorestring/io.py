"""CSV/JSON artifacts.  Every file is written to a temporary sibling and renamed into place."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import ConfigurationError


def atomic_write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(path, header: Sequence[str], rows: Iterable[Sequence]) -> Path:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return atomic_write_text(path, buf.getvalue())


def write_json(path, obj) -> Path:
    return atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def coord_names(d: int, prefix: str = "x") -> list:
    return [f"{prefix}{k}" for k in range(d)]


# ---------------------------------------------------------------------------
# schemas


def write_string_csv(path, images, t: float) -> Path:
    """One row per image: index, t, coordinates."""
    images = np.asarray(images, dtype=float)
    rows = ([i, float(t), *p] for i, p in enumerate(images))
    return write_csv(path, ["index", "t", *coord_names(images.shape[1])], rows)


def read_string_csv(path):
    """Returns (t, images) from a file written by write_string_csv."""
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header[:2] != ["index", "t"]:
            raise ConfigurationError(f"{path}: not a string CSV")
        rows = [[float(v) for v in row] for row in r]
    arr = np.array(rows)
    return float(arr[0, 1]), arr[:, 2:]


def write_diagnostics_csv(path, diag) -> Path:
    n_img = len(diag.logp[0]) if diag.logp else 0
    header = ["step", "t", "arc_length", "max_displacement", *[f"logp{i}" for i in range(n_img)]]
    rows = ([s, t, a, m, *lp] for s, t, a, m, lp in
            zip(diag.steps, diag.times, diag.arc_length, diag.max_displacement, diag.logp))
    return write_csv(path, header, rows)


def write_walkers_csv(path, walkers, reject_counts) -> Path:
    walkers = np.asarray(walkers, dtype=float)
    rows = ([i, *w, int(c)] for i, (w, c) in enumerate(zip(walkers, reject_counts)))
    return write_csv(path, ["index", *coord_names(walkers.shape[1], "w"), "reject_count"], rows)


def write_trajectory_csv(path, times, states) -> Path:
    """Long format: step, t, point id, coordinates."""
    states = np.asarray(states, dtype=float)
    if states.ndim == 2:
        states = states[:, None, :]
    rows = ([k, float(t), j, *p] for k, (t, s) in enumerate(zip(times, states)) for j, p in enumerate(s))
    return write_csv(path, ["step", "t", "id", *coord_names(states.shape[2])], rows)


def read_points_csv(path, dim: Optional[int] = None):
    """Points file with header ``[id,] x0, x1, ...``; returns (ids, points).

    Malformed rows raise ConfigurationError naming the line number.
    """
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        try:
            header = next(r)
        except StopIteration:
            return [], np.zeros((0, dim or 0))
        has_id = bool(header) and header[0] == "id"
        names = header[1:] if has_id else header
        d = len(names)
        if d == 0 or (dim is not None and d != dim):
            raise ConfigurationError(f"{path}: line 1: expected {dim} coordinate columns, got {d}")
        ids, pts = [], []
        for lineno, row in enumerate(r, start=2):
            if not row:
                continue
            vals = row[1:] if has_id else row
            if len(vals) != d:
                raise ConfigurationError(f"{path}: line {lineno}: expected {d} coordinates, got {len(vals)}")
            try:
                p = [float(v) for v in vals]
            except ValueError:
                raise ConfigurationError(f"{path}: line {lineno}: non-numeric value") from None
            if not np.all(np.isfinite(p)):
                raise ConfigurationError(f"{path}: line {lineno}: non-finite value")
            ids.append(row[0] if has_id else str(len(ids)))
            pts.append(p)
    return ids, np.array(pts, dtype=float).reshape(len(pts), d)


def write_points_csv(path, points, ids=None) -> Path:
    points = np.asarray(points, dtype=float)
    ids = range(len(points)) if ids is None else ids
    return write_csv(path, ["id", *coord_names(points.shape[1])], ([i, *p] for i, p in zip(ids, points)))
