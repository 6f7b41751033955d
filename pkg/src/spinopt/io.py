"""Readers and writers for grids, waveforms, magnetization and histories.

Floats are written with 17 significant digits so a write/read round trip
is exact.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .model import Pulse, SpinGrid, ValidationError

__all__ = [
    "GRID_COLUMNS",
    "PULSE_COLUMNS",
    "MAG_COLUMNS",
    "read_grid",
    "write_grid",
    "read_pulse",
    "write_pulse",
    "read_magnetization",
    "write_magnetization",
    "read_labels",
    "write_history",
]

GRID_COLUMNS = ("x_cm", "y_cm", "z_cm", "offres_rad_s", "t1_s", "t2_s", "mask")
PULSE_COLUMNS = (
    "index", "rf_real_gauss", "rf_imag_gauss", "gx_gauss_per_cm", "gy_gauss_per_cm", "gz_gauss_per_cm",
)
MAG_COLUMNS = ("voxel", "mx", "my", "mz")


def _fmt(x):
    return format(float(x), ".17g")


def _read_rows(path, columns):
    """Rows of a CSV with the expected header; ``# key=value`` lines are metadata."""
    meta = {}
    rows = []
    path = Path(path)
    with path.open(newline="") as fh:
        header = None
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text:
                continue
            if text.startswith("#"):
                key, sep, value = text[1:].strip().partition("=")
                if sep:
                    meta[key.strip()] = value.strip()
                continue
            fields = next(csv.reader([text]))
            if header is None:
                header = tuple(f.strip() for f in fields)
                if header != tuple(columns):
                    raise ValidationError(
                        f"{path}:{lineno}: expected header {','.join(columns)}, got {text}"
                    )
                continue
            if len(fields) != len(columns):
                raise ValidationError(
                    f"{path}:{lineno}: row has {len(fields)} fields, expected {len(columns)}"
                )
            try:
                rows.append([float(f) for f in fields])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: malformed number in row {text!r}") from None
    if header is None:
        raise ValidationError(f"{path}: missing header {','.join(columns)}")
    arr = np.array(rows, dtype=float).reshape(-1, len(columns))
    return arr, meta


def read_grid(path):
    """Spin grid from CSV, or from ``.bin`` with a ``.json`` sidecar giving the shape."""
    path = Path(path)
    if path.suffix == ".bin":
        side = json.loads(path.with_suffix(".json").read_text())
        shape = tuple(side["shape"])
        cols = tuple(side.get("columns", GRID_COLUMNS))
        if cols != GRID_COLUMNS or len(shape) != 2 or shape[1] != len(GRID_COLUMNS):
            raise ValidationError(f"{path}: sidecar must describe {len(GRID_COLUMNS)} grid columns")
        arr = np.fromfile(path, dtype="<f8")
        if arr.size != shape[0] * shape[1]:
            raise ValidationError(f"{path}: {arr.size} values, sidecar shape {shape}")
        arr = arr.reshape(shape)
    else:
        arr, _ = _read_rows(path, GRID_COLUMNS)
    return SpinGrid(arr[:, 0:3], arr[:, 3], arr[:, 4], arr[:, 5], arr[:, 6] != 0)


def write_grid(path, grid):
    path = Path(path)
    arr = np.column_stack([grid.positions, grid.offres, grid.t1, grid.t2, grid.mask.astype(float)])
    if path.suffix == ".bin":
        arr.astype("<f8").tofile(path)
        path.with_suffix(".json").write_text(
            json.dumps({"shape": list(arr.shape), "dtype": "<f8", "columns": list(GRID_COLUMNS)})
        )
        return
    with path.open("w", newline="") as fh:
        fh.write(",".join(GRID_COLUMNS) + "\n")
        for row in arr:
            vals = [_fmt(v) for v in row[:6]] + [str(int(row[6]))]
            fh.write(",".join(vals) + "\n")


def read_pulse(path):
    arr, meta = _read_rows(path, PULSE_COLUMNS)
    if "dt_s" not in meta:
        side = Path(path).with_suffix(".json")
        if side.exists():
            meta["dt_s"] = json.loads(side.read_text())["dt_s"]
        else:
            raise ValidationError(f"{path}: no '# dt_s=' line and no JSON sidecar")
    dt = float(meta["dt_s"])
    if arr.shape[0] and not np.array_equal(arr[:, 0], np.arange(arr.shape[0])):
        raise ValidationError(f"{path}: index column must count 0, 1, 2, ...")
    return Pulse(arr[:, 1] + 1j * arr[:, 2], arr[:, 3:6], dt)


def write_pulse(path, pulse):
    with Path(path).open("w", newline="") as fh:
        fh.write(f"# dt_s={_fmt(pulse.dt)}\n")
        fh.write(",".join(PULSE_COLUMNS) + "\n")
        for i in range(pulse.n_samples):
            b = pulse.rf[i]
            g = pulse.grad[i]
            fh.write(",".join([str(i), _fmt(b.real), _fmt(b.imag)] + [_fmt(v) for v in g]) + "\n")


def read_magnetization(path):
    arr, _ = _read_rows(path, MAG_COLUMNS)
    return arr[:, 1:4]


def write_magnetization(path, m):
    m = np.asarray(m, dtype=float)
    with Path(path).open("w", newline="") as fh:
        fh.write(",".join(MAG_COLUMNS) + "\n")
        for i, row in enumerate(m):
            fh.write(",".join([str(i)] + [_fmt(v) for v in row]) + "\n")


def read_labels(path):
    """Voxel labels (0 = OV, 1 = IV, 2 = don't-care), one per line or a ``label`` column."""
    labels = []
    with Path(path).open() as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#") or text == "label":
                continue
            try:
                v = int(text.split(",")[-1])
            except ValueError:
                raise ValidationError(f"{path}:{lineno}: malformed label {text!r}") from None
            if v not in (0, 1, 2):
                raise ValidationError(f"{path}:{lineno}: label must be 0, 1 or 2, got {v}")
            labels.append(v)
    return np.array(labels, dtype=int)


def write_history(path, rows, columns):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row[c]) if isinstance(row[c], float) else row[c] for c in columns])
