"""Matrix files (CSV with header, raw binary container) and key=value configs."""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ValidationError

__all__ = [
    "write_matrix",
    "read_matrix",
    "write_csv",
    "read_csv",
    "write_binary",
    "read_binary",
    "read_config",
    "write_json",
]

FLOAT_FMT = "%.17g"
_BIN_HEADER = struct.Struct("<QQ")


def write_csv(path, A, header=None):
    """Write a matrix with a header row; 17 significant digits round-trip float64."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    if A.ndim != 2:
        raise ValidationError("only 2-d arrays can be written")
    if header is None:
        header = [f"c{j + 1}" for j in range(A.shape[1])]
    if len(header) != A.shape[1]:
        raise ValidationError("header length does not match the number of columns")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in A:
            fh.write(",".join(FLOAT_FMT % v for v in row) + "\n")
    return path


def read_csv(path, with_header=False):
    """Read a header-first numeric CSV; parse errors name the file and line."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        width = len(header)
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise ValidationError(f"{path}:{line}: expected {width} fields, found {len(row)}")
            try:
                rows.append([float(c) for c in row])
            except ValueError:
                raise ValidationError(f"{path}:{line}: non-numeric field") from None
    A = np.array(rows, dtype=float).reshape(len(rows), width)
    return (A, header) if with_header else A


def write_binary(path, A):
    """Little-endian container: two uint64 (rows, cols) then row-major float64."""
    A = np.ascontiguousarray(np.atleast_2d(np.asarray(A, dtype="<f8")))
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_BIN_HEADER.pack(*A.shape))
        fh.write(A.tobytes(order="C"))
    return path


def read_binary(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    raw = path.read_bytes()
    if len(raw) < _BIN_HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    rows, cols = _BIN_HEADER.unpack_from(raw)
    body = raw[_BIN_HEADER.size:]
    if len(body) != 8 * rows * cols:
        raise ValidationError(f"{path}: expected {rows}x{cols} doubles, found {len(body)} bytes")
    return np.frombuffer(body, dtype="<f8").reshape(rows, cols).astype(float)


def write_matrix(directory, stem, A, header=None, fmt="csv"):
    directory = Path(directory)
    if fmt == "bin":
        return write_binary(directory / f"{stem}.bin", A)
    return write_csv(directory / f"{stem}.csv", A, header)


def read_matrix(directory, stem):
    """Load ``stem.csv`` or ``stem.bin`` from ``directory``, whichever exists."""
    directory = Path(directory)
    csv_path = directory / f"{stem}.csv"
    bin_path = directory / f"{stem}.bin"
    if csv_path.exists():
        return read_csv(csv_path)
    if bin_path.exists():
        return read_binary(bin_path)
    raise FileNotFoundError(f"missing file: {csv_path}")


def read_config(path) -> dict:
    """Flat ``key = value`` file; ``#`` starts a comment. Keys use underscores."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing file: {path}")
    out = {}
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def write_json(path, obj):
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serializable: {type(o).__name__}")
