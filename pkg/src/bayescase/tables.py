"""CSV input/output with strict validation.

Floats are written with ``repr`` (shortest round-trip form, period decimal)
so identical runs give byte-identical files.
"""

from __future__ import annotations

import csv
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .mcmc import ValidationError


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: Path, header: Sequence[str], rows: Iterable[Sequence]) -> None:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def write_columns(path: Path, columns: dict[str, np.ndarray]) -> None:
    names = list(columns)
    arrays = [np.asarray(columns[k]).ravel() for k in names]
    if len({a.size for a in arrays}) > 1:
        raise ValueError("columns differ in length")
    write_csv(path, names, zip(*arrays))


def read_table(path, required: Sequence[str], optional_prefix: str | None = None) -> dict[str, list[str]]:
    """Read a headered CSV into columns of raw strings.

    Every required column must be present.  Blank cells and NaN/inf spellings
    are rejected with the file, line and column named.
    """
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"input file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValidationError(f"{path}: empty file") from None
        missing = [c for c in required if c not in header]
        if missing:
            raise ValidationError(f"{path}: missing column(s) {', '.join(missing)}")
        if len(set(header)) != len(header):
            raise ValidationError(f"{path}: duplicate column names")
        cols: dict[str, list[str]] = {h: [] for h in header}
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}")
            for h, cell in zip(header, row):
                cell = cell.strip()
                if cell == "":
                    raise ValidationError(f"{path}:{lineno}: blank cell in column {h!r}")
                if cell.lower() in {"nan", "+nan", "-nan", "inf", "+inf", "-inf", "infinity", "-infinity", "na"}:
                    raise ValidationError(f"{path}:{lineno}: non-finite value {cell!r} in column {h!r}")
                cols[h].append(cell)
    if not next(iter(cols.values()), []):
        raise ValidationError(f"{path}: no data rows")
    return cols


def as_float(cells: list[str], name: str, path) -> np.ndarray:
    try:
        out = np.array([float(c) for c in cells])
    except ValueError as exc:
        raise ValidationError(f"{path}: column {name!r} is not numeric ({exc})") from None
    if not np.all(np.isfinite(out)):
        raise ValidationError(f"{path}: column {name!r} has non-finite values")
    return out


def as_int(cells: list[str], name: str, path) -> np.ndarray:
    x = as_float(cells, name, path)
    if not np.all(x == np.round(x)):
        raise ValidationError(f"{path}: column {name!r} must hold integers")
    return x.astype(np.int64)

