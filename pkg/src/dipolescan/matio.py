"""Plain-text matrix format used repo-wide.

First line ``rows cols``, then ``rows`` lines of whitespace-separated
decimal numbers; scientific notation is accepted on read.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np


def write_matrix(path, matrix) -> None:
    mat = np.atleast_2d(np.asarray(matrix, dtype=float))
    rows, cols = mat.shape
    lines = [f"{rows} {cols}"]
    for row in mat:
        lines.append(" ".join(repr(float(v)) for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_matrix(path) -> np.ndarray:
    text = Path(path).read_text()
    lines = [line for line in text.splitlines() if line.strip()]
    if not lines:
        raise ValueError(f"{path}: empty matrix file")
    header = lines[0].split()
    if len(header) != 2:
        raise ValueError(f"{path}: first line must be 'rows cols'")
    try:
        rows, cols = int(header[0]), int(header[1])
    except ValueError as err:
        raise ValueError(f"{path}: first line must be 'rows cols'") from err
    if len(lines) - 1 != rows:
        raise ValueError(f"{path}: expected {rows} data rows, found {len(lines) - 1}")
    out = np.empty((rows, cols))
    for i, line in enumerate(lines[1:]):
        values = line.split()
        if len(values) != cols:
            raise ValueError(f"{path}: row {i + 1} has {len(values)} entries, expected {cols}")
        try:
            out[i] = [float(v) for v in values]
        except ValueError as err:
            raise ValueError(f"{path}: row {i + 1} contains a non-numeric entry") from err
    return out
