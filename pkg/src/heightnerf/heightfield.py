"""Object-height grids and their ESRI ASCII / JSON serializations.

Heights are stored south-to-north: ``heights[row, col]`` covers the square
``[origin_x + col*cell, origin_x + (col+1)*cell) x [origin_y + row*cell, ...)``.
ESRI ASCII files list the northernmost row first, so parsing flips rows.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_NODATA = -9999.0

_REQUIRED_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "cellsize")


class HeightFieldParseError(ValueError):
    """Malformed elevation input; message names the offending line."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


@dataclass(frozen=True)
class HeightField:
    origin_x: float
    origin_y: float
    cell_size: float
    ncols: int
    nrows: int
    heights: np.ndarray
    nodata_value: float = DEFAULT_NODATA

    def __post_init__(self):
        h = np.array(self.heights, dtype=np.float64)
        if self.cell_size <= 0:
            raise ValueError("cell_size must be positive")
        if self.ncols <= 0 or self.nrows <= 0:
            raise ValueError("grid dimensions must be positive")
        if h.size != self.ncols * self.nrows:
            raise ValueError(f"expected {self.ncols * self.nrows} heights, got {h.size}")
        h = h.reshape(self.nrows, self.ncols)
        valid = h != self.nodata_value
        if np.any(h[valid] < 0) or not np.all(np.isfinite(h[valid])):
            raise ValueError("heights must be finite and non-negative")
        h.setflags(write=False)
        object.__setattr__(self, "heights", h)

    @property
    def nodata_mask(self) -> np.ndarray:
        return self.heights == self.nodata_value

    def clean_heights(self) -> np.ndarray:
        """Heights with nodata cells replaced by 0 (C-contiguous float64)."""
        return np.ascontiguousarray(np.where(self.nodata_mask, 0.0, self.heights))

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """``(xmin, xmax, ymin, ymax)`` of the grid."""
        return (
            self.origin_x,
            self.origin_x + self.ncols * self.cell_size,
            self.origin_y,
            self.origin_y + self.nrows * self.cell_size,
        )

    def cell_centers(self) -> np.ndarray:
        """World (x, y) of every cell center, shape ``(nrows, ncols, 2)``."""
        xs = self.origin_x + (np.arange(self.ncols) + 0.5) * self.cell_size
        ys = self.origin_y + (np.arange(self.nrows) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)

    def max_height(self) -> float:
        return float(self.clean_heights().max())


def height_at(hf: HeightField, x: float, y: float) -> float:
    """Nearest-cell height at (x, y); 0 outside the grid or on nodata cells.

    A point on a shared cell edge belongs to the cell with the larger index.
    """
    col = math.floor((x - hf.origin_x) / hf.cell_size)
    row = math.floor((y - hf.origin_y) / hf.cell_size)
    if col < 0 or row < 0 or col >= hf.ncols or row >= hf.nrows:
        return 0.0
    h = float(hf.heights[row, col])
    if h == hf.nodata_value:
        return 0.0
    return h


def heights_at(hf: HeightField, x, y, clean: np.ndarray | None = None) -> np.ndarray:
    """Vectorized :func:`height_at`."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    grid = hf.clean_heights() if clean is None else clean
    col = np.floor((x - hf.origin_x) / hf.cell_size)
    row = np.floor((y - hf.origin_y) / hf.cell_size)
    inside = (col >= 0) & (row >= 0) & (col < hf.ncols) & (row < hf.nrows)
    ci = np.where(inside, col, 0).astype(np.intp)
    ri = np.where(inside, row, 0).astype(np.intp)
    return np.where(inside, grid[ri, ci], 0.0)


def _format_value(v: float) -> str:
    return repr(float(v))


def parse_esri_ascii(text: str) -> HeightField:
    lines = text.splitlines()
    header: dict[str, float] = {}
    i = 0
    while i < len(lines):
        stripped = lines[i].strip()
        if not stripped:
            i += 1
            continue
        parts = stripped.split()
        key = parts[0].lower()
        if key[0].isalpha():
            if len(parts) != 2:
                raise HeightFieldParseError(f"malformed header entry {stripped!r}", i + 1)
            try:
                header[key] = float(parts[1])
            except ValueError:
                raise HeightFieldParseError(f"non-numeric header value {parts[1]!r}", i + 1) from None
            i += 1
        else:
            break
    for key in _REQUIRED_KEYS:
        if key not in header:
            raise HeightFieldParseError(f"missing header key {key!r}", i + 1 if i < len(lines) else None)
    ncols, nrows = header["ncols"], header["nrows"]
    if ncols != int(ncols) or nrows != int(nrows) or ncols <= 0 or nrows <= 0:
        raise HeightFieldParseError("ncols/nrows must be positive integers")
    ncols, nrows = int(ncols), int(nrows)
    nodata = header.get("nodata_value", DEFAULT_NODATA)

    rows: list[list[float]] = []
    for j in range(i, len(lines)):
        stripped = lines[j].strip()
        if not stripped:
            continue
        tokens = stripped.split()
        if len(tokens) != ncols:
            raise HeightFieldParseError(f"expected {ncols} values, found {len(tokens)}", j + 1)
        if len(rows) == nrows:
            raise HeightFieldParseError(f"more than {nrows} data rows", j + 1)
        try:
            rows.append([float(t) for t in tokens])
        except ValueError as exc:
            raise HeightFieldParseError(f"non-numeric value ({exc})", j + 1) from None
    if len(rows) != nrows:
        raise HeightFieldParseError(f"expected {nrows} data rows, found {len(rows)}", len(lines))

    grid = np.array(rows[::-1], dtype=np.float64)
    try:
        return HeightField(
            origin_x=header["xllcorner"],
            origin_y=header["yllcorner"],
            cell_size=header["cellsize"],
            ncols=ncols,
            nrows=nrows,
            heights=grid,
            nodata_value=nodata,
        )
    except ValueError as exc:
        raise HeightFieldParseError(str(exc)) from None


def to_esri_ascii(hf: HeightField) -> str:
    out = [
        f"ncols {hf.ncols}",
        f"nrows {hf.nrows}",
        f"xllcorner {_format_value(hf.origin_x)}",
        f"yllcorner {_format_value(hf.origin_y)}",
        f"cellsize {_format_value(hf.cell_size)}",
        f"NODATA_value {_format_value(hf.nodata_value)}",
    ]
    for row in hf.heights[::-1]:
        out.append(" ".join(_format_value(v) for v in row))
    return "\n".join(out) + "\n"


def to_json_dict(hf: HeightField) -> dict:
    return {
        "origin": [float(hf.origin_x), float(hf.origin_y)],
        "cell_size": float(hf.cell_size),
        "ncols": hf.ncols,
        "nrows": hf.nrows,
        "nodata_value": float(hf.nodata_value),
        "heights": [float(v) for v in hf.heights.ravel()],
    }


def from_json_dict(d: dict) -> HeightField:
    try:
        ox, oy = d["origin"]
        return HeightField(
            origin_x=float(ox),
            origin_y=float(oy),
            cell_size=float(d["cell_size"]),
            ncols=int(d["ncols"]),
            nrows=int(d["nrows"]),
            heights=np.asarray(d["heights"], dtype=np.float64),
            nodata_value=float(d.get("nodata_value", DEFAULT_NODATA)),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise HeightFieldParseError(f"invalid heightfield JSON: {exc}") from None


def to_json(hf: HeightField) -> str:
    return json.dumps(to_json_dict(hf), indent=None, separators=(",", ":")) + "\n"


def from_json(text: str) -> HeightField:
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise HeightFieldParseError(f"invalid JSON: {exc.msg}", exc.lineno) from None
    return from_json_dict(d)


def load(path) -> HeightField:
    """Load ``.asc`` or ``.json`` heightfield from disk."""
    path = str(path)
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if path.endswith(".json"):
        return from_json(text)
    return parse_esri_ascii(text)
