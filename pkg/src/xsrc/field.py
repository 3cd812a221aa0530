"""Gridded spatiotemporal data: storage, masking, coarse-graining, tiling, file I/O.

The universal carrier is :class:`GridSeries`, a time sequence of 2-D scalar
fields on a regular grid with a validity mask (land/sea style). Values are
float64 in memory and float32 in FGRID files; masked cells are held at zero
and ignored by every computation.

FGRID layout (little-endian): magic ``FGRD``, version u32 = 1, n_time u32,
n_rows u32, n_cols u32, dt f64, origin_lat f64, origin_lon f64, cell_deg f64,
mask as n_rows*n_cols bytes (0/1), payload n_time*n_rows*n_cols f32,
row-major within a frame, time-major across frames.
"""

from __future__ import annotations

import csv
import math
import os
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConfigError,
    CorruptHeaderError,
    DimensionMismatchError,
    NoValidCellsError,
    NumericalError,
    UnsupportedVersionError,
)

FGRID_MAGIC = b"FGRD"
FGRID_VERSION = 1
_HEADER = struct.Struct("<4sIIIIdddd")

BOUNDARY_POLICIES = ("clamp", "periodic")


@dataclass
class GridSeries:
    """A masked time sequence of 2-D scalar fields.

    values: (n_time, n_rows, n_cols) float64; entries at masked-out cells are
    forced to zero. mask: (n_rows, n_cols) bool, True = valid. dt and the
    origin/cell_size fields are labeling metadata only.
    """

    values: np.ndarray
    mask: np.ndarray = None
    dt: float = 1.0
    origin_lat: float = 0.0
    origin_lon: float = 0.0
    cell_deg: float = 1.0

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, order="C", copy=True)
        if v.ndim != 3:
            raise DimensionMismatchError(
                f"values must be (n_time, n_rows, n_cols), got shape {v.shape}"
            )
        if min(v.shape) < 1:
            raise DimensionMismatchError(f"empty dimension in shape {v.shape}")
        if self.mask is None:
            m = np.ones(v.shape[1:], dtype=bool)
        else:
            m = np.array(self.mask, dtype=bool, copy=True)
        if m.shape != v.shape[1:]:
            raise DimensionMismatchError(
                f"mask shape {m.shape} does not match frame shape {v.shape[1:]}"
            )
        if not m.any():
            raise NoValidCellsError("no valid cells")
        if not np.isfinite(v[:, m]).all():
            raise NumericalError("non-finite values at valid cells")
        v[:, ~m] = 0.0
        self.values = v
        self.mask = m
        self.dt = float(self.dt)
        self.origin_lat = float(self.origin_lat)
        self.origin_lon = float(self.origin_lon)
        self.cell_deg = float(self.cell_deg)

    @property
    def n_time(self) -> int:
        return self.values.shape[0]

    @property
    def n_rows(self) -> int:
        return self.values.shape[1]

    @property
    def n_cols(self) -> int:
        return self.values.shape[2]

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())

    def valid_cells(self) -> np.ndarray:
        """Flat row-major indices of valid cells."""
        return np.flatnonzero(self.mask.ravel())

    def frames_flat(self) -> np.ndarray:
        """(n_time, n_rows*n_cols) view of the values."""
        return self.values.reshape(self.n_time, -1)

    def slice_time(self, start: int, stop: int) -> "GridSeries":
        return GridSeries(
            self.values[start:stop],
            self.mask,
            dt=self.dt,
            origin_lat=self.origin_lat,
            origin_lon=self.origin_lon,
            cell_deg=self.cell_deg,
        )

    def with_values(self, values: np.ndarray) -> "GridSeries":
        """Same grid and metadata, new values (frame shape must match)."""
        return GridSeries(
            values,
            self.mask,
            dt=self.dt,
            origin_lat=self.origin_lat,
            origin_lon=self.origin_lon,
            cell_deg=self.cell_deg,
        )

    def fingerprint(self) -> str:
        """Hex digest identifying the exact stored content."""
        import hashlib

        h = hashlib.sha256()
        h.update(np.array(self.values.shape, dtype="<u4").tobytes())
        h.update(self.mask.astype(np.uint8).tobytes())
        h.update(self.values.astype("<f8").tobytes())
        return h.hexdigest()


def _atomic_write(path, data: bytes):
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_grid_series(series: GridSeries, path) -> None:
    """Write FGRID. Masked cells are written as 0; payload is float32, so
    values survive a round trip exactly iff they are float32-representable."""
    header = _HEADER.pack(
        FGRID_MAGIC,
        FGRID_VERSION,
        series.n_time,
        series.n_rows,
        series.n_cols,
        series.dt,
        series.origin_lat,
        series.origin_lon,
        series.cell_deg,
    )
    payload = series.values.astype("<f4")
    payload[:, ~series.mask] = 0.0
    blob = header + series.mask.astype(np.uint8).tobytes() + payload.tobytes()
    _atomic_write(path, blob)


def load_grid_series(path) -> GridSeries:
    """Read FGRID, returning the series exactly as written."""
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < _HEADER.size:
        raise CorruptHeaderError(f"{path}: file shorter than FGRID header")
    magic, version, n_time, n_rows, n_cols, dt, olat, olon, cdeg = _HEADER.unpack_from(
        blob
    )
    if magic != FGRID_MAGIC:
        raise CorruptHeaderError(f"{path}: bad magic {magic!r}")
    if version != FGRID_VERSION:
        raise UnsupportedVersionError(
            f"{path}: FGRID version {version} not supported (expected {FGRID_VERSION})"
        )
    if min(n_time, n_rows, n_cols) < 1:
        raise CorruptHeaderError(f"{path}: zero dimension in header")
    n_cells = n_rows * n_cols
    expected = _HEADER.size + n_cells + 4 * n_time * n_cells
    if len(blob) != expected:
        raise DimensionMismatchError(
            f"{path}: dimension mismatch (expected {expected} bytes, found {len(blob)})"
        )
    mask_bytes = np.frombuffer(blob, dtype=np.uint8, count=n_cells, offset=_HEADER.size)
    if not np.isin(mask_bytes, (0, 1)).all():
        raise CorruptHeaderError(f"{path}: mask bytes must be 0 or 1")
    mask = mask_bytes.astype(bool).reshape(n_rows, n_cols)
    if not mask.any():
        raise NoValidCellsError(f"{path}: no valid cells")
    values = np.frombuffer(
        blob, dtype="<f4", count=n_time * n_cells, offset=_HEADER.size + n_cells
    ).reshape(n_time, n_rows, n_cols)
    if not np.isfinite(values[:, mask]).all():
        raise NumericalError(f"{path}: non-finite values at valid cells")
    return GridSeries(
        values.astype(np.float64),
        mask,
        dt=dt,
        origin_lat=olat,
        origin_lon=olon,
        cell_deg=cdeg,
    )


def load_csv_series(path, dt: float = 1.0, origin_lat: float = 0.0,
                    origin_lon: float = 0.0, cell_deg: float = 1.0) -> GridSeries:
    """Import the tiny hand-written CSV form (header ``t,row,col,value``).

    Grid dims are max index + 1; cells never mentioned are masked out; every
    mentioned cell must appear exactly once per time step.
    """
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise CorruptHeaderError(f"{path}: empty CSV") from None
        if [h.strip() for h in header] != ["t", "row", "col", "value"]:
            raise CorruptHeaderError(f"{path}: expected header t,row,col,value")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                t, r, c = int(row[0]), int(row[1]), int(row[2])
                v = float(row[3])
            except (ValueError, IndexError):
                raise CorruptHeaderError(f"{path}:{lineno}: malformed row {row!r}") from None
            if min(t, r, c) < 0:
                raise CorruptHeaderError(f"{path}:{lineno}: negative index")
            entries.append((t, r, c, v))
    if not entries:
        raise NoValidCellsError(f"{path}: no data rows")
    n_time = max(e[0] for e in entries) + 1
    n_rows = max(e[1] for e in entries) + 1
    n_cols = max(e[2] for e in entries) + 1
    values = np.zeros((n_time, n_rows, n_cols))
    seen = np.zeros((n_time, n_rows, n_cols), dtype=bool)
    for t, r, c, v in entries:
        if seen[t, r, c]:
            raise DimensionMismatchError(f"{path}: duplicate entry for (t={t},{r},{c})")
        seen[t, r, c] = True
        values[t, r, c] = v
    mask = seen.any(axis=0)
    if not seen[:, mask].all():
        raise DimensionMismatchError(
            f"{path}: every mentioned cell needs a value at every time step"
        )
    return GridSeries(values, mask, dt=dt, origin_lat=origin_lat,
                      origin_lon=origin_lon, cell_deg=cell_deg)


def coarse_grain(series: GridSeries, factor: int) -> GridSeries:
    """Block-average each frame over factor x factor blocks.

    The mean is mask-aware: each coarse cell averages only the valid fine
    cells in its block (division by the valid count, not factor^2), and is
    valid iff at least one fine cell in the block is valid. Geolocation
    metadata is rescaled to keep cell centers labeled consistently.
    """
    factor = int(factor)
    if factor < 1:
        raise ConfigError(f"coarse_grain factor must be >= 1, got {factor}")
    if series.n_rows % factor or series.n_cols % factor:
        raise ConfigError(
            f"factor {factor} does not divide grid dims "
            f"{series.n_rows}x{series.n_cols}"
        )
    if factor == 1:
        return series.with_values(series.values)
    rr, cc = series.n_rows // factor, series.n_cols // factor
    m = series.mask.reshape(rr, factor, cc, factor)
    counts = m.sum(axis=(1, 3))
    sums = series.values.reshape(series.n_time, rr, factor, cc, factor).sum(axis=(2, 4))
    out_mask = counts > 0
    denom = np.where(out_mask, counts, 1)
    out = sums / denom
    out[:, ~out_mask] = 0.0
    return GridSeries(
        out,
        out_mask,
        dt=series.dt,
        origin_lat=series.origin_lat,
        origin_lon=series.origin_lon,
        cell_deg=series.cell_deg * factor,
    )


@dataclass(frozen=True)
class TileSpec:
    """Index sets of one tile: central cells it owns and the buffered input
    window it reads. Both are flat row-major grid indices, valid cells only,
    in deterministic window order."""

    tile_index: int
    row0: int
    col0: int
    center_cells: np.ndarray
    input_cells: np.ndarray

    @property
    def active(self) -> bool:
        return self.center_cells.size > 0


@dataclass(frozen=True)
class Tiling:
    """Exact partition of a grid into equal tiles plus symmetric overlap
    buffers, with a per-axis boundary policy (periodic wraps, clamp drops)."""

    grid_rows: int
    grid_cols: int
    tile_rows: int
    tile_cols: int
    overlap: int
    boundary_row: str
    boundary_col: str
    tiles: tuple = field(default_factory=tuple)

    @property
    def n_tile_rows(self) -> int:
        return self.grid_rows // self.tile_rows

    @property
    def n_tile_cols(self) -> int:
        return self.grid_cols // self.tile_cols

    @property
    def n_tiles(self) -> int:
        return len(self.tiles)

    def active_tiles(self) -> list:
        return [t for t in self.tiles if t.active]

    def owner_maps(self):
        """(owner_tile, owner_row) per flat grid cell; -1 where invalid.

        owner_row is the position of the cell inside its owner's center list,
        i.e. the row of the owning reservoir's output that predicts it.
        """
        n = self.grid_rows * self.grid_cols
        owner_tile = np.full(n, -1, dtype=np.int64)
        owner_row = np.full(n, -1, dtype=np.int64)
        for t in self.tiles:
            owner_tile[t.center_cells] = t.tile_index
            owner_row[t.center_cells] = np.arange(t.center_cells.size)
        return owner_tile, owner_row


def _resolve_axis(idx: int, size: int, policy: str):
    if 0 <= idx < size:
        return idx
    if policy == "periodic":
        return idx % size
    return None


def make_tiling(grid_rows, grid_cols, tile_rows, tile_cols, overlap=2,
                boundary_row="clamp", boundary_col="periodic", mask=None) -> Tiling:
    """Partition a grid into equal tiles and derive per-tile index sets.

    Buffer positions beyond an edge wrap under ``periodic`` and are dropped
    under ``clamp``. On a periodic axis shorter than the buffered window the
    same cell can legitimately appear more than once in input_cells (two
    window positions resolving to one cell). Masked cells are excluded from
    both lists; a tile whose central region has no valid cell is inactive.
    """
    grid_rows, grid_cols = int(grid_rows), int(grid_cols)
    tile_rows, tile_cols = int(tile_rows), int(tile_cols)
    overlap = int(overlap)
    if boundary_row not in BOUNDARY_POLICIES or boundary_col not in BOUNDARY_POLICIES:
        raise ConfigError(
            f"boundary policies must be one of {BOUNDARY_POLICIES}, got "
            f"({boundary_row!r}, {boundary_col!r})"
        )
    if min(grid_rows, grid_cols, tile_rows, tile_cols) < 1 or overlap < 0:
        raise ConfigError("grid/tile dims must be >= 1 and overlap >= 0")
    if grid_rows % tile_rows or grid_cols % tile_cols:
        raise ConfigError(
            f"tile {tile_rows}x{tile_cols} does not divide grid {grid_rows}x{grid_cols}"
        )
    if mask is None:
        mask = np.ones((grid_rows, grid_cols), dtype=bool)
    else:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (grid_rows, grid_cols):
            raise ConfigError(f"mask shape {mask.shape} does not match grid")

    tiles = []
    index = 0
    for ti in range(grid_rows // tile_rows):
        for tj in range(grid_cols // tile_cols):
            r0, c0 = ti * tile_rows, tj * tile_cols
            center = []
            for r in range(r0, r0 + tile_rows):
                for c in range(c0, c0 + tile_cols):
                    if mask[r, c]:
                        center.append(r * grid_cols + c)
            inputs = []
            for r in range(r0 - overlap, r0 + tile_rows + overlap):
                rr = _resolve_axis(r, grid_rows, boundary_row)
                if rr is None:
                    continue
                for c in range(c0 - overlap, c0 + tile_cols + overlap):
                    cc = _resolve_axis(c, grid_cols, boundary_col)
                    if cc is None:
                        continue
                    if mask[rr, cc]:
                        inputs.append(rr * grid_cols + cc)
            tiles.append(
                TileSpec(
                    tile_index=index,
                    row0=r0,
                    col0=c0,
                    center_cells=np.asarray(center, dtype=np.int64),
                    input_cells=np.asarray(inputs, dtype=np.int64),
                )
            )
            index += 1
    return Tiling(
        grid_rows=grid_rows,
        grid_cols=grid_cols,
        tile_rows=tile_rows,
        tile_cols=tile_cols,
        overlap=overlap,
        boundary_row=boundary_row,
        boundary_col=boundary_col,
        tiles=tuple(tiles),
    )


def extract_tile_input(frame: np.ndarray, tiling: Tiling, tile_index: int) -> np.ndarray:
    """Gather a tile's input vector from a full frame, in input_cells order."""
    tile = tiling.tiles[tile_index]
    if not tile.active:
        raise ConfigError(f"tile {tile_index} is inactive (no valid center cells)")
    frame = np.asarray(frame)
    if frame.shape != (tiling.grid_rows, tiling.grid_cols):
        raise DimensionMismatchError(
            f"frame shape {frame.shape} does not match grid "
            f"{tiling.grid_rows}x{tiling.grid_cols}"
        )
    return frame.reshape(-1)[tile.input_cells]


def scatter_tile_outputs(outputs, tiling: Tiling) -> np.ndarray:
    """Assemble a frame from per-tile output vectors (inverse of the
    partition). ``outputs`` maps active tile index -> vector over that tile's
    center_cells; masked cells come back 0."""
    frame = np.zeros(tiling.grid_rows * tiling.grid_cols)
    for tile in tiling.tiles:
        if not tile.active:
            continue
        if tile.tile_index not in outputs:
            raise ConfigError(f"missing output for active tile {tile.tile_index}")
        vec = np.asarray(outputs[tile.tile_index], dtype=np.float64)
        if vec.shape != (tile.center_cells.size,):
            raise DimensionMismatchError(
                f"tile {tile.tile_index}: output length {vec.shape} != "
                f"{tile.center_cells.size} center cells"
            )
        frame[tile.center_cells] = vec
    return frame.reshape(tiling.grid_rows, tiling.grid_cols)
