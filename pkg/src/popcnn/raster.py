"""Georeferenced grids, log2 population classes, and the raster/tile codecs.

Grids are north-up lattices of square cells addressed by ``(i, j)`` with
``i`` counting rows southward from the NW corner and ``j`` counting columns
eastward.  Every grid carries a boolean ``mask`` where ``True`` marks a
nodata cell.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    AscDimensionError,
    AscHeaderError,
    AscValueError,
    DataError,
    TileFormatError,
)

PAPER_K_MAX = 17
ASC_NODATA = -9999


@dataclass(frozen=True)
class GeoTransform:
    origin_lon: float
    origin_lat: float
    cell_size: float
    rows: int
    cols: int

    def __post_init__(self):
        if not (self.cell_size > 0 and math.isfinite(self.cell_size)):
            raise ValueError(f"cell_size must be positive, got {self.cell_size}")
        if self.rows < 1 or self.cols < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.rows}x{self.cols}")

    @classmethod
    def paper_default(cls) -> GeoTransform:
        """The 0.01 degree CONUS lattice anchored at 124.849W, 49.3844N."""
        return cls(-124.849, 49.3844, 0.01, 2499, 5796)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def cell_centroid(self, i: int, j: int) -> tuple[float, float]:
        if not (0 <= i < self.rows and 0 <= j < self.cols):
            raise IndexError(f"cell ({i}, {j}) outside {self.rows}x{self.cols} grid")
        lon = self.origin_lon + (j + 0.5) * self.cell_size
        lat = self.origin_lat - (i + 0.5) * self.cell_size
        return lon, lat

    def centroids(self) -> tuple[np.ndarray, np.ndarray]:
        """Centroid lon/lat arrays of shape ``(rows, cols)``."""
        j = np.arange(self.cols)
        i = np.arange(self.rows)
        lon = self.origin_lon + (j + 0.5) * self.cell_size
        lat = self.origin_lat - (i + 0.5) * self.cell_size
        return np.broadcast_to(lon, self.shape).copy(), np.broadcast_to(lat[:, None], self.shape).copy()

    def locate(self, lon: float, lat: float) -> tuple[int, int] | None:
        """Cell containing ``(lon, lat)``, or ``None`` when outside the grid.

        Columns are closed on the west edge, rows closed on the north edge.
        """
        j = math.floor((lon - self.origin_lon) / self.cell_size)
        i = math.floor((self.origin_lat - lat) / self.cell_size)
        if 0 <= i < self.rows and 0 <= j < self.cols:
            return i, j
        return None

    def bounds(self) -> tuple[float, float, float, float]:
        """(west, south, east, north)."""
        return (
            self.origin_lon,
            self.origin_lat - self.rows * self.cell_size,
            self.origin_lon + self.cols * self.cell_size,
            self.origin_lat,
        )


def _empty_mask(geo):
    return np.zeros(geo.shape, dtype=bool)


@dataclass(eq=False)
class Grid:
    """A single-band raster on ``geo`` with a nodata mask."""

    geo: GeoTransform
    values: np.ndarray
    mask: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.mask is None:
            self.mask = _empty_mask(self.geo)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.shape != self.geo.shape or self.mask.shape != self.geo.shape:
            raise DataError(
                f"grid arrays {self.values.shape}/{self.mask.shape} do not match geo {self.geo.shape}"
            )

    def equals(self, other: Grid) -> bool:
        return (
            type(self) is type(other)
            and self.geo == other.geo
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values[~self.mask], other.values[~other.mask])
        )


@dataclass(eq=False)
class PopulationGrid(Grid):
    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        super().__post_init__()
        valid = self.values[~self.mask]
        if not np.all(np.isfinite(valid)) or np.any(valid < 0):
            raise DataError("population values must be finite and nonnegative")


@dataclass(eq=False)
class ClassGrid(Grid):
    k_max: int = PAPER_K_MAX

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.int64)
        super().__post_init__()
        valid = self.values[~self.mask]
        if valid.size and (valid.min() < 0 or valid.max() > self.k_max):
            raise DataError(f"class values must lie in [0, {self.k_max}]")

    @property
    def n_classes(self) -> int:
        return self.k_max + 1

    def max_class(self) -> int:
        valid = self.values[~self.mask]
        return int(valid.max()) if valid.size else 0


# -- binning -----------------------------------------------------------------


def bin_population(p: float) -> int:
    """Class 0 for ``p < 1``, otherwise ``k`` with ``2**(k-1) <= p < 2**k``."""
    p = float(p)
    if not math.isfinite(p) or p < 0:
        raise ValueError(f"population must be finite and nonnegative, got {p}")
    if p < 1:
        return 0
    # frexp: p = m * 2**e with 0.5 <= m < 1, hence 2**(e-1) <= p < 2**e
    return math.frexp(p)[1]


def bin_array(values: np.ndarray) -> np.ndarray:
    """Vectorized :func:`bin_population`."""
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)) or np.any(values < 0):
        raise ValueError("population must be finite and nonnegative")
    _, exponent = np.frexp(values)
    return np.where(values < 1, 0, exponent).astype(np.int64)


def unbin_midpoint(c: int) -> float:
    """Midpoint of class ``c``'s population interval (0 for class 0)."""
    if c < 0 or int(c) != c:
        raise ValueError(f"class index must be a nonnegative integer, got {c}")
    c = int(c)
    if c == 0:
        return 0.0
    return (2.0 ** (c - 1) + 2.0**c) / 2


def midpoint_array(classes: np.ndarray) -> np.ndarray:
    classes = np.asarray(classes, dtype=np.int64)
    if np.any(classes < 0):
        raise ValueError("class index must be nonnegative")
    return np.where(classes == 0, 0.0, 1.5 * np.exp2(classes - 1.0))


def bin_grid(grid: PopulationGrid, k_max: int = PAPER_K_MAX) -> ClassGrid:
    values = np.where(grid.mask, 0.0, grid.values)
    classes = bin_array(values)
    top = int(classes[~grid.mask].max()) if (~grid.mask).any() else 0
    if top > k_max:
        raise DataError(f"population reaches class {top}, above k_max={k_max}")
    return ClassGrid(grid.geo, classes, grid.mask.copy(), k_max=k_max)


# -- ESRI ASCII grid -----------------------------------------------------------


def _format_value(v: float) -> str:
    if float(v).is_integer() and abs(v) < 2**53:
        return str(int(v))
    return repr(float(v))


def _lower_corner(geo: GeoTransform) -> float:
    """yllcorner that reproduces ``origin_lat`` exactly when the reader adds it back."""
    height = geo.rows * geo.cell_size
    y = geo.origin_lat - height
    if y + height == geo.origin_lat:
        return y
    for direction in (math.inf, -math.inf):
        cand = y
        for _ in range(8):
            cand = math.nextafter(cand, direction)
            if cand + height == geo.origin_lat:
                return cand
    return y


def write_grid(grid: Grid, path) -> None:
    """Write ``grid`` as an ESRI ASCII grid (north row first)."""
    geo = grid.geo
    lines = [
        f"ncols {geo.cols}",
        f"nrows {geo.rows}",
        f"xllcorner {repr(float(geo.origin_lon))}",
        f"yllcorner {repr(_lower_corner(geo))}",
        f"cellsize {repr(float(geo.cell_size))}",
        f"NODATA_value {ASC_NODATA}",
    ]
    nodata = str(ASC_NODATA)
    for i in range(geo.rows):
        row = grid.values[i]
        m = grid.mask[i]
        lines.append(" ".join(nodata if m[j] else _format_value(row[j]) for j in range(geo.cols)))
    Path(path).write_text("\n".join(lines) + "\n")


_HEADER_KEYS = ("ncols", "nrows", "xllcorner", "yllcorner", "xllcenter", "yllcenter", "cellsize", "nodata_value")


def _parse_asc(path):
    text = Path(path).read_text()
    lines = text.splitlines()
    header = {}
    lineno = 0
    while lineno < len(lines):
        parts = lines[lineno].split()
        if not parts:
            lineno += 1
            continue
        key = parts[0].lower()
        if key not in _HEADER_KEYS:
            break
        if len(parts) != 2:
            raise AscHeaderError(f"header line needs one value: {lines[lineno]!r}", path, lineno + 1)
        if key in header:
            raise AscHeaderError(f"duplicate header key {parts[0]}", path, lineno + 1)
        try:
            header[key] = float(parts[1])
        except ValueError:
            raise AscHeaderError(f"unparsable header value {parts[1]!r}", path, lineno + 1) from None
        lineno += 1
    for key in ("ncols", "nrows", "cellsize"):
        if key not in header:
            raise AscHeaderError(f"missing header key {key}", path, lineno + 1)
    if ("xllcorner" in header) == ("xllcenter" in header) or ("yllcorner" in header) == ("yllcenter" in header):
        raise AscHeaderError("need exactly one of xllcorner/xllcenter and yllcorner/yllcenter", path, lineno + 1)
    ncols, nrows = header["ncols"], header["nrows"]
    if not (ncols.is_integer() and nrows.is_integer() and ncols >= 1 and nrows >= 1):
        raise AscHeaderError(f"bad grid dimensions {nrows}x{ncols}", path, lineno + 1)
    nrows, ncols = int(nrows), int(ncols)
    cs = header["cellsize"]
    if not cs > 0:
        raise AscHeaderError(f"cellsize must be positive, got {cs}", path, lineno + 1)
    west = header["xllcorner"] if "xllcorner" in header else header["xllcenter"] - cs / 2
    south = header["yllcorner"] if "yllcorner" in header else header["yllcenter"] - cs / 2
    geo = GeoTransform(west, south + nrows * cs, cs, nrows, ncols)
    nodata = header.get("nodata_value")

    values = np.empty((nrows, ncols), dtype=np.float64)
    mask = np.zeros((nrows, ncols), dtype=bool)
    row = 0
    for k in range(lineno, len(lines)):
        tokens = lines[k].split()
        if not tokens:
            continue
        if row >= nrows:
            raise AscDimensionError(f"more than {nrows} data rows", path, k + 1)
        if len(tokens) != ncols:
            raise AscDimensionError(f"expected {ncols} values, found {len(tokens)}", path, k + 1)
        for j, tok in enumerate(tokens):
            try:
                v = float(tok)
            except ValueError:
                raise AscValueError(f"unparsable value {tok!r}", path, k + 1) from None
            if nodata is not None and v == nodata:
                mask[row, j] = True
                v = 0.0
            values[row, j] = v
        row += 1
    if row != nrows:
        raise AscDimensionError(f"expected {nrows} data rows, found {row}", path, len(lines))
    return geo, values, mask


def read_grid(path, kind: str = "population", k_max: int | None = None) -> Grid:
    """Read an ``.asc`` file as a ``PopulationGrid``, ``ClassGrid`` or plain ``Grid``."""
    geo, values, mask = _parse_asc(path)
    if kind == "population":
        return PopulationGrid(geo, values, mask)
    if kind == "class":
        valid = values[~mask]
        if valid.size and not np.all(valid == np.round(valid)):
            raise AscValueError("class grid holds non-integer values", path)
        if k_max is None:
            k_max = max(PAPER_K_MAX, int(valid.max()) if valid.size else 0)
        return ClassGrid(geo, values.astype(np.int64), mask, k_max=k_max)
    if kind == "float":
        return Grid(geo, values, mask)
    raise ValueError(f"unknown grid kind {kind!r}")


# -- tiles ---------------------------------------------------------------------


@dataclass(eq=False)
class TileStack:
    """One ``tile_h x tile_w x bands`` uint8 image per grid cell.

    ``pixels`` has shape ``(rows, cols, tile_h, tile_w, bands)``; nodata
    cells hold zeros.
    """

    geo: GeoTransform
    pixels: np.ndarray
    mask: np.ndarray = field(default=None)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels)
        if self.pixels.dtype != np.uint8 or self.pixels.ndim != 5:
            raise DataError("tile pixels must be a uint8 array (rows, cols, h, w, bands)")
        if self.pixels.shape[:2] != self.geo.shape:
            raise DataError(f"tile stack {self.pixels.shape[:2]} does not match geo {self.geo.shape}")
        if self.mask is None:
            self.mask = _empty_mask(self.geo)
        self.mask = np.asarray(self.mask, dtype=bool)

    @property
    def tile_shape(self) -> tuple[int, int, int]:
        return tuple(self.pixels.shape[2:])

    def gather(self, cells) -> np.ndarray:
        """Tiles for a sequence of ``(i, j)`` cells, shape ``(n, h, w, bands)``."""
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 2)
        return self.pixels[cells[:, 0], cells[:, 1]]

    def equals(self, other: TileStack) -> bool:
        return self.geo == other.geo and np.array_equal(self.mask, other.mask) and np.array_equal(self.pixels, other.pixels)


def resample_tile(src: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbour resize of an ``h x w x bands`` tile, pixel-centre aligned."""
    src = np.asarray(src)
    if src.ndim != 3 or 0 in src.shape:
        raise ValueError(f"source tile must be a nonempty h x w x bands array, got {src.shape}")
    if height < 1 or width < 1:
        raise ValueError("target dimensions must be >= 1")
    h, w = src.shape[:2]
    # floor((y + 0.5) * h / height) in integer arithmetic
    ys = ((2 * np.arange(height) + 1) * h) // (2 * height)
    xs = ((2 * np.arange(width) + 1) * w) // (2 * width)
    return src[ys[:, None], xs[None, :], :]


def resample_stack(stack: TileStack, height: int, width: int) -> TileStack:
    px = stack.pixels
    h, w = px.shape[2:4]
    ys = ((2 * np.arange(height) + 1) * h) // (2 * height)
    xs = ((2 * np.arange(width) + 1) * w) // (2 * width)
    return TileStack(stack.geo, px[:, :, ys[:, None], xs[None, :], :], stack.mask.copy())


PGTS_MAGIC = b"PGTS"
PGTS_VERSION = 1
_PGTS_HEADER = struct.Struct("<4sHIIIII")
_GEO_TAG = b"GEOT"
_GEO_BLOCK = struct.Struct("<4sddd")


def write_tiles(stack: TileStack, path) -> None:
    """Write the PGTS container: fixed header, row-major tiles, then a geo/mask trailer."""
    rows, cols = stack.geo.shape
    th, tw, bands = stack.tile_shape
    geo = stack.geo
    with open(path, "wb") as fh:
        fh.write(_PGTS_HEADER.pack(PGTS_MAGIC, PGTS_VERSION, rows, cols, th, tw, bands))
        fh.write(np.ascontiguousarray(stack.pixels).tobytes())
        fh.write(_GEO_BLOCK.pack(_GEO_TAG, geo.origin_lon, geo.origin_lat, geo.cell_size))
        fh.write(stack.mask.astype(np.uint8).tobytes())


def read_tiles(path) -> TileStack:
    data = Path(path).read_bytes()
    if len(data) < _PGTS_HEADER.size:
        raise TileFormatError("truncated header", path)
    magic, version, rows, cols, th, tw, bands = _PGTS_HEADER.unpack_from(data, 0)
    if magic != PGTS_MAGIC:
        raise TileFormatError(f"bad magic {magic!r}", path)
    if version != PGTS_VERSION:
        raise TileFormatError(f"unsupported version {version}", path)
    if min(rows, cols, th, tw, bands) < 1:
        raise TileFormatError("zero dimension in header", path)
    n = rows * cols * th * tw * bands
    start = _PGTS_HEADER.size
    if len(data) < start + n:
        raise TileFormatError(f"truncated payload: need {n} bytes, have {len(data) - start}", path)
    pixels = np.frombuffer(data, dtype=np.uint8, count=n, offset=start).reshape(rows, cols, th, tw, bands).copy()
    rest = data[start + n :]
    if not rest:
        return TileStack(GeoTransform(0.0, 0.0, 1.0, rows, cols), pixels)
    if len(rest) != _GEO_BLOCK.size + rows * cols:
        raise TileFormatError("truncated or malformed geo trailer", path)
    tag, lon, lat, cs = _GEO_BLOCK.unpack_from(rest, 0)
    if tag != _GEO_TAG:
        raise TileFormatError(f"bad trailer tag {tag!r}", path)
    mask = np.frombuffer(rest, dtype=np.uint8, offset=_GEO_BLOCK.size).reshape(rows, cols).astype(bool)
    return TileStack(GeoTransform(lon, lat, cs, rows, cols), pixels, mask)


def aligned(a, b) -> bool:
    return a.geo == b.geo
