"""Deterministic synthetic worlds: Gaussian cities, zero-population confusers,
rendered tiles and a rectangular county partition, for two census years.

Every tile is seeded from ``(world seed, year, i, j)`` through a SplitMix64
finalizer, so a tile never depends on the order cells are generated in.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .raster import GeoTransform, PopulationGrid, TileStack, bin_population
from .seeding import mix_seed

# Rendering constants.  Background pixels stay below STRUCTURE_THRESHOLD in
# every band; structure pixels stay above it.
STRUCTURE_THRESHOLD = 128
BACKGROUND_BASE = 30
BACKGROUND_BAND_STEP = 8
BACKGROUND_NOISE = 24
STRUCTURE_BASE = 170
STRUCTURE_BAND_STEP = 10
STRUCTURE_NOISE = 20


def cell_seed(seed: int, year: int, i: int, j: int) -> int:
    return mix_seed(seed, year, i, j)


@dataclass(frozen=True)
class WorldSpec:
    seed: int = 0
    rows: int = 100
    cols: int = 100
    tile_h: int = 18
    tile_w: int = 18
    bands: int = 7
    n_cities: int = 3
    city_peak_range: tuple[float, float] = (2000.0, 20000.0)
    city_radius_range: tuple[float, float] = (6.0, 16.0)
    n_confusers: int = 4
    confuser_size: int = 2
    confuser_class: int = 10
    growth_factor_range: tuple[float, float] = (0.7, 1.4)
    rural_range: tuple[float, float] = (0.0, 0.0)
    county_grid: tuple[int, int] = (4, 4)
    structures_per_class: int = 2
    structure_noise: int = 1
    origin_lon: float = -90.0
    origin_lat: float = 35.0
    cell_size: float = 0.01

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise DataError(f"world must have at least one row and column, got {self.rows}x{self.cols}")
        if min(self.tile_h, self.tile_w, self.bands) < 1:
            raise DataError("tile dimensions must be >= 1")
        if min(self.n_cities, self.n_confusers, self.structure_noise) < 0 or self.confuser_size < 1:
            raise DataError("counts must be nonnegative")
        for name in ("city_peak_range", "city_radius_range", "growth_factor_range", "rural_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise DataError(f"{name} must be an ordered nonnegative range, got {(lo, hi)}")
        if self.city_radius_range[0] <= 0:
            raise DataError("city radius must be positive")
        if min(self.county_grid) < 1:
            raise DataError("county grid needs at least one row and column")

    @property
    def geo(self) -> GeoTransform:
        return GeoTransform(self.origin_lon, self.origin_lat, self.cell_size, self.rows, self.cols)


@dataclass(frozen=True)
class County:
    id: str
    rings: tuple  # tuple of rings, each a tuple of (lon, lat); first == last


@dataclass(eq=False)
class WorldYear:
    year: int
    population: PopulationGrid
    tiles: TileStack
    counties: list[County]
    county_truth: dict[str, float]
    confuser_cells: list[tuple[int, int]] = field(default_factory=list)


def render_tile(population: float, seed: int, spec: WorldSpec, confuser: bool = False) -> np.ndarray:
    """Render one ``tile_h x tile_w x bands`` uint8 tile.

    The number of bright 2-pixel structures grows linearly with the
    population class (capped by the number of 2x2 blocks in the tile); a
    confuser renders as ``spec.confuser_class`` regardless of its (zero)
    population.
    """
    if population < 0:
        raise ValueError("population must be nonnegative")
    rng = np.random.default_rng(seed)
    h, w, b = spec.tile_h, spec.tile_w, spec.bands
    band_offsets = np.arange(b)
    noise = rng.integers(0, BACKGROUND_NOISE + 1, size=(h, w, 1))
    jitter = rng.integers(0, 4, size=(h, w, b))
    tile = BACKGROUND_BASE + BACKGROUND_BAND_STEP * band_offsets + noise + jitter

    k = spec.confuser_class if confuser else bin_population(population)
    if k > 0:
        # each structure owns one 2x2 block, so structures never overlap and
        # the bright-pixel count is exactly twice the structure count
        by, bx = max(1, h // 2), max(1, w // 2)
        n = spec.structures_per_class * k + int(rng.integers(-spec.structure_noise, spec.structure_noise + 1))
        n = min(max(n, 1), by * bx)
        blocks = rng.choice(by * bx, size=n, replace=False)
        vertical = rng.random(n) < 0.5
        offset = rng.integers(0, 2, size=n)
        level = rng.integers(0, STRUCTURE_NOISE + 1, size=n)
        for s in range(n):
            y0, x0 = 2 * (blocks[s] // bx), 2 * (blocks[s] % bx)
            if vertical[s]:
                x0 += offset[s]
                ys, xs = slice(y0, y0 + 2), slice(x0, x0 + 1)
            else:
                y0 += offset[s]
                ys, xs = slice(y0, y0 + 1), slice(x0, x0 + 2)
            tile[ys, xs, :] = STRUCTURE_BASE + STRUCTURE_BAND_STEP * band_offsets + level[s]
    return np.clip(tile, 0, 255).astype(np.uint8)


def structure_pixels(tile: np.ndarray) -> int:
    """Pixels whose band mean exceeds the structure threshold."""
    return int((tile.mean(axis=2) > STRUCTURE_THRESHOLD).sum())


def _cities(spec, rng):
    cities = []
    for _ in range(spec.n_cities):
        ci = rng.uniform(0, spec.rows)
        cj = rng.uniform(0, spec.cols)
        peak = rng.uniform(*spec.city_peak_range)
        radius = rng.uniform(*spec.city_radius_range)
        growth = rng.uniform(*spec.growth_factor_range)
        cities.append((ci, cj, peak, radius, growth))
    return cities


def _population_field(spec, cities, year, rural=0.0):
    ii, jj = np.meshgrid(np.arange(spec.rows) + 0.5, np.arange(spec.cols) + 0.5, indexing="ij")
    field_ = np.zeros((spec.rows, spec.cols)) + rural
    for ci, cj, peak, radius, growth in cities:
        amp = peak * (growth if year == 1 else 1.0)
        field_ += amp * np.exp(-((ii - ci) ** 2 + (jj - cj) ** 2) / (2 * radius**2))
    return np.maximum(np.floor(field_), 0.0)


def _confuser_cells(spec, rng):
    cells = set()
    s = spec.confuser_size
    for _ in range(spec.n_confusers):
        i0 = int(rng.integers(0, max(1, spec.rows - s + 1)))
        j0 = int(rng.integers(0, max(1, spec.cols - s + 1)))
        for di in range(s):
            for dj in range(s):
                if i0 + di < spec.rows and j0 + dj < spec.cols:
                    cells.add((i0 + di, j0 + dj))
    return sorted(cells)


def render_stack(population: np.ndarray, spec: WorldSpec, year: int, confusers) -> TileStack:
    conf = set(confusers)
    px = np.empty((spec.rows, spec.cols, spec.tile_h, spec.tile_w, spec.bands), dtype=np.uint8)
    for i in range(spec.rows):
        for j in range(spec.cols):
            px[i, j] = render_tile(population[i, j], cell_seed(spec.seed, year, i, j), spec, (i, j) in conf)
    return TileStack(spec.geo, px)


def generate_counties(spec: WorldSpec, populations=()) -> tuple[list[County], list[dict[str, float]]]:
    """Rectangular county partition and exact member-cell population sums.

    ``populations`` is a sequence of ``(rows, cols)`` arrays, one per year.
    """
    n_r, n_c = spec.county_grid
    if spec.rows % n_r or spec.cols % n_c:
        raise DataError(f"county grid {n_r}x{n_c} does not tile a {spec.rows}x{spec.cols} world")
    bh, bw = spec.rows // n_r, spec.cols // n_c
    geo = spec.geo
    counties = []
    truths = [dict() for _ in populations]
    for r in range(n_r):
        for c in range(n_c):
            cid = f"R{r:02d}C{c:02d}"
            west = geo.origin_lon + c * bw * geo.cell_size
            east = geo.origin_lon + (c + 1) * bw * geo.cell_size
            north = geo.origin_lat - r * bh * geo.cell_size
            south = geo.origin_lat - (r + 1) * bh * geo.cell_size
            ring = ((west, north), (east, north), (east, south), (west, south), (west, north))
            counties.append(County(cid, (ring,)))
            for t, pop in enumerate(populations):
                block = np.sort(pop[r * bh : (r + 1) * bh, c * bw : (c + 1) * bw], axis=None)
                truths[t][cid] = float(block.sum())
    return counties, truths


def generate_world(spec: WorldSpec) -> tuple[WorldYear, WorldYear]:
    rng = np.random.default_rng(mix_seed(spec.seed, 0xC171E5))
    cities = _cities(spec, rng)
    confusers = _confuser_cells(spec, rng)
    # uniform rural density, unchanged between years
    rural = rng.uniform(*spec.rural_range, size=(spec.rows, spec.cols)) if spec.rural_range[1] > 0 else 0.0
    years = []
    pops = []
    for year in (0, 1):
        pop = _population_field(spec, cities, year, rural)
        for i, j in confusers:
            pop[i, j] = 0.0
        pops.append(pop)
    counties, truths = generate_counties(spec, pops)
    for year in (0, 1):
        tiles = render_stack(pops[year], spec, year, confusers)
        years.append(
            WorldYear(year, PopulationGrid(spec.geo, pops[year]), tiles, counties, truths[year], list(confusers))
        )
    return years[0], years[1]


# -- county files --------------------------------------------------------------


def write_counties_geojson(counties, path, properties=None) -> None:
    """GeoJSON FeatureCollection; ``properties`` maps id -> extra property dict."""
    features = []
    for county in counties:
        props = {"id": county.id}
        if properties and county.id in properties:
            props.update(properties[county.id])
        features.append(
            {
                "type": "Feature",
                "properties": props,
                "geometry": {"type": "Polygon", "coordinates": [[list(pt) for pt in ring] for ring in county.rings]},
            }
        )
    doc = {"type": "FeatureCollection", "features": features}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def read_counties_geojson(path) -> list[County]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON: {exc}") from None
    counties = []
    for n, feat in enumerate(doc.get("features", [])):
        props = feat.get("properties") or {}
        if "id" not in props:
            raise DataError(f"{path}: feature {n} has no 'id' property")
        geom = feat.get("geometry") or {}
        gtype = geom.get("type")
        if gtype == "Polygon":
            polys = [geom["coordinates"]]
        elif gtype == "MultiPolygon":
            polys = geom["coordinates"]
        else:
            raise DataError(f"{path}: feature {props['id']} has unsupported geometry {gtype!r}")
        rings = tuple(tuple((float(x), float(y)) for x, y, *_ in ring) for poly in polys for ring in poly)
        counties.append(County(str(props["id"]), rings))
    return counties


def write_truth_csv(truth_by_year, path) -> None:
    """CSV of ``id, pop_t0, pop_t1``."""
    t0, t1 = truth_by_year
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "pop_t0", "pop_t1"])
        for cid in t0:
            w.writerow([cid, repr(t0[cid]), repr(t1[cid])])
