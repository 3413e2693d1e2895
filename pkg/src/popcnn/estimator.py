"""Grid inference, county assignment and aggregation, CONVRAW/CONVAUG, metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gbrt
from .errors import DataError
from .nn.train import Checkpoint, predict_proba
from .raster import ClassGrid, GeoTransform, Grid, TileStack, midpoint_array, read_grid, write_grid

PROB_SUM_TOL = 1e-6


@dataclass(eq=False)
class ProbGrid:
    """Per-cell class probability vectors, shape ``(rows, cols, n_classes)``."""

    geo: GeoTransform
    probs: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.probs.shape[:2] != self.geo.shape or self.mask.shape != self.geo.shape:
            raise DataError("probability grid does not match its geotransform")
        sums = self.probs[~self.mask].sum(axis=-1)
        if sums.size and np.max(np.abs(sums - 1)) > PROB_SUM_TOL:
            raise DataError("probability vectors must sum to 1")

    @property
    def n_classes(self) -> int:
        return self.probs.shape[-1]

    def argmax(self, k_max: int | None = None) -> ClassGrid:
        cls = np.argmax(self.probs, axis=-1)  # first maximum: ties go to the lower class
        cls[self.mask] = 0
        return ClassGrid(self.geo, cls, self.mask.copy(), k_max=self.n_classes - 1 if k_max is None else k_max)


def predict_grid(checkpoint: Checkpoint, tiles: TileStack, batch_size: int = 1024) -> tuple[ProbGrid, ClassGrid]:
    if tuple(tiles.tile_shape) != checkpoint.spec.input_shape:
        raise DataError(f"tiles {tiles.tile_shape} do not match checkpoint input {checkpoint.spec.input_shape}")
    rows, cols = tiles.geo.shape
    probs = np.zeros((rows, cols, checkpoint.n_classes))
    ii, jj = np.nonzero(~tiles.mask)
    if len(ii):
        probs[ii, jj] = predict_proba(checkpoint, tiles.pixels[ii, jj], batch_size)
    pg = ProbGrid(tiles.geo, probs, tiles.mask.copy())
    return pg, pg.argmax()


def predict_chunked(models: dict, partition, tiles: TileStack) -> tuple[ProbGrid, ClassGrid]:
    """Predict each cell with the model of the chunk that contains it.

    ``models`` maps chunk ``Region`` -> ``Checkpoint``.
    """
    n_classes = {m.n_classes for m in models.values()}
    if len(n_classes) != 1:
        raise DataError("chunk models disagree on n_classes")
    probs = np.zeros(tiles.geo.shape + (n_classes.pop(),))
    for region, ckpt in models.items():
        rs, cs = region.slices()
        sub = TileStack(
            GeoTransform(0.0, 0.0, 1.0, *region.shape), tiles.pixels[rs, cs], tiles.mask[rs, cs]
        )
        probs[rs, cs] = predict_grid(ckpt, sub)[0].probs
    pg = ProbGrid(tiles.geo, probs, tiles.mask.copy())
    return pg, pg.argmax()


def write_prob_grid(pg: ProbGrid, directory) -> list[Path]:
    """One ``prob_XX.asc`` raster per class."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for c in range(pg.n_classes):
        path = directory / f"prob_{c:02d}.asc"
        write_grid(Grid(pg.geo, pg.probs[..., c], pg.mask), path)
        paths.append(path)
    return paths


def read_prob_grid(directory) -> ProbGrid:
    paths = sorted(Path(directory).glob("prob_*.asc"))
    if not paths:
        raise DataError(f"{directory}: no prob_*.asc rasters")
    grids = [read_grid(p, kind="float") for p in paths]
    geo, mask = grids[0].geo, grids[0].mask
    if any(g.geo != geo or not np.array_equal(g.mask, mask) for g in grids):
        raise DataError(f"{directory}: probability rasters are not aligned")
    return ProbGrid(geo, np.stack([g.values for g in grids], axis=-1), mask)


# -- county geometry -----------------------------------------------------------


@dataclass
class CountyAssignment:
    ids: list[str]
    index: np.ndarray  # (rows, cols) county position in ``ids``, -1 for none

    def cells(self, county_id: str) -> np.ndarray:
        k = self.ids.index(county_id)
        return np.argwhere(self.index == k)

    def cell_counts(self) -> np.ndarray:
        valid = self.index[self.index >= 0]
        return np.bincount(valid, minlength=len(self.ids))


def _ring_closed(ring):
    return len(ring) >= 4 and tuple(ring[0]) == tuple(ring[-1])


def _points_on_ring(px, py, ring):
    on = np.zeros(px.shape, dtype=bool)
    for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
        cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
        within = (np.minimum(x1, x2) <= px) & (px <= np.maximum(x1, x2)) & (np.minimum(y1, y2) <= py) & (py <= np.maximum(y1, y2))
        on |= (cross == 0) & within
    return on


def _crossings(px, py, ring):
    """Even-odd ray casting toward +x."""
    inside = np.zeros(px.shape, dtype=bool)
    for (x1, y1), (x2, y2) in zip(ring[:-1], ring[1:]):
        if y1 == y2:
            continue
        straddle = (y1 > py) != (y2 > py)
        xint = x1 + (py - y1) * (x2 - x1) / (y2 - y1)
        inside ^= straddle & (px < xint)
    return inside


def points_in_polygon(px, py, rings) -> np.ndarray:
    """Inside-or-on-boundary test for a polygon given as rings (holes by even-odd)."""
    px = np.asarray(px, dtype=np.float64)
    py = np.asarray(py, dtype=np.float64)
    inside = np.zeros(px.shape, dtype=bool)
    on = np.zeros(px.shape, dtype=bool)
    for ring in rings:
        inside ^= _crossings(px, py, ring)
        on |= _points_on_ring(px, py, ring)
    return inside | on


def assign_counties(geo: GeoTransform, counties) -> CountyAssignment:
    """Assign each cell to the first county (input order) containing its centroid."""
    for county in counties:
        for ring in county.rings:
            if not _ring_closed(ring):
                raise DataError(f"county {county.id}: polygon ring is not closed")
    ids = [c.id for c in counties]
    if len(set(ids)) != len(ids):
        raise DataError("duplicate county ids")
    lon, lat = geo.centroids()
    index = np.full(geo.shape, -1, dtype=np.int64)
    for k, county in enumerate(counties):
        xs = [x for ring in county.rings for x, _ in ring]
        ys = [y for ring in county.rings for _, y in ring]
        free = (index < 0) & (lon >= min(xs)) & (lon <= max(xs)) & (lat >= min(ys)) & (lat <= max(ys))
        if not free.any():
            continue
        hit = points_in_polygon(lon[free], lat[free], county.rings)
        sel = np.flatnonzero(free)[hit]
        index.flat[sel] = k
    return CountyAssignment(ids, index)


# -- aggregation ---------------------------------------------------------------


def aggregate_convraw(class_grid: ClassGrid, assignment: CountyAssignment) -> dict[str, float]:
    """County sums of per-cell class midpoints."""
    mids = midpoint_array(np.where(class_grid.mask, 0, class_grid.values))
    valid = (assignment.index >= 0) & ~class_grid.mask
    sums = np.bincount(assignment.index[valid], weights=mids[valid], minlength=len(assignment.ids))
    return dict(zip(assignment.ids, (float(s) for s in sums)))


def county_features(prob_grid: ProbGrid, assignment: CountyAssignment, include_cell_count: bool = False):
    """Summed probability vectors per county, ``(ids, matrix)``."""
    valid = (assignment.index >= 0) & ~prob_grid.mask
    idx = assignment.index[valid]
    vecs = prob_grid.probs[valid]
    n = len(assignment.ids)
    feats = np.zeros((n, prob_grid.n_classes))
    np.add.at(feats, idx, vecs)
    if include_cell_count:
        feats = np.column_stack([feats, np.bincount(idx, minlength=n).astype(np.float64)])
    return list(assignment.ids), feats


@dataclass
class ConvAugResult:
    estimates: dict[str, float]
    model: gbrt.GBRTModel


def convaug(train_ids, train_features, train_truths: dict[str, float], test_ids, test_features,
            n_rounds: int = 100, max_depth: int = 3, shrinkage: float = 0.1, log_target: bool = False) -> ConvAugResult:
    """Fit boosted trees on year-0 county features/truths, predict year-1 counties."""
    train_features = np.asarray(train_features, dtype=np.float64)
    test_features = np.asarray(test_features, dtype=np.float64)
    if set(train_ids) != set(train_truths):
        missing = sorted(set(train_ids) ^ set(train_truths))
        raise DataError(f"county ids differ between features and truths: {missing[:5]}")
    if train_features.shape[1] != test_features.shape[1]:
        raise DataError("train and test feature dimensions differ")
    y = np.array([train_truths[c] for c in train_ids])
    model = gbrt.fit(train_features, y, n_rounds, max_depth, shrinkage, log_target)
    preds = model.predict(test_features)
    return ConvAugResult(dict(zip(test_ids, (float(p) for p in preds))), model)


# -- metrics -------------------------------------------------------------------


@dataclass
class Metrics:
    mean_ae: float
    median_ae: float
    r2: float | None  # None when truths are all equal
    mape: float | None  # None when no truth is positive
    mape_excluded: int
    n: int

    def row(self):
        fmt = lambda v: "undefined" if v is None else repr(float(v))
        return [fmt(self.mean_ae), fmt(self.median_ae), fmt(self.r2), fmt(self.mape)]


def metrics(estimates, truths) -> Metrics:
    e = np.asarray(estimates, dtype=np.float64)
    y = np.asarray(truths, dtype=np.float64)
    if e.shape != y.shape or e.ndim != 1:
        raise DataError("estimates and truths must be aligned 1-D vectors")
    if len(y) == 0:
        raise DataError("metrics need at least one row")
    err = np.abs(e - y)
    mean_ae = float(err.mean())
    median_ae = float(np.median(err))
    ss_tot = float(((y - y.mean()) ** 2).sum())
    ss_res = float(((y - e) ** 2).sum())
    r2 = None if ss_tot == 0 else 1.0 - ss_res / ss_tot
    pos = y > 0
    mape = float(100.0 * np.mean(err[pos] / y[pos])) if pos.any() else None
    return Metrics(mean_ae, median_ae, r2, mape, int((~pos).sum()), len(y))


def aligned_metrics(estimates: dict[str, float], truths: dict[str, float]) -> Metrics:
    missing = set(truths) - set(estimates)
    if missing:
        raise DataError(f"no estimate for counties {sorted(missing)[:5]}")
    ids = list(truths)
    return metrics([estimates[i] for i in ids], [truths[i] for i in ids])


# -- baselines -----------------------------------------------------------------


@dataclass
class UniformSurface:
    values: np.ndarray  # NaN where no county
    undistributable: list[str] = field(default_factory=list)


def baseline_uniform(truths: dict[str, float], assignment: CountyAssignment) -> UniformSurface:
    """Areal interpolation: spread each county total evenly over its cells."""
    counts = assignment.cell_counts()
    surface = np.full(assignment.index.shape, np.nan)
    bad = []
    per_cell = np.zeros(len(assignment.ids))
    for k, cid in enumerate(assignment.ids):
        if counts[k] == 0:
            bad.append(cid)
        else:
            per_cell[k] = truths[cid] / counts[k]
    has = assignment.index >= 0
    surface[has] = per_cell[assignment.index[has]]
    return UniformSurface(surface, bad)


def surface_to_counties(surface: np.ndarray, assignment: CountyAssignment) -> dict[str, float]:
    has = assignment.index >= 0
    sums = np.bincount(assignment.index[has], weights=surface[has], minlength=len(assignment.ids))
    return dict(zip(assignment.ids, (float(s) for s in sums)))


def prior_classifier(hist) -> np.ndarray:
    """Constant probability vector equal to the training class frequencies."""
    counts = np.asarray(getattr(hist, "counts", hist), dtype=np.float64)
    if counts.sum() == 0:
        raise DataError("empty class histogram")
    return counts / counts.sum()


# -- tables ----------------------------------------------------------------------


def write_estimates_csv(estimates: dict[str, float], path, column="estimate") -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", column])
        for cid, v in estimates.items():
            w.writerow([cid, repr(float(v))])


def read_estimates_csv(path, column=None) -> dict[str, float]:
    """Read ``id`` plus one numeric column (``column`` or the second column)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames or "id" not in reader.fieldnames or len(reader.fieldnames) < 2:
            raise DataError(f"{path}: expected an 'id' column and a value column")
        col = column or [f for f in reader.fieldnames if f != "id"][0]
        if col not in reader.fieldnames:
            raise DataError(f"{path}: no column {col!r}")
        out = {}
        for lineno, row in enumerate(reader, start=2):
            try:
                v = float(row[col])
            except (TypeError, ValueError):
                raise DataError(f"{path}:{lineno}: unparsable value {row[col]!r}") from None
            if not math.isfinite(v):
                raise DataError(f"{path}:{lineno}: non-finite value")
            out[row["id"]] = v
    return out


def write_county_table(truths: dict[str, float], columns: dict[str, dict[str, float]], path) -> None:
    """CountyTable CSV: id, truth, then one column per estimate source."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "truth", *columns])
        for cid, t in truths.items():
            w.writerow([cid, repr(float(t)), *(repr(float(col[cid])) if cid in col else "" for col in columns.values())])


def write_metrics_table(rows: dict[str, Metrics], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "mean_ae", "median_ae", "r2", "mape", "mape_excluded", "n"])
        for name, m in rows.items():
            w.writerow([name, *m.row(), m.mape_excluded, m.n])


def format_metrics_table(rows: dict[str, Metrics]) -> str:
    lines = [f"{'method':<12}{'Mean AE':>14}{'Median AE':>14}{'r2':>10}{'MAPE':>10}"]
    for name, m in rows.items():
        r2 = "undef" if m.r2 is None else f"{m.r2:.4f}"
        mape = "undef" if m.mape is None else f"{m.mape:.2f}"
        lines.append(f"{name:<12}{m.mean_ae:>14,.0f}{m.median_ae:>14,.0f}{r2:>10}{mape:>10}")
    return "\n".join(lines)
