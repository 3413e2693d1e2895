"""Probability maps, most-confident correct tiles, and signed class-error maps."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError
from .estimator import ProbGrid
from .raster import ClassGrid, Grid, TileStack


def probability_map(prob_grid: ProbGrid, c: int) -> Grid:
    if not 0 <= c < prob_grid.n_classes:
        raise DataError(f"class {c} out of range [0, {prob_grid.n_classes})")
    values = np.where(prob_grid.mask, 0.0, prob_grid.probs[..., c])
    return Grid(prob_grid.geo, values, prob_grid.mask.copy())


@dataclass
class TopKEntry:
    i: int
    j: int
    confidence: float
    tile: np.ndarray


@dataclass
class TopKResult:
    cls: int
    entries: list[TopKEntry]
    k: int

    @property
    def short(self) -> bool:
        """Fewer than ``k`` correctly classified candidates existed."""
        return len(self.entries) < self.k


def top_k_tiles(prob_grid: ProbGrid, truth: ClassGrid, tiles: TileStack, c: int, k: int = 8) -> TopKResult:
    """The ``k`` most confident cells predicted as ``c`` whose true class is ``c``."""
    if prob_grid.geo != truth.geo or prob_grid.geo != tiles.geo:
        raise DataError("probability, truth and tile grids are not aligned")
    pred = prob_grid.argmax().values
    ok = (pred == c) & (truth.values == c) & ~prob_grid.mask & ~truth.mask
    ii, jj = np.nonzero(ok)
    conf = prob_grid.probs[ii, jj, c]
    # descending confidence, then (i, j)
    order = np.lexsort((jj, ii, -conf))[:k]
    entries = [TopKEntry(int(ii[q]), int(jj[q]), float(conf[q]), tiles.pixels[ii[q], jj[q]]) for q in order]
    return TopKResult(c, entries, k)


@dataclass
class ErrorComponent:
    sign: int
    cells: int
    total_abs_error: int
    bbox: tuple[int, int, int, int]  # row0, row1, col0, col1 (half-open)


@dataclass
class ErrorSummary:
    over: int
    under: int
    exact: int
    components: list[ErrorComponent] = field(default_factory=list)


@dataclass(eq=False)
class ErrorGrid(Grid):
    """Predicted class minus true class; positive means over-prediction."""


_FOUR = ndimage.generate_binary_structure(2, 1)


def error_map(truth: ClassGrid, predicted: ClassGrid, top_n: int = 10) -> tuple[ErrorGrid, ErrorSummary]:
    if truth.geo != predicted.geo:
        raise DataError("truth and predicted grids are not aligned")
    mask = truth.mask | predicted.mask
    err = np.where(mask, 0, predicted.values - truth.values).astype(np.int64)
    grid = ErrorGrid(truth.geo, err, mask)
    valid = ~mask
    comps = []
    for sign in (1, -1):
        labels, n = ndimage.label((np.sign(err) == sign) & valid, structure=_FOUR)
        if n == 0:
            continue
        sums = ndimage.sum_labels(np.abs(err), labels, index=np.arange(1, n + 1))
        sizes = ndimage.sum_labels(np.ones_like(err), labels, index=np.arange(1, n + 1))
        for q, sl in enumerate(ndimage.find_objects(labels)):
            comps.append(ErrorComponent(sign, int(sizes[q]), int(sums[q]), (sl[0].start, sl[0].stop, sl[1].start, sl[1].stop)))
    comps.sort(key=lambda c: (-c.total_abs_error, c.bbox, -c.sign))
    summary = ErrorSummary(int((err[valid] > 0).sum()), int((err[valid] < 0).sum()), int((err[valid] == 0).sum()), comps[:top_n])
    return grid, summary


# -- renders -----------------------------------------------------------------------


def write_pgm(values: np.ndarray, path, mask=None) -> None:
    """Plain (P2) greyscale image of values in [0, 1]; masked cells are black."""
    img = np.clip(np.rint(np.asarray(values, dtype=np.float64) * 255), 0, 255).astype(np.int64)
    if mask is not None:
        img[mask] = 0
    h, w = img.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(map(str, row)) for row in img]
    Path(path).write_text("\n".join(lines) + "\n")


def write_error_ppm(err: ErrorGrid, path) -> None:
    """Plain (P3) diverging render: red for over-prediction, blue for under, white for exact."""
    v = err.values.astype(np.float64)
    scale = max(1.0, float(np.abs(v[~err.mask]).max()) if (~err.mask).any() else 1.0)
    s = np.rint(np.abs(v) / scale * 255).astype(np.int64)
    r = np.where(v < 0, 255 - s, 255)
    g = 255 - s
    b = np.where(v > 0, 255 - s, 255)
    rgb = np.stack([r, g, b], axis=-1)
    rgb[err.mask] = 0
    h, w = v.shape
    lines = ["P3", f"{w} {h}", "255"] + [" ".join(map(str, row.reshape(-1))) for row in rgb]
    Path(path).write_text("\n".join(lines) + "\n")


def write_tile_pgm(tile: np.ndarray, path) -> None:
    """Band-mean greyscale render of one uint8 tile."""
    write_pgm(tile.mean(axis=2) / 255.0, path)


def write_topk_csv(results: list[TopKResult], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class", "rank", "i", "j", "confidence", "short"])
        for res in results:
            for rank, e in enumerate(res.entries):
                w.writerow([res.cls, rank, e.i, e.j, repr(e.confidence), int(res.short)])
            if not res.entries:
                w.writerow([res.cls, "", "", "", "", 1])


def write_components_csv(summary: ErrorSummary, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["rank", "sign", "cells", "total_abs_error", "row0", "row1", "col0", "col1"])
        for rank, c in enumerate(summary.components):
            w.writerow([rank, c.sign, c.cells, c.total_abs_error, *c.bbox])
