"""Chunk partitioning and class-balanced train/validation sampling.

A candidate cell of class ``x`` is accepted with probability
``1 - c_x / sum(c)`` (floored at ``ACCEPT_FLOOR``), where ``c`` is the class
histogram of the region.  Candidates are visited in a seeded shuffled order;
rejected candidates are revisited in later passes, in the same order, until
the quota is met.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .raster import ClassGrid, Grid
from .seeding import mix_seed

ACCEPT_FLOOR = 1e-6


@dataclass(frozen=True)
class Region:
    """Half-open row/column rectangle ``[row0, row1) x [col0, col1)``."""

    row0: int
    row1: int
    col0: int
    col1: int

    @classmethod
    def whole(cls, grid) -> Region:
        return cls(0, grid.geo.rows, 0, grid.geo.cols)

    @property
    def shape(self):
        return (self.row1 - self.row0, self.col1 - self.col0)

    def contains(self, i, j) -> bool:
        return self.row0 <= i < self.row1 and self.col0 <= j < self.col1

    def slices(self):
        return slice(self.row0, self.row1), slice(self.col0, self.col1)


@dataclass
class ChunkPartition:
    chunk_size: int
    chunks: list[Region]
    skipped: list[Region]

    def chunk_of(self, i: int, j: int) -> Region | None:
        for region in self.chunks:
            if region.contains(i, j):
                return region
        return None


def partition_chunks(grid: Grid, chunk_size: int) -> ChunkPartition:
    if chunk_size < 1:
        raise ValueError("chunk_size must be >= 1")
    rows, cols = grid.geo.shape
    chunks, skipped = [], []
    for r0 in range(0, rows, chunk_size):
        for c0 in range(0, cols, chunk_size):
            region = Region(r0, min(r0 + chunk_size, rows), c0, min(c0 + chunk_size, cols))
            if grid.mask[region.slices()].all():
                skipped.append(region)
            else:
                chunks.append(region)
    return ChunkPartition(chunk_size, chunks, skipped)


def chunk_label(region: Region, chunk_size: int) -> str:
    return f"chunk_{region.row0 // chunk_size}_{region.col0 // chunk_size}"


@dataclass
class ClassHistogram:
    counts: np.ndarray

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def acceptance_probs(self, floor: float = ACCEPT_FLOOR) -> np.ndarray:
        """Per-class acceptance probability ``max(1 - c_x / total, floor)``."""
        if self.total == 0:
            raise DataError("empty class histogram")
        return np.maximum(1.0 - self.counts / self.total, floor)


def class_histogram(class_grid: ClassGrid, region: Region | None = None) -> ClassHistogram:
    region = region or Region.whole(class_grid)
    rs, cs = region.slices()
    vals = class_grid.values[rs, cs][~class_grid.mask[rs, cs]]
    return ClassHistogram(np.bincount(vals, minlength=class_grid.n_classes).astype(np.int64))


@dataclass
class SampleSet:
    train: list[tuple[int, int]]
    validation: list[tuple[int, int]]
    seed: int
    region: Region | None = field(default=None)

    def split_of(self):
        return {"train": self.train, "validation": self.validation}


def acceptance_passes(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Pass number (1-based) at which each candidate is first accepted.

    Each pass is an independent Bernoulli(w) trial, so the first success is
    geometric; drawing it directly replaces the explicit retry loop.
    """
    return rng.geometric(weights)


def _draw(cells, classes, weights, quota, rng):
    order = rng.permutation(len(cells))
    passes = acceptance_passes(weights[classes[order]], rng)
    # accepted in (pass, shuffled position) order
    rank = np.lexsort((np.arange(len(order)), passes))
    chosen = order[rank[:quota]]
    rest = np.setdiff1d(np.arange(len(cells)), chosen, assume_unique=True)
    return chosen, rest


def draw_samples(
    class_grid: ClassGrid,
    region: Region | None = None,
    train_frac: float = 0.1,
    val_frac: float = 0.01,
    seed: int = 0,
) -> SampleSet:
    if not (train_frac > 0 and val_frac > 0 and train_frac + val_frac <= 1):
        raise ValueError(f"need 0 < train_frac, val_frac and train_frac + val_frac <= 1, got {train_frac}, {val_frac}")
    region = region or Region.whole(class_grid)
    rs, cs = region.slices()
    sub_mask = class_grid.mask[rs, cs]
    ii, jj = np.nonzero(~sub_mask)
    ii = ii + region.row0
    jj = jj + region.col0
    n = len(ii)
    if n == 0:
        raise DataError("region has no eligible (non-nodata) cells")
    n_train = math.ceil(train_frac * n)
    n_val = math.ceil(val_frac * n)
    if n_train + n_val > n:
        raise DataError(f"requested {n_train} train + {n_val} validation cells but only {n} eligible "
                        f"(short by {n_train + n_val - n})")
    classes = class_grid.values[ii, jj]
    weights = class_histogram(class_grid, region).acceptance_probs()
    rng = np.random.default_rng(seed)

    cells = np.stack([ii, jj], axis=1)
    train_idx, rest = _draw(cells, classes, weights, n_train, rng)
    val_local, _ = _draw(cells[rest], classes[rest], weights, n_val, rng)
    val_idx = rest[val_local]
    as_list = lambda idx: [(int(a), int(b)) for a, b in cells[idx]]
    return SampleSet(as_list(train_idx), as_list(val_idx), seed, region)


def draw_chunk_samples(class_grid, partition: ChunkPartition, train_frac, val_frac, seed):
    """Independent sample sets per chunk, seeded by mixing ``seed`` with the chunk index."""
    return [
        draw_samples(class_grid, region, train_frac, val_frac, mix_seed(seed, k))
        for k, region in enumerate(partition.chunks)
    ]


def write_samples_csv(samples: SampleSet | list[SampleSet], class_grid: ClassGrid, path) -> None:
    sets = samples if isinstance(samples, list) else [samples]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["split", "i", "j", "class"])
        for s in sets:
            for split, cells in s.split_of().items():
                for i, j in cells:
                    w.writerow([split, i, j, int(class_grid.values[i, j])])


def read_samples_csv(path, seed: int = 0) -> SampleSet:
    train, val = [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"split", "i", "j"} <= set(reader.fieldnames):
            raise DataError(f"{path}: expected columns split,i,j,class")
        for lineno, row in enumerate(reader, start=2):
            try:
                cell = (int(row["i"]), int(row["j"]))
            except ValueError:
                raise DataError(f"{path}:{lineno}: bad cell index") from None
            if row["split"] == "train":
                train.append(cell)
            elif row["split"] == "validation":
                val.append(cell)
            else:
                raise DataError(f"{path}:{lineno}: unknown split {row['split']!r}")
    return SampleSet(train, val, seed)
