"""End-to-end synthetic experiment: train on year 0, estimate year-1 counties."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .estimator import (
    aggregate_convraw,
    aligned_metrics,
    assign_counties,
    baseline_uniform,
    convaug,
    county_features,
    predict_grid,
    prior_classifier,
    surface_to_counties,
)
from .interpret import error_map
from .nn import TrainConfig, build_preset, evaluate, train
from .raster import PAPER_K_MAX, bin_grid
from .sampler import class_histogram, draw_samples
from .synthworld import WorldSpec, generate_world


# The desk-scale world the end-to-end check runs on: 3 cities with strongly
# differential growth over a thin rural background, 10x10 counties.
EXPERIMENT_WORLD = WorldSpec(
    seed=0,
    rows=100,
    cols=100,
    n_cities=3,
    n_confusers=4,
    structures_per_class=3,
    rural_range=(2.0, 10.0),
    growth_factor_range=(0.3, 3.0),
    county_grid=(10, 10),
)


@dataclass(frozen=True)
class ExperimentConfig:
    world: WorldSpec = EXPERIMENT_WORLD
    preset: str = "tiny"
    epochs: int = 15
    batch_size: int = 32
    train_frac: float = 0.3
    val_frac: float = 0.05
    seed: int = 0
    gbrt_rounds: int = 100
    gbrt_depth: int = 3
    gbrt_shrinkage: float = 0.1
    gbrt_log_target: bool = False


@dataclass
class ExperimentResult:
    cnn_top1: float
    cnn_top3: float
    prior_top1: float
    mape_convraw: float
    mape_convaug: float
    mape_naive: float
    confuser_positive_fraction: float
    metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    seconds: float = 0.0


def run_synthetic_experiment(cfg: ExperimentConfig = ExperimentConfig(), log=None) -> ExperimentResult:
    start = time.perf_counter()
    say = log or (lambda *_: None)
    w0, w1 = generate_world(cfg.world)
    c0 = bin_grid(w0.population, PAPER_K_MAX)
    c1 = bin_grid(w1.population, PAPER_K_MAX)
    say(f"world generated: total pop {w0.population.values.sum():.0f} -> {w1.population.values.sum():.0f}")

    samples = draw_samples(c0, None, cfg.train_frac, cfg.val_frac, cfg.seed)
    spec = build_preset(cfg.preset, cfg.world.bands, c0.n_classes)
    ckpt = train(w0.tiles, c0, samples, spec, TrainConfig(cfg.batch_size, cfg.epochs, seed=cfg.seed))
    say(f"trained: best epoch {ckpt.best_epoch}")

    val = np.asarray(samples.validation)
    val_labels = c0.values[val[:, 0], val[:, 1]]
    top1, top3, _ = evaluate(ckpt, w0.tiles.gather(val), val_labels)
    tr = np.asarray(samples.train)
    train_hist = np.bincount(c0.values[tr[:, 0], tr[:, 1]], minlength=c0.n_classes)
    modal = int(np.argmax(prior_classifier(train_hist)))
    prior_top1 = float(np.mean(val_labels == modal))

    pg0, _ = predict_grid(ckpt, w0.tiles)
    pg1, cg1 = predict_grid(ckpt, w1.tiles)
    assignment = assign_counties(w0.population.geo, w0.counties)
    truth0, truth1 = w0.county_truth, w1.county_truth

    convraw = aggregate_convraw(cg1, assignment)
    naive = surface_to_counties(baseline_uniform(truth0, assignment).values, assignment)
    ids0, f0 = county_features(pg0, assignment)
    ids1, f1 = county_features(pg1, assignment)
    aug = convaug(ids0, f0, truth0, ids1, f1, cfg.gbrt_rounds, cfg.gbrt_depth, cfg.gbrt_shrinkage, cfg.gbrt_log_target).estimates

    m = {
        "CONVRAW": aligned_metrics(convraw, truth1),
        "CONVAUG": aligned_metrics(aug, truth1),
        "NAIVE_T0": aligned_metrics(naive, truth1),
    }
    err, _ = error_map(c1, cg1)
    conf = w1.confuser_cells
    pos = np.mean([err.values[i, j] > 0 for i, j in conf]) if conf else float("nan")
    return ExperimentResult(
        top1, top3, prior_top1,
        m["CONVRAW"].mape, m["CONVAUG"].mape, m["NAIVE_T0"].mape,
        float(pos), m, ckpt.history, time.perf_counter() - start,
    )
