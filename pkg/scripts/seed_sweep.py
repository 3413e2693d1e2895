#!/usr/bin/env python3
"""Rerun the end-to-end experiment over several training seeds on the pinned world."""

import sys

from popcnn.experiment import ExperimentConfig, run_synthetic_experiment

seeds = [int(s) for s in sys.argv[1:]] or [0, 1, 2, 3]
print("seed  top1  prior  convraw  naive  convaug  confusers  secs")
for seed in seeds:
    r = run_synthetic_experiment(ExperimentConfig(seed=seed))
    print(f"{seed:4d} {r.cnn_top1:5.3f} {r.prior_top1:6.3f} {r.mape_convraw:8.1f} {r.mape_naive:6.1f} "
          f"{r.mape_convaug:8.1f} {r.confuser_positive_fraction:10.2f} {r.seconds:5.0f}", flush=True)
