"""``popcnn`` command line: one subcommand per pipeline stage, files in between.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, gbrt
from .config import PipelineConfig, load_config
from .errors import DataError, FormatError, NumericError, PopCnnError
from .estimator import (
    aggregate_convraw,
    aligned_metrics,
    assign_counties,
    convaug,
    county_features,
    format_metrics_table,
    predict_chunked,
    read_estimates_csv,
    read_prob_grid,
    write_county_table,
    write_estimates_csv,
    write_metrics_table,
    write_prob_grid,
)
from .interpret import (
    error_map,
    probability_map,
    top_k_tiles,
    write_components_csv,
    write_error_ppm,
    write_pgm,
    write_tile_pgm,
    write_topk_csv,
)
from .nn import build_preset, load_checkpoint, save_checkpoint, train
from .raster import ClassGrid, bin_grid, read_grid, read_tiles, write_grid, write_tiles
from .sampler import (
    SampleSet,
    chunk_label,
    draw_chunk_samples,
    partition_chunks,
    read_samples_csv,
    write_samples_csv,
)
from .synthworld import generate_world, read_counties_geojson, write_counties_geojson, write_truth_csv

log = logging.getLogger("popcnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    paths = sorted(p for p in path.rglob("*") if p.is_file()) if path.is_dir() else [path]
    for p in paths:
        h.update(p.read_bytes())
    return h.hexdigest()


class Run:
    """Collects inputs/outputs of one command and writes its manifest."""

    def __init__(self, command: str, args, cfg: PipelineConfig):
        self.command = command
        self.cfg = cfg
        self.out_dir = Path(args.out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []
        # one manifest per invocation: commands run twice into one directory
        # (bin for each year, say) are told apart by their --output name
        stem = Path(args.output).stem if getattr(args, "output", None) else None
        self.manifest_name = f"manifest.{command}{'.' + stem if stem else ''}.json"

    def input(self, path) -> Path:
        p = Path(path)
        if not p.exists():
            raise FileNotFoundError(f"input not found: {p}")
        self.inputs[str(p)] = _sha256(p)
        return p

    def output(self, name: str) -> Path:
        p = self.out_dir / name
        p.parent.mkdir(parents=True, exist_ok=True)
        self.outputs.append(name)
        return p

    def finish(self):
        manifest = {
            "command": self.command,
            "tool_version": __version__,
            "seed": self.cfg.seed,
            "config": self.cfg.as_dict(),
            "inputs": self.inputs,
            "outputs": sorted(set(self.outputs)),
        }
        (self.out_dir / self.manifest_name).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


# -- commands ------------------------------------------------------------------------


def cmd_synth(args, cfg, run):
    world = generate_world(cfg.world_spec())
    w0, w1 = world
    for w in world:
        write_grid(w.population, run.output(f"pop_t{w.year}.asc"))
        write_tiles(w.tiles, run.output(f"tiles_t{w.year}.pgts"))
    props = {c.id: {"pop_t0": w0.county_truth[c.id], "pop_t1": w1.county_truth[c.id]} for c in w0.counties}
    write_counties_geojson(w0.counties, run.output("counties.geojson"), props)
    write_truth_csv((w0.county_truth, w1.county_truth), run.output("counties.csv"))
    with open(run.output("confusers.csv"), "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["i", "j"])
        wr.writerows(w0.confuser_cells)
    print(f"synthetic world {cfg.rows}x{cfg.cols} written to {run.out_dir}")


def cmd_bin(args, cfg, run):
    grid = read_grid(run.input(args.input), kind="population")
    classes = bin_grid(grid, cfg.k_max)
    write_grid(classes, run.output(args.output))
    print(f"binned {args.input}: max class {classes.max_class()}")


def cmd_sample(args, cfg, run):
    classes = read_grid(run.input(args.classes), kind="class", k_max=cfg.k_max)
    part = partition_chunks(classes, cfg.chunk_size)
    sets = draw_chunk_samples(classes, part, cfg.train_frac, cfg.val_frac, cfg.seed)
    write_samples_csv(sets, classes, run.output(args.output))
    n_train = sum(len(s.train) for s in sets)
    n_val = sum(len(s.validation) for s in sets)
    print(f"{len(part.chunks)} chunks ({len(part.skipped)} skipped): {n_train} train, {n_val} validation")


def cmd_train(args, cfg, run):
    tiles = read_tiles(run.input(args.tiles))
    classes = read_grid(run.input(args.classes), kind="class", k_max=cfg.k_max)
    samples = read_samples_csv(run.input(args.samples), cfg.seed)
    spec = build_preset(cfg.preset, tiles.tile_shape[2], classes.n_classes, cfg.dropout, cfg.batchnorm)
    part = partition_chunks(classes, cfg.chunk_size)
    trained = 0
    for k, region in enumerate(part.chunks):
        sub = SampleSet(
            [c for c in samples.train if region.contains(*c)],
            [c for c in samples.validation if region.contains(*c)],
            samples.seed,
        )
        if not sub.train:
            continue
        tc = cfg.train_config()
        ckpt = train(tiles, classes, sub, spec, type(tc)(tc.batch_size, tc.epochs, tc.adam, tc.seed + k))
        save_checkpoint(ckpt, run.output(f"models/{chunk_label(region, cfg.chunk_size)}.pgnn"))
        last = ckpt.history[ckpt.best_epoch]
        print(f"{chunk_label(region, cfg.chunk_size)}: best epoch {ckpt.best_epoch} val_loss {last.val_loss} top1 {last.val_top1}")
        trained += 1
    if trained == 0:
        raise DataError("no chunk has training samples")


def _load_models(path: Path, part, chunk_size):
    if path.is_file():
        ckpt = load_checkpoint(path)
        return {region: ckpt for region in part.chunks}
    models = {}
    for region in part.chunks:
        p = path / f"{chunk_label(region, chunk_size)}.pgnn"
        if not p.exists():
            raise DataError(f"no checkpoint for {chunk_label(region, chunk_size)} in {path}")
        models[region] = load_checkpoint(p)
    return models


def cmd_predict(args, cfg, run):
    tiles = read_tiles(run.input(args.tiles))
    ckpt_path = run.input(args.checkpoint)
    part = partition_chunks(tiles, cfg.chunk_size)
    models = _load_models(ckpt_path, part, cfg.chunk_size)
    pg, cg = predict_chunked(models, part, tiles)
    write_prob_grid(pg, run.output("probs"))
    for c in range(pg.n_classes):
        run.outputs.append(f"probs/prob_{c:02d}.asc")
    write_grid(cg, run.output(args.output))
    print(f"predicted {int((~pg.mask).sum())} cells, max class {cg.max_class()}")


def cmd_aggregate(args, cfg, run):
    classes = read_grid(run.input(args.classes), kind="class")
    counties = read_counties_geojson(run.input(args.counties))
    est = aggregate_convraw(classes, assign_counties(classes.geo, counties))
    write_estimates_csv(est, run.output(args.output))
    print(f"CONVRAW estimates for {len(est)} counties; total {sum(est.values()):.1f}")


def _write_features(ids, feats, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"f{k}" for k in range(feats.shape[1])])
        for cid, row in zip(ids, feats):
            w.writerow([cid, *(repr(float(v)) for v in row)])


def cmd_convaug(args, cfg, run):
    counties = read_counties_geojson(run.input(args.counties))
    p_train = read_prob_grid(run.input(args.probs_train))
    p_test = read_prob_grid(run.input(args.probs_test))
    truths = read_estimates_csv(run.input(args.truth), args.truth_column)
    a_train = assign_counties(p_train.geo, counties)
    a_test = assign_counties(p_test.geo, counties)
    ids0, f0 = county_features(p_train, a_train, cfg.include_cell_count)
    ids1, f1 = county_features(p_test, a_test, cfg.include_cell_count)
    res = convaug(ids0, f0, {c: truths[c] for c in ids0 if c in truths}, ids1, f1,
                  cfg.gbrt_rounds, cfg.gbrt_depth, cfg.gbrt_shrinkage, cfg.gbrt_log_target)
    _write_features(ids0, f0, run.output("features_train.csv"))
    _write_features(ids1, f1, run.output("features_test.csv"))
    gbrt.save_model(res.model, run.output("gbrt.json"))
    write_estimates_csv(res.estimates, run.output(args.output))
    print(f"CONVAUG estimates for {len(res.estimates)} counties")


def _named_paths(items, flag):
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep or not name or not path:
            raise UsageError(f"{flag} expects NAME=PATH, got {item!r}")
        out[name] = path
    return out


def cmd_evaluate(args, cfg, run):
    truths = read_estimates_csv(run.input(args.truth), args.truth_column)
    sources = {**_named_paths(args.estimate, "--estimate"), **_named_paths(args.reference, "--reference")}
    if not sources:
        raise UsageError("evaluate needs at least one --estimate NAME=PATH")
    columns = {name: read_estimates_csv(run.input(path)) for name, path in sources.items()}
    rows = {name: aligned_metrics(col, truths) for name, col in columns.items()}
    write_metrics_table(rows, run.output(args.output))
    write_county_table(truths, columns, run.output("county_table.csv"))
    text = format_metrics_table(rows)
    run.output("summary.txt").write_text(text + "\n")
    print(text)


def cmd_interpret(args, cfg, run):
    pg = read_prob_grid(run.input(args.probs))
    truth = read_grid(run.input(args.truth_classes), kind="class", k_max=max(cfg.k_max, pg.n_classes - 1))
    tiles = read_tiles(run.input(args.tiles))
    pred = read_grid(run.input(args.classes), kind="class", k_max=truth.k_max) if args.classes else pg.argmax(truth.k_max)
    for c in range(pg.n_classes):
        m = probability_map(pg, c)
        write_grid(m, run.output(f"maps/prob_map_{c:02d}.asc"))
        write_pgm(m.values, run.output(f"maps/prob_map_{c:02d}.pgm"), m.mask)
    results = [top_k_tiles(pg, truth, tiles, c, args.k) for c in range(pg.n_classes)]
    write_topk_csv(results, run.output("topk.csv"))
    for res in results:
        for rank, e in enumerate(res.entries):
            write_tile_pgm(e.tile, run.output(f"topk/class_{res.cls:02d}_{rank}.pgm"))
    err, summary = error_map(truth, pred)
    write_grid(err, run.output("error.asc"))
    write_error_ppm(err, run.output("error.ppm"))
    write_components_csv(summary, run.output("error_components.csv"))
    print(f"error map: {summary.over} over, {summary.under} under, {summary.exact} exact")


def _info(path: Path) -> dict:
    head = path.read_bytes()[:4]
    if head == b"PGTS":
        s = read_tiles(path)
        return {"type": "tile stack", "rows": s.geo.rows, "cols": s.geo.cols, "tile_shape": list(s.tile_shape),
                "nodata_cells": int(s.mask.sum())}
    if head == b"PGNN":
        c = load_checkpoint(path)
        best = c.history[c.best_epoch] if c.history else None
        return {"type": "checkpoint", "preset": c.spec.preset, "input_shape": list(c.spec.input_shape),
                "n_classes": c.n_classes, "best_epoch": c.best_epoch, "epochs": len(c.history),
                "best_val_loss": best.val_loss if best else None}
    suffix = path.suffix.lower()
    if suffix == ".asc":
        g = read_grid(path, kind="float")
        valid = g.values[~g.mask]
        info = {"type": "ascii grid", "rows": g.geo.rows, "cols": g.geo.cols, "origin_lon": g.geo.origin_lon,
                "origin_lat": g.geo.origin_lat, "cell_size": g.geo.cell_size, "nodata_cells": int(g.mask.sum()),
                "min": float(valid.min()) if valid.size else None, "max": float(valid.max()) if valid.size else None,
                "sum": float(valid.sum())}
        if valid.size and np.all(valid == np.round(valid)) and valid.min() >= 0:
            info["K_max"] = int(valid.max())
        return info
    if suffix in (".geojson", ".json"):
        doc = json.loads(path.read_text())
        if doc.get("type") == "FeatureCollection":
            return {"type": "counties", "features": len(doc.get("features", []))}
        if "trees" in doc:
            m = gbrt.GBRTModel.from_dict(doc)
            return {"type": "gbrt model", "rounds": m.n_rounds, "max_depth": m.max_depth,
                    "n_features": m.n_features, "base_score": m.base_score}
        return {"type": "json", "keys": sorted(doc)}
    if suffix == ".csv":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        return {"type": "csv", "columns": rows[0] if rows else [], "rows": max(0, len(rows) - 1)}
    raise DataError(f"{path}: unrecognised artifact type")


def cmd_info(args, cfg, run):
    info = _info(run.input(args.path))
    for k, v in info.items():
        print(f"{k}: {v}")


# -- parser --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="run seed (overrides config)")
    common.add_argument("--config", help="key=value config file")
    common.add_argument("--preset", help="network preset: vgg-a-paper, micro, tiny")
    common.add_argument("--out-dir", default=".", help="output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", default=[], help="override a config key")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="popcnn", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    def add(name, func, help_):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.set_defaults(func=func)
        return p

    add("synth", cmd_synth, "generate a synthetic two-year world")
    p = add("bin", cmd_bin, "bin a population raster into classes")
    p.add_argument("--input", required=True)
    p.add_argument("--output", default="classes.asc")
    p = add("sample", cmd_sample, "draw class-balanced train/validation cells")
    p.add_argument("--classes", required=True)
    p.add_argument("--output", default="samples.csv")
    p = add("train", cmd_train, "train one model per chunk")
    p.add_argument("--tiles", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--samples", required=True)
    p = add("predict", cmd_predict, "per-cell class probabilities and argmax classes")
    p.add_argument("--checkpoint", required=True, help="a .pgnn file or a directory of chunk models")
    p.add_argument("--tiles", required=True)
    p.add_argument("--output", default="classes_pred.asc")
    p = add("aggregate", cmd_aggregate, "CONVRAW county estimates")
    p.add_argument("--classes", required=True)
    p.add_argument("--counties", required=True)
    p.add_argument("--output", default="convraw.csv")
    p = add("convaug", cmd_convaug, "CONVAUG county estimates via boosted trees")
    p.add_argument("--counties", required=True)
    p.add_argument("--probs-train", required=True)
    p.add_argument("--probs-test", required=True)
    p.add_argument("--truth", required=True, help="CSV with id and training-year truth")
    p.add_argument("--truth-column", default=None)
    p.add_argument("--output", default="convaug.csv")
    p = add("evaluate", cmd_evaluate, "metrics table against truth")
    p.add_argument("--truth", required=True)
    p.add_argument("--truth-column", default=None)
    p.add_argument("--estimate", action="append", metavar="NAME=PATH")
    p.add_argument("--reference", action="append", metavar="NAME=PATH", help="ingested reference estimates")
    p.add_argument("--output", default="metrics.csv")
    p = add("interpret", cmd_interpret, "probability maps, top-k tiles, error map")
    p.add_argument("--probs", required=True)
    p.add_argument("--truth-classes", required=True)
    p.add_argument("--tiles", required=True)
    p.add_argument("--classes", help="predicted classes (default: argmax of --probs)")
    p.add_argument("--k", type=int, default=8)
    p = add("info", cmd_info, "describe an artifact file")
    p.add_argument("path")
    return parser


def _config_from_args(args) -> PipelineConfig:
    overrides = {}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = val
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.preset is not None:
        overrides["preset"] = args.preset
    return load_config(args.config, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not getattr(args, "command", None):
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
        cfg = _config_from_args(args)
        run = Run(args.command, args, cfg)
        args.func(args, cfg, run)
        if args.command != "info":
            run.finish()
        return EXIT_OK
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FormatError, PopCnnError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
