"""Command-line interface: synth, train, eval, ablate, report.

Every subcommand prints exactly one JSON document on stdout; diagnostics
and progress go to stderr.  Exit codes: 0 success, 1 usage error,
2 data or configuration error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import fields

from .data import load_dataset, prepare_dataset
from .embeddings import (load_embedding_cache, node2vec_embed,
                         save_embedding_cache)
from .errors import ConfigError, DataError, NumericError, ShapeError, UsageError
from .model import ModelConfig, TrafficModel, load_checkpoint
from .synth import SynthSpec, generate
from .training import (MetricsReport, evaluate, format_report_table,
                       ha_baseline, predict_partition, stratified_report,
                       train, write_history)

log = logging.getLogger("gridcast")

# run-config keys that are not ModelConfig fields
_RESERVED_RUN_KEYS = ("data", "out", "synth")


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that reports problems as exceptions, not SystemExit."""

    def error(self, message):
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="gridcast",
                     description="Region-knowledge-augmented road traffic forecasting.")
    parser.add_argument("-v", "--verbose", action="count", default=0,
                        help="increase stderr log detail (repeatable)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--spec", help="JSON file of generator settings (defaults apply)")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--seed", type=int, help="override the spec seed")
    p.add_argument("--alpha", type=float, help="override the coupling strength")
    p.add_argument("--steps", type=int, help="override the series length")
    p.add_argument("--missing-frac", type=float, dest="missing_frac",
                   help="override the missing-entry fraction")

    p = sub.add_parser("train", help="train a model and write run artifacts")
    p.add_argument("--config", help="JSON run config (model fields, data, out)")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="run output directory")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--variant", help="override the architecture variant")
    p.add_argument("--embed-cache", dest="embed_cache",
                   help="road-embedding cache file (created when absent)")

    p = sub.add_parser("eval", help="score a checkpoint on one partition")
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--split", choices=("val", "test"), default="test")
    p.add_argument("--stratify-poi", action="store_true", dest="stratify_poi",
                   help="also score POI-dense and POI-sparse road strata")
    p.add_argument("--out", help="directory for report.json / report.txt")
    p.add_argument("--embed-cache", dest="embed_cache")
    p.add_argument("--threads", type=int, default=1,
                   help="parallel evaluation workers")

    p = sub.add_parser("ablate", help="train and score architecture variants")
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--data", help="dataset directory")
    p.add_argument("--out", help="parent directory for per-variant runs")
    p.add_argument("--variant", action="append", required=True,
                   help="variant name (repeatable)")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--embed-cache", dest="embed_cache")

    p = sub.add_parser("report", help="summarize a training history")
    p.add_argument("--history", required=True, help="history.csv from a run")
    p.add_argument("--report", help="report.json to render as a text table")
    p.add_argument("--out", help="directory for history.csv / report.txt copies")
    return parser


def _emit(doc):
    json.dump(doc, sys.stdout)
    sys.stdout.write("\n")
    sys.stdout.flush()


def _read_json(path, what="file"):
    if not os.path.exists(path):
        raise DataError(f"{what} not found: {path}")
    with open(path, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as e:
            raise DataError(f"{path}: {e}") from None


def load_run_config(path=None):
    """Parse a run config file: ModelConfig fields plus data/out/synth keys.

    Returns (ModelConfig, data_dir | None, out_dir | None, synth_overrides).
    """
    doc = _read_json(path, "config") if path else {}
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: run config must be a JSON object")
    known = {f.name for f in fields(ModelConfig)} | set(_RESERVED_RUN_KEYS)
    unknown = set(doc) - known
    if unknown:
        raise ConfigError(f"unknown run config key(s): {sorted(unknown)}")
    model_doc = {k: v for k, v in doc.items() if k not in _RESERVED_RUN_KEYS}
    config = ModelConfig.from_dict(model_doc)
    synth_doc = doc.get("synth") or {}
    if synth_doc:
        SynthSpec.from_dict(synth_doc)   # validate keys early
    return config, doc.get("data"), doc.get("out"), synth_doc


def _require(value, flag):
    if not value:
        raise UsageError(f"{flag} is required (flag or config file)")
    return value


def _road_embedding(graph, config, cache_path):
    if cache_path and os.path.exists(cache_path):
        e_x = load_embedding_cache(cache_path)
        if e_x.shape != (graph.n_x, config.d):
            raise DataError(
                f"embedding cache {cache_path} holds shape {e_x.shape}, "
                f"expected {(graph.n_x, config.d)}"
            )
        log.info("loaded road embedding cache %s", cache_path)
        return e_x
    e_x = node2vec_embed(graph, config.d, config.seed)
    if cache_path:
        save_embedding_cache(cache_path, e_x)
        log.info("wrote road embedding cache %s", cache_path)
    return e_x


def _load_prepared(data_dir, p, q):
    dataset, graph, grid = load_dataset(data_dir)
    prepare_dataset(dataset, p, q)
    return dataset, graph, grid


def _write_report_files(out_dir, partition, named_reports, extra=None):
    os.makedirs(out_dir, exist_ok=True)
    doc = {"partition": partition,
           "sections": {name: rep.to_dict() for name, rep in named_reports}}
    if extra:
        doc.update(extra)
    with open(os.path.join(out_dir, "report.json"), "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    with open(os.path.join(out_dir, "report.txt"), "w", encoding="utf-8") as fh:
        fh.write(format_report_table(named_reports))
        fh.write("\n")
    return doc


def _cmd_synth(args):
    doc = _read_json(args.spec, "spec") if args.spec else {}
    spec = SynthSpec.from_dict(doc)
    for name in ("seed", "alpha", "steps", "missing_frac"):
        value = getattr(args, name)
        if value is not None:
            setattr(spec, name, value)
    spec.validate()
    result = generate(spec, args.out)
    log.info("wrote dataset to %s", args.out)
    _emit({"command": "synth", "out": args.out,
           "n_roads": result.graph.n_x, "n_cells": result.grid.n_z,
           "steps": len(result.timestamps), "alpha": spec.alpha,
           "seed": spec.seed})
    return 0


def _run_one_training(config, data_dir, out_dir, cache_path):
    dataset, graph, grid = _load_prepared(data_dir, config.p, config.q)
    e_x = _road_embedding(graph, config, cache_path)
    model = TrafficModel.build(config, graph, grid, dataset, e_x=e_x)
    log.info("training variant %s (%d parameter values)",
             config.variant, model.store.n_values())
    result = train(model, dataset)

    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2)
        fh.write("\n")
    model.save_checkpoint(os.path.join(out_dir, "checkpoint.json"), dataset.norm)
    write_history(os.path.join(out_dir, "history.csv"), result.history)
    test_report = evaluate(model, dataset, "test")
    ha_report = ha_baseline(dataset, config.p, config.q,
                            exclude_imputed=config.exclude_imputed)
    _write_report_files(out_dir, "test",
                        [(config.variant, test_report), ("ha", ha_report)])
    return model, result, test_report, ha_report


def _cmd_train(args):
    config, cfg_data, cfg_out, _ = load_run_config(args.config)
    data_dir = _require(args.data or cfg_data, "--data")
    out_dir = _require(args.out or cfg_out, "--out")
    if args.seed is not None:
        config.seed = args.seed
    if args.variant is not None:
        config.variant = args.variant
    config.validate()
    _, result, test_report, ha_report = _run_one_training(
        config, data_dir, out_dir, args.embed_cache)
    _emit({"command": "train", "out": out_dir, "variant": config.variant,
           "epochs_run": result.epochs_run, "stopped_early": result.stopped_early,
           "best_val_mae": result.best_val_mae,
           "test": test_report.avg, "ha": ha_report.avg})
    return 0


def _cmd_eval(args):
    config, norm, params = load_checkpoint(args.ckpt)
    dataset, graph, grid = _load_prepared(args.data, config.p, config.q)
    if norm is not None:
        if norm.x_mean.shape != dataset.x.shape[1:] or norm.z_mean.shape != dataset.z.shape[1:]:
            raise DataError("checkpoint normalization does not match this dataset")
        dataset.norm = norm
        dataset.x_norm = (dataset.x - norm.x_mean) / norm.x_std
        dataset.z_norm = (dataset.z - norm.z_mean) / norm.z_std
    e_x = _road_embedding(graph, config, args.embed_cache)
    model = TrafficModel.build(config, graph, grid, dataset, e_x=e_x)
    model.load_params(params)

    report = evaluate(model, dataset, args.split, threads=args.threads)
    sections = [(config.variant, report)]
    extra = {}
    if args.split == "test":
        sections.append(("ha", ha_baseline(dataset, config.p, config.q,
                                           exclude_imputed=config.exclude_imputed)))
    if args.stratify_poi:
        preds, targets, excluded = predict_partition(
            model, dataset, args.split, threads=args.threads)
        mask = excluded if config.exclude_imputed else None
        strat = stratified_report(preds, targets, mask, graph, grid)
        sections += [("poi_h", strat["poi_h"]), ("poi_l", strat["poi_l"])]
        extra["poi_h_roads"] = strat["poi_h_roads"]
        extra["poi_l_roads"] = strat["poi_l_roads"]

    doc = {"command": "eval", "split": args.split, "ckpt": args.ckpt,
           "sections": {name: rep.to_dict() for name, rep in sections}}
    doc.update(extra)
    if args.out:
        _write_report_files(args.out, args.split, sections, extra)
    _emit(doc)
    return 0


def _cmd_ablate(args):
    config, cfg_data, cfg_out, _ = load_run_config(args.config)
    data_dir = _require(args.data or cfg_data, "--data")
    out_dir = _require(args.out or cfg_out, "--out")
    if args.seed is not None:
        config.seed = args.seed
    results = {}
    for variant in args.variant:
        run_config = ModelConfig.from_dict({**config.to_dict(), "variant": variant})
        run_dir = os.path.join(out_dir, variant)
        _, result, test_report, ha_report = _run_one_training(
            run_config, data_dir, run_dir, args.embed_cache)
        results[variant] = {"test": test_report.avg,
                            "best_val_mae": result.best_val_mae,
                            "epochs_run": result.epochs_run,
                            "out": run_dir}
        results.setdefault("_ha", ha_report.avg)
    ha = results.pop("_ha", None)
    _emit({"command": "ablate", "out": out_dir, "variants": results, "ha": ha})
    return 0


def _read_history_csv(path):
    if not os.path.exists(path):
        raise DataError(f"history not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["epoch", "train_mae", "val_mae"]:
            raise DataError(f"{path}: header must be epoch,train_mae,val_mae")
        rows = []
        for ln, row in enumerate(reader, start=2):
            if len(row) != 3:
                raise DataError(f"{path} line {ln}: expected 3 fields")
            try:
                rows.append((int(row[0]), float(row[1]), float(row[2])))
            except ValueError:
                raise DataError(f"{path} line {ln}: bad number") from None
    if not rows:
        raise DataError(f"{path}: no history rows")
    return rows


def _cmd_report(args):
    history = _read_history_csv(args.history)
    best = min(history, key=lambda r: r[2])
    doc = {"command": "report", "epochs": len(history),
           "best_epoch": best[0], "best_val_mae": best[2],
           "final_train_mae": history[-1][1],
           "history": [[e, tr, va] for e, tr, va in history]}
    table = None
    if args.report:
        rdoc = _read_json(args.report, "report")
        if "sections" not in rdoc:
            raise DataError(f"{args.report}: missing 'sections'")
        sections = [(name, MetricsReport(sec["horizons"], sec["avg"],
                                         sec.get("label", "")))
                    for name, sec in rdoc["sections"].items()]
        table = format_report_table(sections)
        doc["table"] = table
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_history(os.path.join(args.out, "history.csv"), history)
        if table is not None:
            with open(os.path.join(args.out, "report.txt"), "w", encoding="utf-8") as fh:
                fh.write(table)
                fh.write("\n")
    _emit(doc)
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def run(argv=None):
    """Execute one CLI invocation; returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required")
        level = logging.WARNING if args.verbose == 0 else \
            logging.INFO if args.verbose == 1 else logging.DEBUG
        logging.basicConfig(stream=sys.stderr, level=level,
                            format="%(levelname)s %(name)s: %(message)s")
        log.setLevel(level)
        return _COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except (ConfigError, DataError, ShapeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


def entry():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    entry()
