#!/usr/bin/env python3
"""
AcrE command-line tool

Preprocesses triple datasets, trains Serial/Parallel AcrE models, evaluates
checkpoints with the filtered ranking protocol and prints parameter, category
and head/tail reports. Every run directory receives the resolved config, the
log file and all outputs of the command.

Usage:
    python scripts/acre_cli.py preprocess data/kinship --out runs/kinship-data
    python scripts/acre_cli.py train --config config/presets/kinship_serial.json --dataset data/kinship --out runs/kinship-serial
    python scripts/acre_cli.py eval runs/kinship-serial/checkpoint.npz --split test
    python scripts/acre_cli.py report runs/kinship-serial/checkpoint.npz
    python scripts/acre_cli.py report --params --config config/presets/fb15k237_serial.json --dataset-stats FB15k-237
    python scripts/acre_cli.py grid-search --dataset data/kinship --out runs/kinship-grid --search-epochs 20
"""

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import pandas as pd
from tabulate import tabulate

# Add project root to path to ensure imports work correctly
project_root = Path(__file__).resolve().parent.parent
sys.path.append(str(project_root))

from config import (
    DATASET_STATS, DEBUG_CHECKS, FLOAT_WIDTH, GRID_SEARCH_EPOCHS,
    GRID_SEARCH_SPACE, LOG_FILE_NAME, LOG_LEVEL, OUTPUT_ROOT, PRESETS,
)
from acre.data import load_cache, load_store, load_triples, save_cache
from acre.errors import AcreError, ConfigError
from acre.evaluation import (
    DIRECTIONS, TIE_POLICIES, category_frame, category_report, dump_ranks,
    evaluate, format_table, write_records,
)
from acre.model import parameter_count
from acre.run_config import FIELD_DEFAULTS, load_config_file, resolve_run_config
from acre.tensor import set_debug_checks
from acre.training import Checkpoint, count_params, grid_search, train

logger = logging.getLogger("acre.cli")

CACHE_FILE_NAME = "triples.json"
STATS_FILE_NAME = "stats.json"
CONFIG_FILE_NAME = "config.json"
CHECKPOINT_FILE_NAME = "checkpoint.npz"
CURVE_FILE_NAME = "training_curve.jsonl"
STATS_SCHEMA = "acre.stats/1"

FLAG_ALIASES = {"atrous_rates": ["--rates"]}


def configure_logging(output_dir=None, quiet=False):
    """
    Configure root logging for one command.

    Args:
        output_dir (str, optional): directory receiving the log file
        quiet (bool): only warnings and errors on the console
    """
    handlers = [logging.StreamHandler(sys.stdout)]
    if quiet:
        handlers[0].setLevel(logging.WARNING)
    if output_dir:
        os.makedirs(output_dir, exist_ok=True)
        handlers.append(logging.FileHandler(os.path.join(output_dir, LOG_FILE_NAME)))
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL, logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )


def _dataset_name(path):
    path = os.path.normpath(path)
    if os.path.basename(path) == CACHE_FILE_NAME:
        path = os.path.dirname(path)
    return os.path.splitext(os.path.basename(path))[0] or "dataset"


def _load_run_store(dataset=None, cache=None):
    if cache:
        return load_cache(cache)
    if dataset:
        return load_store(dataset)
    raise ConfigError("no dataset given: set 'dataset' or 'cache' in the config or on the command line")


def _print_stats(name, stats):
    table = pd.DataFrame([{
        "Dataset": name,
        "#R": stats["relations"],
        "#E": stats["entities"],
        "Train": stats["train"],
        "Valid": stats["valid"],
        "Test": stats["test"],
    }])
    print(tabulate(table, headers="keys", tablefmt="pipe", showindex=False))


def cmd_preprocess(dataset_dir, out):
    """
    Parse a dataset directory and write its triple cache and statistics.

    Args:
        dataset_dir (str): directory with train/valid/test files
        out (str): output directory

    Returns:
        TripleStore: the cached store
    """
    if not os.path.isdir(dataset_dir):
        raise FileNotFoundError(f"dataset directory not found: {dataset_dir}")
    store, _ = load_triples(dataset_dir)
    os.makedirs(out, exist_ok=True)
    save_cache(store, os.path.join(out, CACHE_FILE_NAME))

    name = _dataset_name(dataset_dir)
    stats = {"schema": STATS_SCHEMA, "dataset": name, **store.stats()}
    with open(os.path.join(out, STATS_FILE_NAME), "w", encoding="utf-8") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
        f.write("\n")

    print(store.stats_line())
    _print_stats(name, stats)
    if store.unseen_entities:
        print(f"Note: {len(store.unseen_entities)} entities appear only in valid/test")
    return store


def _run_output_dir(run, out=None):
    if out:
        return out
    if run.output_dir:
        return run.output_dir
    source = run.cache or run.dataset or "run"
    return os.path.join(OUTPUT_ROOT, f"{_dataset_name(source)}-{run.model.structure}-seed{run.train.seed}")


def cmd_train(run, out=None, quiet=False):
    """
    Train one model and write config, curve, log and checkpoint.

    Returns:
        Checkpoint
    """
    out_dir = _run_output_dir(run, out)
    configure_logging(out_dir, quiet)
    store = _load_run_store(run.dataset, run.cache)
    run = replace(run, output_dir=out_dir)
    run.save(os.path.join(out_dir, CONFIG_FILE_NAME))

    checkpoint = train(store, run.train, curve_path=os.path.join(out_dir, CURVE_FILE_NAME), progress=not quiet)
    checkpoint.run_config = run.to_dict()
    checkpoint_path = checkpoint.save(os.path.join(out_dir, CHECKPOINT_FILE_NAME))

    print("\n===== TRAINING SUMMARY =====")
    print(f"Structure: {run.model.structure} (integration: {run.model.integration})")
    print(f"Parameters: {count_params(checkpoint):,}")
    print(f"Epochs run: {checkpoint.history[-1]['epoch']}/{run.train.epochs}")
    print(f"Best validation MRR: {checkpoint.best_valid_mrr:.4f} (epoch {checkpoint.epoch})")
    print(f"\nCheckpoint: {checkpoint_path}")
    return checkpoint


def _checkpoint_store(checkpoint, dataset=None, cache=None):
    if dataset or cache:
        return _load_run_store(dataset, cache)
    return _load_run_store(checkpoint.run_config.get("dataset"), checkpoint.run_config.get("cache"))


def cmd_eval(checkpoint_path, split="test", direction="both", tie_policy=None, raw=False,
             dump=False, dataset=None, cache=None, out=None, quiet=False):
    """
    Evaluate a checkpoint on a split.

    Metrics are appended as JSON lines to metrics_<split>.jsonl in the output
    directory (the checkpoint's directory unless given).

    Returns:
        MetricReport
    """
    out_dir = out or os.path.dirname(os.path.abspath(checkpoint_path))
    configure_logging(out_dir, quiet)
    checkpoint = Checkpoint.load(checkpoint_path)
    store = _checkpoint_store(checkpoint, dataset, cache)
    tie_policy = tie_policy or checkpoint.train_config.tie_policy
    report = evaluate(
        checkpoint, store, split, direction,
        tie_policy=tie_policy, filtered=not raw, batch_size=checkpoint.train_config.eval_batch_size,
    )

    setting = "raw" if raw else "filtered"
    write_records(
        os.path.join(out_dir, f"metrics_{split}.jsonl"),
        report.records(split=split, setting=setting, tie_policy=tie_policy, structure=checkpoint.model_config.structure),
    )
    if dump:
        dump_ranks(report, os.path.join(out_dir, f"ranks_{split}.csv"), store.vocab)

    print(f"\n===== EVALUATION ({split}, {setting}, ties: {tie_policy}) =====")
    print(format_table(report.to_frame()))
    return report


def _report_sizes(run, dataset_stats=None):
    if dataset_stats:
        if dataset_stats not in DATASET_STATS:
            raise ConfigError(f"unknown dataset '{dataset_stats}'; known: {', '.join(DATASET_STATS)}")
        stats = DATASET_STATS[dataset_stats]
        num_entities, num_relations = stats["entities"], stats["relations"]
    else:
        store = _load_run_store(run.dataset, run.cache)
        num_entities, num_relations = store.num_entities, store.num_original_relations
    if run.train.head_mode == "reciprocal":
        num_relations *= 2
    return num_entities, num_relations


def cmd_report(checkpoint_path=None, run=None, params=False, categories=False, directions=False,
               dataset_stats=None, dataset=None, cache=None, threshold=1.5):
    """
    Print the parameter count, the relation-category table and the head/tail
    table. Without a checkpoint only the parameter count is available.

    Returns:
        dict: the computed sections
    """
    if not (params or categories or directions):
        params = True
        categories = directions = checkpoint_path is not None
    if (categories or directions) and checkpoint_path is None:
        raise ConfigError("category and head/tail reports need a checkpoint")

    sections = {}
    checkpoint = Checkpoint.load(checkpoint_path) if checkpoint_path else None
    if params:
        if checkpoint is not None:
            count = count_params(checkpoint)
            structure = checkpoint.model_config.structure
        else:
            num_entities, num_relations = _report_sizes(run, dataset_stats)
            count = parameter_count(run.model, num_entities, num_relations)
            structure = run.model.structure
        sections["params"] = count
        print(f"\nParaNum ({structure}): {count:,} (≈{count / 1e6:.2f}M)")

    if categories or directions:
        store = _checkpoint_store(checkpoint, dataset, cache)
        report = evaluate(checkpoint, store, "test", "both", batch_size=checkpoint.train_config.eval_batch_size)
        if directions:
            sections["directions"] = report
            print("\n===== HEAD / TAIL PREDICTION (test) =====")
            print(format_table(report.to_frame()))
        if categories:
            cells = category_report(checkpoint, store, "test", threshold=threshold, report=report)
            sections["categories"] = cells
            print("\n===== HITS@10 BY RELATION CATEGORY (test, %) =====")
            print(format_table(category_frame(cells), floatfmt=".1f"))
    return sections


def cmd_grid_search(run, space=None, search_epochs=None, out=None, quiet=False):
    """
    Grid-search hyperparameters on the validation split, then retrain the best
    cell with the full budget.

    Returns:
        GridSearchResult
    """
    out_dir = _run_output_dir(run, out)
    configure_logging(out_dir, quiet)
    store = _load_run_store(run.dataset, run.cache)
    space = space or GRID_SEARCH_SPACE
    result = grid_search(store, space, run.train, search_epochs or GRID_SEARCH_EPOCHS, progress=not quiet)

    result.table.to_csv(os.path.join(out_dir, "grid_search.csv"), index=False)
    best_run = replace(run, train=result.best_config, output_dir=out_dir)
    best_run.save(os.path.join(out_dir, CONFIG_FILE_NAME))
    result.checkpoint.run_config = best_run.to_dict()
    result.checkpoint.save(os.path.join(out_dir, CHECKPOINT_FILE_NAME))

    print("\n===== GRID SEARCH SUMMARY =====")
    print(format_table(result.table))
    succeeded = result.table[result.table["status"] == "ok"]
    failed = result.table[result.table["status"] == "failed"]
    print(f"\nCells trained: {len(succeeded)}/{len(result.table)}")
    for _, row in succeeded.iterrows():
        print(f"  ✅ cell {row['cell']}: valid MRR {row['valid_mrr']:.4f}")
    for _, row in failed.iterrows():
        print(f"  ❌ cell {row['cell']}")
    print(f"\nBest validation MRR after full training: {result.checkpoint.best_valid_mrr:.4f}")
    return result


def _add_config_flags(parser):
    parser.add_argument("--config", help=f"run config JSON file or preset name ({', '.join(PRESETS) or 'none'})")
    parser.add_argument("--dataset", help="dataset directory or triple file")
    parser.add_argument("--cache", help="triple cache written by preprocess")
    group = parser.add_argument_group("model and training settings")
    for key, default in FIELD_DEFAULTS.items():
        if isinstance(default, tuple):
            default = ",".join(str(v) for v in default)
        flags = [f"--{key.replace('_', '-')}"] + FLAG_ALIASES.get(key, [])
        group.add_argument(*flags, dest=key, default=None, metavar="VALUE", help=f"(default: {default})")


def _resolve_from_args(args):
    file_values = {"float_width": FLOAT_WIDTH}
    if args.config:
        path = PRESETS.get(args.config, args.config)
        file_values.update(load_config_file(path))
    overrides = {key: getattr(args, key, None) for key in FIELD_DEFAULTS}
    overrides.update(dataset=args.dataset, cache=args.cache)
    return resolve_run_config(file_values, overrides)


def build_parser():
    parser = argparse.ArgumentParser(description="AcrE knowledge graph embedding toolkit")
    parser.add_argument("--quiet", action="store_true", help="Hide progress bars and info logging")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("preprocess", help="Parse a dataset and write its triple cache")
    p.add_argument("dataset_dir", help="Directory with train/valid/test files")
    p.add_argument("--out", required=True, help="Output directory for the cache and statistics")

    p = commands.add_parser("train", help="Train a model")
    _add_config_flags(p)
    p.add_argument("--out", help="Run directory (default: under ACRE_OUTPUT_DIR)")

    p = commands.add_parser("eval", help="Evaluate a checkpoint")
    p.add_argument("checkpoint", help="Checkpoint file")
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])
    p.add_argument("--direction", default="both", choices=DIRECTIONS)
    p.add_argument("--tie-policy", choices=TIE_POLICIES, help="Default: the checkpoint's setting")
    p.add_argument("--raw", action="store_true", help="Unfiltered ranking")
    p.add_argument("--dump-ranks", action="store_true", help="Write per-query ranks as CSV")
    p.add_argument("--dataset", help="Override the dataset recorded in the checkpoint")
    p.add_argument("--cache", help="Override the cache recorded in the checkpoint")
    p.add_argument("--out", help="Output directory (default: the checkpoint's directory)")

    p = commands.add_parser("report", help="Parameter count, category table and head/tail table")
    p.add_argument("checkpoint", nargs="?", help="Checkpoint file")
    p.add_argument("--params", action="store_true", help="Parameter count")
    p.add_argument("--categories", action="store_true", help="Hits@10 per relation category")
    p.add_argument("--directions", action="store_true", help="Head and tail prediction metrics")
    p.add_argument("--dataset-stats", choices=sorted(DATASET_STATS), help="Size the model from benchmark statistics")
    p.add_argument("--threshold", type=float, default=1.5, help="One/many cut-off for relation categories")
    _add_config_flags(p)

    p = commands.add_parser("grid-search", help="Grid-search hyperparameters on the validation split")
    _add_config_flags(p)
    p.add_argument("--space", help="JSON file mapping keys to candidate value lists")
    p.add_argument("--search-epochs", type=int, help=f"Epochs per cell (default: {GRID_SEARCH_EPOCHS})")
    p.add_argument("--out", help="Run directory (default: under ACRE_OUTPUT_DIR)")
    return parser


def _dispatch(args):
    if args.command == "preprocess":
        return cmd_preprocess(args.dataset_dir, args.out)
    if args.command == "train":
        return cmd_train(_resolve_from_args(args), args.out, args.quiet)
    if args.command == "eval":
        return cmd_eval(
            args.checkpoint, args.split, args.direction, args.tie_policy, args.raw,
            args.dump_ranks, args.dataset, args.cache, args.out, args.quiet,
        )
    if args.command == "report":
        run = None if args.checkpoint else _resolve_from_args(args)
        return cmd_report(
            args.checkpoint, run, args.params, args.categories, args.directions,
            args.dataset_stats, args.dataset, args.cache, args.threshold,
        )
    if args.command == "grid-search":
        space = load_config_file(args.space) if args.space else None
        return cmd_grid_search(_resolve_from_args(args), space, args.search_epochs, args.out, args.quiet)
    raise ValueError(f"unknown command {args.command!r}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(quiet=args.quiet)
    set_debug_checks(DEBUG_CHECKS)

    try:
        _dispatch(args)
    except ConfigError as e:
        logger.error(f"Invalid configuration: {e}")
        print(f"error: ConfigError: {e}", file=sys.stderr)
        return 2
    except (AcreError, OSError, ValueError, KeyError) as e:
        logger.error(f"{args.command} failed: {e}", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
