"""Command line entry point: ``semloc <subcommand> ...``.

Every numeric default lives in :class:`semloc.harness.Config`; ``--config``
loads a JSON file over those defaults and explicit flags win over both.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace

import numpy as np

from . import harness
from .embedder import PlaceClassGrid, TrainConfig, load_model, save_model, train_gcn
from .planner import load_database, save_database
from .scenegraph import build_graph, read_scenes, write_scenes
from .world import (SplitSamplingError, SplitSpec, generate_scenes, generate_world, load_splits, load_world,
                    sample_splits, save_splits, save_world)

METHOD_NAMES = {"sv": harness.SINGLE_VIEW, "mv": harness.PASSIVE, "active": harness.ACTIVE, "da": harness.ACTIVE}

# flag dest -> Config field
_OVERRIDES = {
    "n": "n_scenes",
    "epochs": "gcn_epochs",
    "batch_size": "gcn_batch_size",
    "lr": "gcn_learning_rate",
    "episodes": "n_train_episodes",
    "episode_length": "episode_length",
    "particles": "n_particles",
    "alpha": "alpha",
    "gamma": "gamma",
    "checkpoint_period": "checkpoint_period",
    "n_test": "n_test_episodes",
    "n_train": "n_train_poses",
    "n_validation": "n_validation",
    "size": "world_size",
}


def _config(args) -> harness.Config:
    cfg = harness.Config.load(args.config) if args.config else harness.Config()
    changes = {field: getattr(args, dest) for dest, field in _OVERRIDES.items()
               if getattr(args, dest, None) is not None}
    return replace(cfg, **changes)


def _perception(args) -> harness.Perception:
    world = load_world(args.world)
    return harness.Perception(world, load_model(args.model, world.grid.n_classes))


def cmd_gen_world(args, cfg):
    world = generate_world(args.seed, (cfg.world_size, cfg.world_size))
    save_world(world, args.out)
    print(f"wrote {args.out}: {len(world.objects)} objects, {world.grid.n_classes} place classes")


def cmd_gen_scenes(args, cfg):
    world = load_world(args.world)
    n = write_scenes(args.out, generate_scenes(world, cfg.n_scenes, np.random.default_rng(args.seed)))
    print(f"wrote {n} scene records to {args.out}")


def cmd_train_gcn(args, cfg):
    if args.world:
        grid = load_world(args.world).grid
    else:
        grid = PlaceClassGrid(0.0, cfg.world_size, 0.0, cfg.world_size)
    data = [(build_graph(regions), cid) for _, regions, cid in read_scenes(args.scenes)]
    res = train_gcn(data, grid.n_classes,
                    TrainConfig(cfg.gcn_epochs, cfg.gcn_batch_size, cfg.gcn_learning_rate, seed=args.seed))
    save_model(res.model, args.out_model)
    print(f"trained on {len(data)} scenes, train accuracy {res.train_accuracy:.3f}; wrote {args.out_model}")


def cmd_sample_splits(args, cfg):
    world = load_world(args.world)
    spec = SplitSpec(args.txy, args.ttheta, n_test=cfg.n_test_episodes, n_train=cfg.n_train_poses,
                     n_validation=cfg.n_validation)
    splits = sample_splits(world, spec, np.random.default_rng(args.seed))
    save_splits(splits, args.out)
    print(f"wrote {args.out}: {len(splits.train)} train, {len(splits.test)} test, "
          f"{len(splits.validation)} validation poses")


def cmd_train_planner(args, cfg):
    perception = _perception(args)
    splits = load_splits(args.splits)
    db = harness.train_planner(perception, splits.train, cfg, args.seed)
    save_database(db, args.out_db)
    print(f"wrote {args.out_db}: {len(db)} records, checkpoints {db.checkpoints}")


def cmd_eval(args, cfg):
    perception = _perception(args)
    splits = load_splits(args.splits)
    method = METHOD_NAMES[args.method]
    qf, checkpoint = None, ""
    if method == harness.ACTIVE:
        if not args.db:
            raise SystemExit(f"--method {args.method} needs --db")
        db = load_database(args.db)
        qf = db
        if args.method == "da":
            checkpoint, _ = harness.uda_select(perception, db, splits.validation, cfg, args.seed)
            qf = db.restore(checkpoint)
    acc = harness.evaluate(perception, splits.test[:cfg.n_test_episodes], cfg, method, qf, args.seed)
    row = {"T_xy": splits.t_xy, "T_theta": splits.t_theta, "method": args.method, "top1": acc,
           "checkpoint": checkpoint}
    if args.out_csv:
        with open(args.out_csv, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(row))
            w.writeheader()
            w.writerow(row)
    print(json.dumps(row))


def cmd_uda_select(args, cfg):
    perception = _perception(args)
    db = load_database(args.db)
    best, scores = harness.uda_select(perception, db, load_splits(args.validation).validation, cfg, args.seed)
    print(json.dumps({"checkpoint": best, "validation_accuracy": {str(k): v for k, v in scores.items()}}))


def cmd_run(args, cfg):
    rows, timing = harness.run_experiment(args.seeds, cfg, workers=args.workers)
    for path in harness.report(rows, timing, args.out_dir):
        print(f"wrote {path}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semloc", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON file overriding numeric defaults")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--seed", type=int, default=0)
        return sp

    sp = add("gen-world", cmd_gen_world, "generate a furnished room")
    sp.add_argument("--out", required=True)
    sp.add_argument("--size", type=float)

    sp = add("gen-scenes", cmd_gen_scenes, "render labeled scene records at random poses")
    sp.add_argument("--world", required=True)
    sp.add_argument("--n", type=int)
    sp.add_argument("--out", required=True)

    sp = add("train-gcn", cmd_train_gcn, "train the place classifier on scene records")
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--out-model", required=True)
    sp.add_argument("--world", help="world file fixing the class count (default: square room of --size)")
    sp.add_argument("--size", type=float)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)

    sp = add("sample-splits", cmd_sample_splits, "sample train/test/validation poses with a domain gap")
    sp.add_argument("--world", required=True)
    sp.add_argument("--txy", type=float, required=True)
    sp.add_argument("--ttheta", type=float, required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-test", type=int)
    sp.add_argument("--n-train", type=int)
    sp.add_argument("--n-validation", type=int)

    for name, func, help_ in (("train-planner", cmd_train_planner, "train the NNQL action planner"),
                              ("eval", cmd_eval, "Top-1 accuracy of one method on the test split"),
                              ("uda-select", cmd_uda_select, "pick the checkpoint with best validation accuracy")):
        sp = add(name, func, help_)
        sp.add_argument("--world", required=True)
        sp.add_argument("--model", required=True)
        sp.add_argument("--episode-length", type=int)
        sp.add_argument("--particles", type=int)
        if name == "train-planner":
            sp.add_argument("--splits", required=True)
            sp.add_argument("--out-db", required=True)
            sp.add_argument("--episodes", type=int)
            sp.add_argument("--alpha", type=float)
            sp.add_argument("--gamma", type=float)
            sp.add_argument("--checkpoint-period", type=int)
        elif name == "eval":
            sp.add_argument("--method", choices=sorted(METHOD_NAMES), required=True)
            sp.add_argument("--splits", required=True)
            sp.add_argument("--db")
            sp.add_argument("--out-csv")
            sp.add_argument("--n-test", type=int)
        else:
            sp.add_argument("--db", required=True)
            sp.add_argument("--validation", required=True, help="splits file holding the validation poses")

    sp = add("run", cmd_run, "full experiment: every gap setting for each world seed")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    sp.add_argument("--out-dir", required=True)
    sp.add_argument("--workers", type=int, default=1)
    sp.add_argument("--episodes", type=int)
    sp.add_argument("--n", type=int)
    sp.add_argument("--epochs", type=int)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = _config(args)
        args.func(args, cfg)
    except (OSError, ValueError, KeyError, SplitSamplingError) as exc:
        print(f"semloc: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
