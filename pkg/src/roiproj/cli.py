"""Command-line entry point: gen-data | train | eval | ablate | compare | gradcheck.

Exit codes: 0 success, 1 usage error, 2 data integrity, 3 training
divergence, 4 verification failure. ROIPROJ_OUT sets the default output
root. Every run writes its fully resolved config beside its outputs.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import binio
from .config import dump_config, load_config
from .data import generate_dataset, load_dataset
from .errors import (
    ConfigurationError,
    InputError,
    IntegrityError,
    TrainingError,
    UsageError,
)
from .evaluate import evaluate_model, run_ablation, run_comparison
from .gradcheck import TOLERANCE, network_sweep, operator_suite
from .model import NetworkConfig, build_network
from .training import Trainer

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INTEGRITY = 2
EXIT_TRAINING = 3
EXIT_VERIFICATION = 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser():
    parser = _Parser(prog="roiproj", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_data=False):
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="SECTION.KEY=VALUE")
        p.add_argument("--out", default=None, help="output directory")
        if needs_data:
            p.add_argument("--data", required=True, help="dataset manifest.json")

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, default=None, help="scene count (even)")
    p.add_argument("--seed", type=int, default=None)
    common(p)

    p = sub.add_parser("train", help="train one configured variant")
    p.add_argument("--seed", type=int, default=1)
    common(p, needs_data=True)

    p = sub.add_parser("eval", help="evaluate a stored checkpoint")
    p.add_argument("--checkpoint", required=True)
    common(p, needs_data=True)

    p = sub.add_parser("compare", help="train and compare all variants")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    common(p, needs_data=True)

    p = sub.add_parser("ablate", help="build/inject site grid")
    p.add_argument("--seeds", default=None, help="comma-separated seeds")
    common(p, needs_data=True)

    p = sub.add_parser("gradcheck", help="finite-difference verification")
    p.add_argument("--seed", type=int, default=1)
    common(p)
    return parser


def _out_dir(args, default_name):
    root = args.out or os.path.join(os.environ.get("ROIPROJ_OUT", "runs"), default_name)
    os.makedirs(root, exist_ok=True)
    return root


def _write_resolved(cfg, out_dir):
    with open(os.path.join(out_dir, "resolved_config.ini"), "w") as fh:
        fh.write(dump_config(cfg))


def _parse_seeds(raw, default):
    if raw is None:
        return default
    try:
        return tuple(int(s) for s in raw.split(",") if s.strip())
    except ValueError as exc:
        raise UsageError(f"bad seed list {raw!r}") from exc


def _load_scenes(args, cfg):
    if not os.path.exists(args.data):
        raise UsageError(f"dataset manifest not found: {args.data}")
    _, scenes = load_dataset(args.data, expected_config=cfg.data)
    return scenes


def _cmd_gen_data(args):
    cfg = load_config(args.config, args.overrides)
    n = args.n if args.n is not None else cfg.run.n_scenes
    seed = args.seed if args.seed is not None else cfg.run.data_seed
    out = _out_dir(args, f"data-n{n}-seed{seed}")
    generate_dataset(n, seed, cfg.data, out_dir=out)
    _write_resolved(cfg, out)
    print(f"wrote {n} scenes + manifest to {out}")
    return EXIT_OK


def _cmd_train(args):
    cfg = load_config(args.config, args.overrides)
    scenes = _load_scenes(args, cfg)
    train_scenes = [s for s in scenes if s.split == "train"]
    out = _out_dir(args, f"train-{cfg.model.variant}-seed{args.seed}")
    _write_resolved(cfg, out)
    tcfg = dataclasses.replace(cfg.train, seed=args.seed)
    model = build_network(cfg.model, seed=args.seed)
    Trainer(model, train_scenes, tcfg, cfg.data, out_dir=out).train()
    meta = {
        "model": dataclasses.asdict(cfg.model),
        "train": dataclasses.asdict(tcfg),
        "seed": args.seed,
    }
    with open(os.path.join(out, "checkpoint_meta.json"), "w") as fh:
        json.dump(meta, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(f"training complete; checkpoints and log in {out}")
    return EXIT_OK


def _cmd_eval(args):
    cfg = load_config(args.config, args.overrides)
    meta_path = os.path.join(os.path.dirname(args.checkpoint), "checkpoint_meta.json")
    if os.path.exists(meta_path):
        with open(meta_path) as fh:
            meta = json.load(fh)
        net_cfg = NetworkConfig(**meta["model"])
        seed = meta.get("seed", 1)
    else:
        net_cfg = cfg.model
        seed = 1
    scenes = _load_scenes(args, cfg)
    test_scenes = [s for s in scenes if s.split == "test"]
    model = build_network(net_cfg, seed=seed)
    model.load_state_arrays(binio.read_arrays(args.checkpoint))
    out = _out_dir(args, "eval")
    _write_resolved(cfg, out)
    result = evaluate_model(model, test_scenes, cfg.data, cfg.train)
    report = {"checkpoint": os.path.basename(args.checkpoint),
              "config_hash": net_cfg.config_hash(), **result}
    with open(os.path.join(out, "eval.json"), "w") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
        fh.write("\n")
    print(json.dumps(report, indent=1, sort_keys=True))
    return EXIT_OK


def _cmd_compare(args):
    cfg = load_config(args.config, args.overrides)
    scenes = _load_scenes(args, cfg)
    seeds = _parse_seeds(args.seeds, cfg.run.seeds)
    out = _out_dir(args, "compare")
    _write_resolved(cfg, out)
    report = run_comparison(scenes, cfg.model, cfg.data, cfg.train, seeds=seeds, out_dir=out)
    _write_report(report, out)
    return EXIT_OK


def _cmd_ablate(args):
    cfg = load_config(args.config, args.overrides)
    scenes = _load_scenes(args, cfg)
    seeds = _parse_seeds(args.seeds, (1,))
    out = _out_dir(args, "ablate")
    _write_resolved(cfg, out)
    report = run_ablation(scenes, cfg.model, cfg.data, cfg.train, seeds=seeds, out_dir=out)
    _write_report(report, out)
    return EXIT_OK


def _write_report(report, out):
    with open(os.path.join(out, "report.json"), "w") as fh:
        fh.write(report.to_json())
    table = report.format_table()
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(table)
    print(table, end="")


def _cmd_gradcheck(args):
    print(f"{'operator':<28}{'max rel err':>14}")
    print("-" * 42)
    worst = 0.0
    for name, err in operator_suite(args.seed).items():
        print(f"{name:<28}{err:>14.2e}")
        worst = max(worst, err)
    sweep = network_sweep(args.seed)
    net_err = max(sweep.values())
    print(f"{'network(all parameters)':<28}{net_err:>14.2e}")
    worst = max(worst, net_err)
    if worst >= TOLERANCE:
        print(f"FAIL: max relative error {worst:.2e} >= {TOLERANCE:.0e}")
        return EXIT_VERIFICATION
    print(f"OK: all gradients within {TOLERANCE:.0e}")
    return EXIT_OK


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "compare": _cmd_compare,
    "ablate": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None):
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except TrainingError as exc:
        print(f"training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING


if __name__ == "__main__":
    sys.exit(main())
