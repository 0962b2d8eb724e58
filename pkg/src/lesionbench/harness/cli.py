"""Command-line interface: ``lesionbench <stage> [options]``.

Exit status: 0 on success, 1 when a stage fails (including a missing
upstream stage), 2 for usage errors.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from ..synthgen import dataset_manifest
from .config import SCHEMA, ConfigError, parse_value, read_config_file, resolve, write_config_file
from .pipeline import Experiment, StageError

STAGES = {
    "generate": ("generate", "build the synthetic datasets"),
    "train": ("train", "train the classifier runs and select the best on holdout"),
    "explain": ("explain", "compute heatmaps of the best model for every method"),
    "evaluate": ("evaluate", "score heatmaps against the lesion ground truth"),
    "report": ("report", "render figures and write report.json"),
    "run-all": ("run_all", "run every stage, resuming completed ones"),
}

# flags that are shorthands for configuration keys
SHORTHANDS = {
    ("experiment", "scale"): ("--scale", dict(choices=("paper", "desk"))),
    ("experiment", "seed"): ("--seed", dict(type=int)),
    ("experiment", "methods"): ("--methods", dict(metavar="LIST")),
    ("experiment", "transform"): ("--transform", dict(choices=("abs", "raw", "pos"))),
}


def _dest(section, key):
    return f"cfg__{section}__{key}"


def _common_parser():
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("experiment")
    g.add_argument("--config", metavar="FILE", help="INI configuration file (flags override it)")
    g.add_argument("--out", metavar="DIR", default="lesionbench-out", help="output directory")
    g.add_argument("--dry-run", action="store_true",
                   help="print the resolved configuration and dataset manifests, then exit")
    g.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    for (section, key), (flag, kw) in SHORTHANDS.items():
        g.add_argument(flag, dest=_dest(section, key), help=SCHEMA[section, key][1], **kw)
    for section in ("experiment", "dataset", "model", "train"):
        g = p.add_argument_group(f"[{section}] keys")
        for (sec, key), (_, text) in SCHEMA.items():
            if sec != section or (sec, key) in SHORTHANDS:
                continue
            g.add_argument(f"--{sec}-{key.replace('_', '-')}", dest=_dest(sec, key), metavar="VALUE",
                           help=text)
    return p


def build_parser():
    parser = argparse.ArgumentParser(
        prog="lesionbench",
        description="Synthetic lesion benchmark for saliency methods: generate data, train, "
                    "explain, evaluate and report.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    common = _common_parser()
    for name, (_, text) in STAGES.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def _overrides(args):
    values = {}
    for (section, key) in SCHEMA:
        raw = getattr(args, _dest(section, key), None)
        if raw is None:
            continue
        values[section, key] = raw if (section, key) in (("experiment", "seed"), ("experiment", "scale")) \
            else parse_value(section, key, raw)
    return values


def _dry_run(config):
    plan = {"config": config.to_dict(),
            "datasets": {cond: dataset_manifest(dc) for cond, dc in config.dataset_configs().items()}}
    print(json.dumps(plan, indent=2, sort_keys=True))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(message)s")
    stage = args.command
    try:
        file_values = read_config_file(args.config) if args.config else {}
        config = resolve(file_values=file_values, overrides=_overrides(args))
    except ConfigError as exc:
        print(f"lesionbench {stage}: configuration error: {exc}", file=sys.stderr)
        return 2
    if args.dry_run:
        _dry_run(config)
        return 0
    say = (lambda msg: None) if args.quiet else (lambda msg: print(msg, flush=True))
    exp = Experiment(config, args.out, progress=say)
    try:
        exp.out.mkdir(parents=True, exist_ok=True)
        write_config_file(config, exp.out / "config.ini")
        getattr(exp, STAGES[stage][0])()
    except StageError as exc:
        print(f"lesionbench {stage}: stage {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"lesionbench {stage}: stage {stage} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
