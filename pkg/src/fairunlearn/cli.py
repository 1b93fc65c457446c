"""Command line entry point.

Every config key is also a flag (``--model.reg 0.01``); ``--set key=value``
does the same for scripted use.  Precedence: defaults, ``--config`` file,
``FAIRUNLEARN_OUTPUT_DIR``, flags.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline
from .config import OUTPUT_ENV, config_keys, load_config, parse_value

log = logging.getLogger("fairunlearn")

COMMANDS = {
    "train": "train the backbone (or load data.checkpoint)",
    "identify": "score candidates by influence and learn the removal mask",
    "unlearn": "apply the one-step influence update for the selected samples",
    "evaluate": "write metrics.csv and decile_report.csv",
    "gap-check": "retrain without the selected samples and compare",
    "run-all": "run the stages in order",
    "grid": "choose mask weights over the 10^-3..10^2 grid by validation F-score",
    "synth": "write a synthetic dataset with a planted popularity bias",
}


def _common(parser):
    parser.add_argument("--config", help="key = value config file (config.resolved works)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker threads for per-sample gradients (results do not depend on it)")
    parser.add_argument("-v", "--verbose", action="store_true")
    keys = parser.add_argument_group("config keys")
    for key, default in config_keys():
        keys.add_argument(f"--{key}", dest=f"key:{key}", default=argparse.SUPPRESS,
                          metavar=type(default).__name__.upper())


def build_parser():
    parser = argparse.ArgumentParser(prog="fairunlearn",
                                     description="Debias a recommender by unlearning influential samples.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        if name == "synth":
            p.add_argument("out", help="directory for interactions.tsv, groups.tsv, item_emb.tsv")
            p.add_argument("--seed", type=int, default=0)
            p.add_argument("--users", type=int, default=1000)
            p.add_argument("--items", type=int, default=200)
            continue
        _common(p)
        if name == "run-all":
            p.add_argument("--stage", choices=pipeline.STAGES, default=pipeline.STAGES[-1],
                           help="stop after this stage")
    return parser


def _overrides(args):
    values = {}
    for item in args.set:
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = parse_value(value)
    for name, value in vars(args).items():
        if name.startswith("key:"):
            values[name[4:]] = parse_value(value)
    return values


def _synth(args):
    from .synthetic import planted_popularity_bias, write_planted
    data = planted_popularity_bias(n_users=args.users, n_items=args.items, seed=args.seed)
    out = write_planted(data, args.out)
    (out / "run.cfg").write_text(
        "\n".join([f'data.interactions = "{out / "interactions.tsv"}"',
                   f'data.groups = "{out / "groups.tsv"}"',
                   f'data.item_emb = "{out / "item_emb.tsv"}"',
                   "model.reg = 0.01", "train.lr = 3.0", "train.epochs = 3000",
                   "mask.fair = 10.0", "mask.acc = 0.001", "mask.spa = 1.0"]) + "\n",
        encoding="utf-8")
    print(out)
    return 0


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "synth":
        return _synth(args)
    if args.threads < 1:
        print("error: --threads must be >= 1", file=sys.stderr)
        return pipeline.EXIT_CODES["config"]
    out_dir = None
    try:
        try:
            cfg = load_config(args.config, _overrides(args))
        except (ValueError, OSError) as exc:
            raise pipeline.StageFailure("config", exc) from exc
        out_dir = cfg.output.dir
        ctx = pipeline.open_run(cfg, args.threads)
        if args.command == "run-all":
            pipeline.run_all(ctx, args.stage)
        elif args.command == "grid":
            _, best = pipeline.run_grid_stage(ctx)
            lam = best[0]
            print(f"chosen fair={lam.fair!r} acc={lam.acc!r} spa={lam.spa!r} "
                  f"n_selected={best[1]} valid_score={best[2]!r}")
        else:
            pipeline.run_stage(ctx, args.command)
    except pipeline.StageFailure as failure:
        if out_dir is not None and failure.stage != "config":
            pipeline.mark_failed(out_dir, failure)
        print(f"error [{failure.stage}]: {failure.cause}", file=sys.stderr)
        return failure.exit_code
    print(Path(out_dir))
    return 0


__all__ = ["main", "build_parser", "OUTPUT_ENV"]
