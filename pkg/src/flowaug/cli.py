"""Command-line entry point: ``flowaug <verb> --config PATH [...]``."""
from __future__ import annotations

import argparse
import dataclasses
import logging
import subprocess
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .runner import StageError, resolve_out_dir, run_experiment

VERBS = {
    "train-flow": ("flow",),
    "train-classifier": ("classifier",),
    "attack-eval": ("evaluate",),
    "metrics": ("evaluate",),
    "run": ("flow", "classifier", "evaluate"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="flowaug", description=__doc__)
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in VERBS:
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="YAML experiment config")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="output directory (beats $FLOWAUG_OUT_DIR and the config)")
        p.add_argument("--precision", choices=("f32", "f64"))
        p.add_argument("--load-flow", help="flow checkpoint to use instead of training one")
        p.add_argument("--load-classifier", help="classifier checkpoint (attack-eval, metrics)")
        p.add_argument("-v", "--verbose", action="store_true")
        if verb == "run":
            p.add_argument("--seeds", help="comma-separated seeds; one subprocess per seed, "
                                           "outputs under OUT/seed_<n>")
    return parser


def _fan_out(args) -> int:
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    cfg = load_config(args.config)
    root = resolve_out_dir(cfg, args.out)
    status = 0
    for s in seeds:
        cmd = [sys.executable, "-m", "flowaug", "run", "--config", args.config, "--seed", str(s),
               "--out", str(root / f"seed_{s}")]
        for flag in ("precision", "load_flow"):
            v = getattr(args, flag)
            if v:
                cmd += [f"--{flag.replace('_', '-')}", v]
        rc = subprocess.call(cmd)
        print(f"seed {s}: exit {rc}")
        status = status or rc
    return status


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "seeds", None):
        return _fan_out(args)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.precision:
            cfg.precision = args.precision
        if args.verb == "metrics":
            cfg.evaluation = dataclasses.replace(cfg.evaluation, attacks=[])
        elif args.verb == "attack-eval":
            cfg.evaluation = dataclasses.replace(cfg.evaluation, frechet=False)
        out = resolve_out_dir(cfg, args.out)
        load_flow = args.load_flow
        load_clf = args.load_classifier
        if args.verb in ("attack-eval", "metrics"):
            if load_clf is None and (out / "classifier.ckpt").is_file():
                load_clf = str(out / "classifier.ckpt")
            if load_flow is None and cfg.flow is not None and (out / "flow.ckpt").is_file():
                load_flow = str(out / "flow.ckpt")
            if load_clf is None:
                raise ConfigError("no classifier checkpoint: pass --load-classifier")
        elif args.verb == "train-classifier" and load_flow is None and cfg.needs_flow() \
                and (out / "flow.ckpt").is_file():
            load_flow = str(out / "flow.ckpt")
        if args.verb == "train-flow" and cfg.flow is None:
            raise ConfigError("train-flow needs a flow section in the config")
        name = "report.json" if args.verb == "run" else f"report_{args.verb}.json"
        path = run_experiment(cfg, out_dir=out, load_flow=load_flow, load_classifier=load_clf,
                              stages=VERBS[args.verb], report_name=name)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc} (partial report written)", file=sys.stderr)
        return 1
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
