"""``mhim`` command line.

Exit codes: 0 success, 2 configuration error, 3 numeric abort, 1 anything else.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .data import SplitError, write_dataset
from .experiment import evaluate_run, export_scoremap, load_bags, run, sweep
from .metrics import to_json
from .params_io import ParamFileError, atomic_write_text
from .training import NumericAbort, TrainConfigError, pretrain_baseline

EXIT_CONFIG = 2
EXIT_NUMERIC = 3


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mhim", description="Masked hard instance mining for MIL")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_required=True):
        sp.add_argument("--config", help="key = value configuration file")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key (repeatable)")
        sp.add_argument("--out", required=out_required, help="output directory")
        return sp

    common(sub.add_parser("gen-data", help="write a synthetic dataset as BAGF files + manifest"))
    common(sub.add_parser("pretrain", help="train the plain aggregator on all bags"))
    common(sub.add_parser("train", help="k-fold run: pretrain, fit, evaluate"))
    common(sub.add_parser("eval", help="re-evaluate a finished run directory"))
    ex = common(sub.add_parser("export", help="per-instance score map of one bag"))
    ex.add_argument("--bag", required=True, help="bag id")
    ex.add_argument("--csv", help="destination (default: <out>/scoremap_<bag>.csv)")
    sw = common(sub.add_parser("sweep", help="cartesian grid of runs"))
    sw.add_argument("--grid", action="append", default=[], metavar="KEY=V1,V2,...",
                    help="swept key and its values (repeatable)")
    sw.add_argument("--workers", type=int, default=1)
    return p


def _resolve(args):
    cfg = load_config(args.config, args.set)
    env_seed = os.environ.get("MHIM_SEED")
    if env_seed:
        cfg = cfg.with_overrides({"seed": env_seed})
    return cfg.validate()


def _grid(items: list[str]) -> dict[str, list[str]]:
    grid = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--grid expects key=v1,v2,..., got {item!r}")
        k, v = item.split("=", 1)
        grid[k.strip()] = [x.strip() for x in v.split(",") if x.strip()]
    if not grid:
        raise ConfigError("sweep needs at least one --grid")
    return grid


def dispatch(args) -> None:
    out = Path(args.out)
    if args.command in ("eval", "export"):
        # a run directory carries its own resolved config
        if args.command == "eval":
            print(to_json(evaluate_run(out)["aggregate"]), end="")
        else:
            export_scoremap(out, args.bag, args.csv)
        return
    cfg = _resolve(args)
    if args.command == "gen-data":
        bags, planted = load_bags(cfg)
        write_dataset(out, bags, planted)
        atomic_write_text(out / "config.txt", cfg.to_text())
    elif args.command == "pretrain":
        bags, _ = load_bags(cfg)
        pretrain_baseline(bags, cfg.train_config(), out / "pretrained.bin")
        atomic_write_text(out / "config.txt", cfg.to_text())
    elif args.command == "train":
        report = run(cfg, out)
        print(to_json(report["aggregate"]), end="")
    elif args.command == "sweep":
        summary = sweep(cfg, _grid(args.grid), out, args.workers)
        print(to_json(summary), end="")


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except (ConfigError, TrainConfigError, SplitError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ParamFileError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
