"""Command line entry point: ``fedkper {run,score,compare,gen-data}``.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields

from .. import data as fdata
from ..errors import ConfigError
from ..fl import Strategy
from . import runner
from .config import PRESETS, ExperimentConfig, parse_config

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--preset", choices=sorted(PRESETS), help="protocol preset applied before the file")
    group = p.add_argument_group("experiment fields (override the config file)")
    for f in fields(ExperimentConfig):
        group.add_argument(f"--{f.name.replace('_', '-')}", dest=f"cfg_{f.name}", metavar="VALUE",
                           help=f"default: {getattr(ExperimentConfig, f.name, '')}")


def _config_from(args) -> ExperimentConfig:
    overrides = {
        key[4:]: value for key, value in vars(args).items() if key.startswith("cfg_") and value is not None
    }
    return parse_config(args.config, overrides, preset=args.preset)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="fedkper", description="Federated learning simulator with FedKPer, FedAvg and FedProx.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("run", help="run one strategy over every configured seed")
    _add_config_flags(p)

    p = sub.add_parser("compare", help="run several strategies on identical partitions")
    _add_config_flags(p)
    p.add_argument("--strategies", required=True,
                   help="comma list, e.g. fedavg,fedprox:0.01,fedkper")

    p = sub.add_parser("score", help="consistency/AIPFR (and BwT) of a trajectory CSV")
    p.add_argument("trajectory")

    p = sub.add_parser("gen-data", help="write a synthetic dataset in FDS1 or CSV form")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--spread", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _write_csv(ds: fdata.Dataset, path: str) -> None:
    with open(path, "w") as fh:
        fh.write(",".join([f"x{j}" for j in range(ds.dim)] + ["label"]) + "\n")
        for row, label in zip(ds.features, ds.labels):
            fh.write(",".join(runner.fmt(v) for v in row) + f",{label}\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            cfg = _config_from(args)
            top = runner.run(cfg)
            print(json.dumps({"strategy": top["strategy"], "mean": top["mean"]}, indent=2))
        elif args.command == "compare":
            cfg = _config_from(args)
            strategies = [Strategy.parse(s, cfg.mu) for s in args.strategies.split(",") if s.strip()]
            if len(strategies) < 2:
                raise ConfigError("compare needs at least two strategies", key="strategies")
            rows = runner.compare(cfg, strategies)
            print(runner.format_report(rows), end="")
        elif args.command == "score":
            print(json.dumps(runner.score(args.trajectory), indent=2))
        elif args.command == "gen-data":
            ds = fdata.generate_synthetic(args.classes, args.dim, args.per_class, args.spread, args.seed)
            if args.out.lower().endswith(".csv"):
                _write_csv(ds, args.out)
            else:
                fdata.save_dataset(ds, args.out)
            print(f"wrote {len(ds)} samples x {ds.dim} features to {args.out}")
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
