"""Command line: ``nullnet train|attack|serve-oracle|evaluate``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import load_config
from .errors import (ConfigError, ConsistencyError, DimensionError, FormatError, NumericError,
                     ServiceError, TransportError)

log = logging.getLogger("nullnet")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRANSPORT = 4
EXIT_SERVICE = 5
EXIT_NUMERIC = 6


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nullnet", description="Train, attack and evaluate "
                                "classifiers with a NULL output against transfer attacks.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, text in [("train", "train a target classifier and write its checkpoint"),
                       ("attack", "train a substitute, build transfer sets, score them"),
                       ("serve-oracle", "serve a checkpoint over the JSON-lines protocol"),
                       ("evaluate", "score a target on test data and saved transfer sets")]:
        sp = sub.add_parser(name, help=text)
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--oracle", metavar="HOST:PORT", help="query a remote oracle")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override one config key (repeatable)")
        sp.add_argument("-v", "--verbose", action="store_true")
        if name == "serve-oracle":
            sp.add_argument("--port", type=int, help="listen port (0 picks a free one)")
            sp.add_argument("--checkpoint", help="checkpoint to serve")
    return p


def _overrides(args) -> dict:
    ov: dict = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"{key}: --set expects KEY=VALUE")
        ov[key.strip()] = value.strip()
    if args.seed is not None:
        ov["seed"] = args.seed
    if args.out is not None:
        ov["out"] = args.out
    if args.oracle is not None:
        ov["oracle"] = args.oracle
    if getattr(args, "port", None) is not None:
        ov["port"] = args.port
    if getattr(args, "checkpoint", None) is not None:
        ov["target_checkpoint"] = args.checkpoint
    return ov


def serve(cfg) -> None:
    from .nn import load_checkpoint
    from .protocol import OracleServer

    if not cfg.target_checkpoint:
        raise ConfigError("target_checkpoint: needed to serve an oracle")
    try:
        clf = load_checkpoint(cfg.target_checkpoint)
    except OSError as exc:
        raise ConfigError(f"target_checkpoint: cannot read {cfg.target_checkpoint}: "
                          f"{exc.strerror}") from None
    server = OracleServer(clf, cfg.host, cfg.port)
    host, port = server.start()
    print(f"serving {cfg.target_checkpoint} on {host}:{port}", flush=True)
    try:
        server.wait()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
        log.info("oracle stopped; query_count=%d", server.query_count)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    from . import experiments

    try:
        cfg = load_config(args.config, _overrides(args))
        if args.command == "train":
            res = experiments.cmd_train(cfg)
            print(f"test_accuracy {res['test_accuracy']:.4f} -> {res['checkpoint']}")
        elif args.command == "attack":
            outcome = experiments.cmd_attack(cfg)
            for rep in outcome.reports:
                if rep.metric_name.endswith("transferability_rate"):
                    per = " ".join(f"{e:g}:{rep.at(e):.3f}" for e in sorted(rep.breakdown))
                    print(f"{rep.metric_name} {per}")
            print(f"oracle_queries {outcome.adversary_queries}")
        elif args.command == "evaluate":
            for row in experiments.cmd_evaluate(cfg):
                if row[1] == "all":
                    print(f"{row[0]} {row[4]:.4f}")
        else:
            serve(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (FormatError, ConsistencyError, DimensionError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TransportError as exc:
        print(f"transport error: {exc}", file=sys.stderr)
        return EXIT_TRANSPORT
    except ServiceError as exc:
        print(f"service error: {exc}", file=sys.stderr)
        return EXIT_SERVICE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def main() -> None:
    sys.exit(run())
