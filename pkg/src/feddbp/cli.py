"""Command-line front end.

Exit codes: 0 success, 1 failed verification, 2 configuration error,
3 data error, 4 training divergence, 5 protocol/codec error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import VARIANTS, dump_config, parse_config
from .errors import ConfigError, DataError, ProtocolError, TrainingError

EXIT_OK = 0
EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_DIVERGED = 4
EXIT_PROTOCOL = 5

logger = logging.getLogger("feddbp")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-c", "--config", help="YAML run config")
    p.add_argument("--profile", choices=("reference", "desk"), help="preset applied under the config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, e.g. --set loss.tau=0.1 (repeatable)")
    p.add_argument("--alpha", type=float, help="Dirichlet concentration")
    p.add_argument("--epochs", type=int, help="local epochs per round")
    p.add_argument("--rounds", type=int, help="communication rounds")
    p.add_argument("--clients", type=int, help="number of clients")
    p.add_argument("--variant", choices=VARIANTS)
    p.add_argument("--seeds", help="comma-separated run seeds, e.g. 0,1,2")
    p.add_argument("--workers", type=int, help="parallel workers")
    p.add_argument("-o", "--output-dir", help="output directory (env FEDDBP_OUTPUT_DIR)")
    p.add_argument("-v", "--verbose", action="count", default=0)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="feddbp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_ in (("run", "run one experiment (all configured seeds)"),
                        ("sweep-alpha", "repeat the experiment over sweep.alphas"),
                        ("sweep-epochs", "repeat the experiment over sweep.epochs"),
                        ("ablate", "run every variant and write one summary row each")):
        _common(sub.add_parser(name, help=help_))
    v = sub.add_parser("verify", help="run the property suite and print pass/fail per property")
    _common(v)
    v.add_argument("--full", action="store_true", help="include the slow desk-profile run checks")
    d = sub.add_parser("show-config", help="print the effective configuration")
    _common(d)
    return parser


def config_from_args(args):
    overrides = {}
    for item in args.overrides:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[key.strip()] = value
    named = {"partition.alpha": args.alpha, "training.epochs": args.epochs, "training.rounds": args.rounds,
             "partition.num_clients": args.clients, "variant": args.variant, "workers": args.workers,
             "output_dir": args.output_dir}
    overrides.update({k: v for k, v in named.items() if v is not None})
    if args.seeds:
        try:
            overrides["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError:
            raise ConfigError(f"seeds: cannot parse {args.seeds!r}") from None
    return parse_config(args.config, overrides, args.profile)


def _dispatch(args) -> int:
    from . import evaluation, verify

    if args.command == "verify":
        results = verify.run_checks(include_slow=args.full)
        failed = [r.name for r in results if not r.passed]
        print(f"{len(results) - len(failed)}/{len(results)} properties passed")
        return EXIT_VERIFY_FAILED if failed else EXIT_OK

    cfg = config_from_args(args)
    if args.command == "show-config":
        sys.stdout.write(dump_config(cfg))
        return EXIT_OK
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.yaml"), "w") as fh:
        fh.write(dump_config(cfg))

    if args.command == "run":
        res = evaluation.run_experiment(cfg, out_dir=out)
        rows = [res.summary_row()]
    elif args.command == "sweep-alpha":
        rows = evaluation.sweep_alpha(cfg, out_dir=out)
    elif args.command == "sweep-epochs":
        rows = evaluation.sweep_epochs(cfg, out_dir=out)
    else:
        rows = [r.summary_row() for r in evaluation.ablate(cfg, out_dir=out)]
    for row in rows:
        key = ", ".join(f"{k}={row[k]}" for k in ("alpha", "epochs") if k in row)
        print(f"{row['variant']:>20} {key:>12}  final acc {row['mean_final_accuracy']:.4f} "
              f"+- {row['std_final_accuracy']:.4f} over {row['seeds']} seed(s)")
    print(f"outputs written to {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ProtocolError as exc:
        print(f"protocol error: {exc}", file=sys.stderr)
        return EXIT_PROTOCOL


if __name__ == "__main__":
    sys.exit(main())
