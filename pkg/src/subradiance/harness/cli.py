"""Command line entry point: ``subradiance {run,scan,spectrum,validate} CONFIG``.

Exit status is 0 on success, 2 for configuration errors and 3 when a solver
fails or a capacity limit is hit.
"""

from __future__ import annotations

import argparse
import json
import sys

from ..errors import ConfigError, SubradianceError
from . import config as C
from . import runner

EXIT_OK, EXIT_CONFIG, EXIT_SOLVER = 0, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(EXIT_CONFIG)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="subradiance", description="Collective decay simulations of emitter arrays.")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    for verb, text in (("run", "run one experiment"), ("scan", "sweep one or two parameters"),
                       ("spectrum", "compute fluorescence spectra"), ("validate", "check a config file")):
        p = sub.add_parser(verb, help=text)
        p.add_argument("config", help="JSON configuration file")
        if verb != "validate":
            p.add_argument("--out", default="out", metavar="DIR", help="output directory (default: out)")
            p.add_argument("--workers", type=int, default=1, metavar="K", help="worker processes")
            p.add_argument("--seed", type=int, default=None, metavar="S", help="override solver.seed")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = C.load(args.config)
        if args.verb == "validate":
            print(f"{args.config}: ok ({C.n_atoms(cfg)} atoms)")
            return EXIT_OK
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1", "--workers")
        if args.seed is not None and args.seed < 0:
            raise ConfigError("--seed must be non-negative", "--seed")
        verb = {"run": runner.run, "scan": runner.scan, "spectrum": runner.spectrum}[args.verb]
        meta = verb(cfg, args.out, workers=args.workers, seed=args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SubradianceError as exc:
        print(f"solver error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    summary = {k: meta[k] for k in ("summary", "preparation", "points") if k in meta}
    print(json.dumps({"out": str(args.out), "files": meta.get("files", []), **runner._jsonable(summary)}))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
