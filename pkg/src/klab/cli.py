"""Command line entry point: ``klab <experiment> [options]``.

Exit status: 0 when every verdict passes, 2 when any verdict fails,
1 on configuration or runtime errors.
"""

from __future__ import annotations

import argparse
import sys

import yaml

from .config import REGISTRY, ConfigError, default_config, from_mapping, parse_config
from .core import KlabError

EXIT_OK, EXIT_ERROR, EXIT_FAIL = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    # usage errors are configuration errors (exit 1), not failed verdicts (exit 2)
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="klab", description="Run a kinetic transport experiment and write its artifacts.")
    ap.add_argument("experiment", choices=REGISTRY)
    ap.add_argument("--config", metavar="FILE", help="JSON or YAML configuration (defaults are used when omitted)")
    ap.add_argument("--seed", type=int, help="master seed, overrides mc.seed")
    ap.add_argument("--out", metavar="DIR", help="output directory, overrides outputs.dir")
    ap.add_argument("--scheme", default="em", choices=("em", "split", "zvonkin"))
    ap.add_argument("--plot", action="store_true", help="also write PNG plots from the CSV tables")
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    from .experiments import run_experiment

    try:
        if args.config:
            with open(args.config, encoding="utf-8") as fh:
                cfg = load_config(fh.read(), args.experiment)
        else:
            cfg = default_config(args.experiment)
        cfg = cfg.with_overrides(seed=args.seed, out=args.out)
        report = run_experiment(cfg, scheme=args.scheme, plot=args.plot)
    except ConfigError as exc:
        print(f"klab: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (KlabError, OSError) as exc:
        print(f"klab: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    for name, v in sorted(report.verdicts.items()):
        print(f"{'PASS' if v['passed'] else 'FAIL'}  {name}  value={v['value']}  threshold={v['threshold']}")
    print(f"artifacts: {report.out_dir}")
    return EXIT_OK if report.passed else EXIT_FAIL


def load_config(text: str, name: str):
    """Parse a config document; the experiment named on the command line wins."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError:
        return parse_config(text)  # reports the syntax error
    if isinstance(doc, dict):
        doc["name"] = name
        return from_mapping(doc)
    if doc is None:
        return default_config(name)
    return parse_config(text)


if __name__ == "__main__":
    sys.exit(main())
