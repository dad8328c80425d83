"""Command-line entry point: ``pli-lab {prepare-data,run,report,selftest}``."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields

from pli_lab.errors import ConfigurationError, CorpusError, PLIError
from pli_lab.harness.config import ExperimentConfig
from pli_lab.harness import pipeline

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors reported as validation failures (exit code 1)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat TOML experiment file")
    group = p.add_argument_group("config overrides (one flag per config key; lists are comma-separated)")
    for f in fields(ExperimentConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None, metavar=f.name.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pli-lab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, text in (("prepare-data", "build and export the private/public partition for every seed"),
                       ("run", "run the federation with attacker hooks and write metrics")):
        _add_config_flags(sub.add_parser(name, help=text))
    rep = sub.add_parser("report", help="aggregate completed runs into a table and trade-off plot")
    rep.add_argument("runs", nargs="+", help="run output directories")
    rep.add_argument("--out", default="report", help="output directory")
    sub.add_parser("selftest", help="run the built-in invariant checks")
    return parser


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    updates = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)}
    return cfg.override(updates)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "selftest":
            from pli_lab.harness.selftest import run_selftest
            return EXIT_OK if run_selftest() else EXIT_RUNTIME
        if args.command == "report":
            table = pipeline.report(args.runs, args.out)
            print(f"wrote {len(table)} rows to {args.out}/report.csv")
            return EXIT_OK
        cfg = load_config(args)
        if args.command == "prepare-data":
            for path in pipeline.prepare(cfg):
                print(f"split written to {path}")
        else:
            reports = pipeline.run(cfg)
            for r in reports:
                c = r.config
                print(f"seed {c['seed']} {c['scheme']} tau={c['tau']} gamma={c['gamma']} {c['mode']}: "
                      f"accuracy {r.accuracy:.3f} ({r.num_success}/{r.num_targets}), ssim {r.mean_ssim:.3f}")
        return EXIT_OK
    except (ConfigurationError, CorpusError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PLIError as exc:
        print(f"runtime error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
