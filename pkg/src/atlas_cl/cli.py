"""Command line entry point: ``atlas-cl {generate,run,report,selftest}``."""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import AtlasError
from .experiment import emit_report, generate, load_config, run_experiment
from .objective import METHODS


def _csv_list(kind):
    def parse(text):
        return [kind(x) for x in text.split(",") if x.strip()]
    return parse


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="atlas-cl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log each cell as it runs")
    sub = parser.add_subparsers(dest="verb", required=True)

    def with_config(p):
        p.add_argument("--config", help="YAML or JSON config; omitted keys take defaults")
        p.add_argument("--seed", type=_csv_list(int), help="override seeds, e.g. 7 or 7,8,9")
        p.add_argument("--methods", type=_csv_list(str), help=f"override methods from {','.join(METHODS)}")
        p.add_argument("--out", help="output root (default: out)")
        return p

    with_config(sub.add_parser("generate", help="write benchmark bundles only"))
    with_config(sub.add_parser("run", help="train, fine-tune, evaluate and report"))
    rep = sub.add_parser("report", help="aggregate result.json files into report.{md,csv}")
    rep.add_argument("results_dir", nargs="?", help="directory holding <seed>/<method>/result.json")
    with_config(rep)
    sub.add_parser("selftest", help="oracle and invariant checks")
    return parser


def _config(args):
    cfg = load_config(args.config)
    return cfg.with_overrides(seeds=args.seed, methods=args.methods, out=args.out)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.verb == "selftest":
            from .selftest import run_selftest

            return 0 if run_selftest() else 1
        cfg = _config(args)
        if args.verb == "generate":
            for path in generate(cfg):
                print(path)
            return 0
        if args.verb == "run":
            outcome = run_experiment(cfg)
            if outcome.table is not None:
                print(outcome.table.to_markdown(), end="")
            for (seed, method), msg in sorted(outcome.failures.items()):
                print(f"FAILED seed={seed} method={method}: {msg}", file=sys.stderr)
            print(f"results in {outcome.root}")
            return outcome.exit_code
        table = emit_report(args.results_dir or cfg.root)
        print(table.to_markdown(), end="")
        return 0
    except (AtlasError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
