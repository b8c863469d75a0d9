"""Command-line entry point: ``robust-tickets <subcommand>``.

Exit codes: 0 success, 1 usage/configuration error, 2 integrity error,
3 experiment failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ExperimentConfig
from .errors import ConfigurationError, IntegrityError, TicketValidationError

EXIT_OK, EXIT_USAGE, EXIT_INTEGRITY, EXIT_FAILURE = 0, 1, 2, 3


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _load(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    if getattr(args, "output", None):
        cfg.output_dir = args.output
    return cfg


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="robust-tickets", description="Robust lottery-ticket ensembles: prune, attack, evaluate.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(name, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--config", "-c", help="experiment config (JSON)")
        sp.add_argument("--output", "-o", help="override output_dir")
        return sp

    sp = with_config("prune", "train and store robust tickets")
    sp.add_argument("--jobs", "-j", type=int, default=1)
    with_config("validate", "check manifest and mask checksums")
    with_config("transfer-matrix", "pairwise transferability matrix and heatmap")
    with_config("ensemble-eval", "dense / single-structure / dynamic ensemble under EOT, eps sweep")
    sp = sub.add_parser("report", help="collate a run directory into report.md")
    sp.add_argument("run_dir")
    sp = with_config("trend-suite", "multi-seed desk-scale trend checks")
    sp.add_argument("--seeds", type=int, default=5)
    sp.add_argument("--min-passes", type=int, default=4)
    sp.add_argument("--jobs", "-j", type=int, default=1)
    with_config("show-config", "print the resolved config")
    return p


def _run(args) -> int:
    from . import experiments

    if args.command == "report":
        _, missing = experiments.cmd_report(args.run_dir)
        for m in missing:
            print(f"missing: {m}", file=sys.stderr)
        print(f"wrote {args.run_dir}/report.md")
        return EXIT_OK
    cfg = _load(args)
    if args.command == "show-config":
        print(json.dumps(cfg.to_json(), indent=2, sort_keys=True))
        return EXIT_OK
    if args.command == "prune":
        result = experiments.cmd_prune(cfg, jobs=args.jobs)
        print(f"trained {result.trained}, skipped {result.skipped}, failed {len(result.failures)}")
        for f in result.failures:
            print(f"FAILED {f['arch_id']}@{f['remaining_ratio']}: {f['error']}", file=sys.stderr)
        return EXIT_FAILURE if result.failures else EXIT_OK
    if args.command == "validate":
        report = experiments.cmd_validate(cfg)
        print("\n".join(report.lines()))
        return EXIT_OK if report.ok else EXIT_INTEGRITY
    if args.command == "transfer-matrix":
        summary = experiments.cmd_transfer(cfg)
        print(json.dumps({k: summary.get(k) for k in ("same_structure", "cross_structure", "gap")}))
        return EXIT_OK
    if args.command == "ensemble-eval":
        result = experiments.cmd_ensemble_eval(cfg)
        for row in result.table:
            print("{:<6} {:<28} clean={:.4f} robust={:.4f}".format(row[0], row[1], row[2], row[4]))
        return EXIT_OK
    if args.command == "trend-suite":
        from .trend import run_trend_suite

        summary = run_trend_suite(cfg, cfg.output_dir, seeds=args.seeds, min_passes=args.min_passes,
                                  jobs=args.jobs)
        for name, v in summary["verdict"].items():
            print(f"{name}: {v['passes']}/{v['seeds']} seeds -> {'holds' if v['holds'] else 'does not hold'}")
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IntegrityError, TicketValidationError) as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except Exception as exc:  # noqa: BLE001 - any other failure is an experiment failure
        logging.getLogger(__name__).debug("experiment failed", exc_info=True)
        print(f"experiment failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
