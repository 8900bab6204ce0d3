"""Command line entry point: ``run``, ``oracle`` and ``check``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from typing import List, Optional

from .harness import (
    ExperimentConfig,
    analytic_latency,
    emit,
    load_config,
    parse_policy_name,
    prepare_out_dir,
    run_experiment,
    summarize_samples,
    window_rounds,
)
from .middlebox import CensorMode, PolicyError
from .netsim import ConfigurationError

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION = 0, 1, 2

logger = logging.getLogger("quicstep_lab")


class _Parser(argparse.ArgumentParser):
    def error(self, message: str) -> None:
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="quicstep-lab", description="Split-path QUIC circumvention lab")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    run = sub.add_parser("run", help="run an experiment batch and write CSV artifacts")
    run.add_argument("--config", required=True)
    run.add_argument("--trials", type=int)
    run.add_argument("--file-size", type=int)
    run.add_argument("--policy", action="append", choices=["native", "tunnel", "quicstep"])
    run.add_argument("--censor-mode", action="append", type=str.upper, choices=[m.value for m in CensorMode])
    run.add_argument("--seed", type=int)
    run.add_argument("--jitter", type=float, help="per-leg delay jitter in percent")
    run.add_argument("--workers", type=int)
    run.add_argument("--trace", action="store_true")
    run.add_argument("--out", required=True)

    oracle = sub.add_parser("oracle", help="print closed-form completion times")
    oracle.add_argument("--config", required=True)

    check = sub.add_parser("check", help="run the acceptance criteria")
    check.add_argument("--config", required=True)
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if args.trials is not None:
        changes["trials"] = args.trials
    if args.file_size is not None:
        changes["file_size"] = args.file_size
    if args.policy:
        changes["policies"] = tuple(dict.fromkeys(parse_policy_name(p) for p in args.policy))
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.jitter is not None:
        changes["jitter_pct"] = args.jitter
    if args.workers is not None:
        changes["workers"] = args.workers
    if args.trace:
        changes["trace"] = True
    if args.censor_mode:
        try:
            changes["censor"] = dataclasses.replace(
                cfg.censor, modes=frozenset(CensorMode(m) for m in args.censor_mode))
        except PolicyError as exc:
            raise ConfigurationError(str(exc)) from None
    changes["out_dir"] = args.out
    cfg = dataclasses.replace(cfg, **changes)
    cfg.validate()
    return cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    prepare_out_dir(cfg.out_dir)
    result = run_experiment(cfg)
    for path in emit(result, cfg.out_dir):
        logger.info("wrote %s", path)
    print("\n".join(summarize_samples(result)))
    return EXIT_OK


def cmd_oracle(args) -> int:
    cfg = load_config(args.config)
    legs = cfg.legs
    print(f"direct_rtt_us {legs.direct_rtt} tunnel_rtt_us {legs.tunnel_rtt} "
          f"window_rounds {window_rounds(cfg.file_size, cfg.window)} file_size {cfg.file_size}")
    expected = {p: analytic_latency(p, cfg) for p in cfg.policies}
    for policy, value in expected.items():
        print(f"{policy.value} {value}")
    return EXIT_OK


def cmd_check(args) -> int:
    from .acceptance import run_all

    cfg = load_config(args.config)
    results = run_all(cfg)
    for r in results:
        print(r.line())
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} criteria passed")
    return EXIT_VIOLATION if failed else EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handlers = {"run": cmd_run, "oracle": cmd_oracle, "check": cmd_check}
    try:
        return handlers[args.command](args)
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
