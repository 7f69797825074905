"""Command-line entry point: ``dsd {train,dsd,llr,compare,report}``.

Exit codes: 0 success, 1 config error, 2 runtime/numeric error,
3 fairness-guard error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import harness
from .config import load_config
from .errors import ConfigError, DSDError

log = logging.getLogger("dsd")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dsd", description="Dense-sparse-dense training experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="-v for info, -vv for per-epoch logs")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, help_, harness_opts=False, checkpoint=False):
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", required=True, type=Path, help="experiment config (.toml or .json)")
        s.add_argument("--out", type=Path, help="output directory (default: harness.output_dir)")
        s.add_argument("--seed", type=int, help="override the config seed(s)")
        if checkpoint:
            s.add_argument("--from-checkpoint", type=Path, help="start from a converged dense checkpoint")
        if harness_opts:
            s.add_argument("--jobs", type=int, default=1, help="seeds run in parallel (default 1)")
        return s

    add("train", "dense training to convergence")
    add("dsd", "full dense-sparse-dense plan", checkpoint=True)
    add("llr", "lower-the-learning-rate control run", checkpoint=True)
    add("compare", "multi-seed DSD vs LLR from one baseline", harness_opts=True, checkpoint=True)
    r = sub.add_parser("report", help="regenerate histograms and summary for a run directory")
    r.add_argument("run_dir", type=Path)
    return p


def _run(args) -> int:
    if args.command == "report":
        for out in harness.cmd_report(args.run_dir):
            print(f"wrote {out}")
        return 0

    cfg = load_config(args.config)
    out = args.out or Path(cfg.harness.output_dir)
    seed = args.seed if args.seed is not None else cfg.harness.seeds[0]
    ckpt = getattr(args, "from_checkpoint", None)
    if ckpt is not None and not ckpt.exists():
        raise ConfigError(f"--from-checkpoint: file not found: {ckpt}")

    if args.command == "train":
        rec = harness.cmd_train(cfg, out, seed)
        print(f"dense: {rec.epochs} epochs, test error {rec.test_err:.4f}")
    elif args.command == "dsd":
        rec = harness.cmd_dsd(cfg, out, seed, ckpt)
        print(f"dsd: {len(rec.phases)} phases, test error {rec.start_test_err:.4f} -> {rec.test_err:.4f}")
    elif args.command == "llr":
        rec = harness.cmd_llr(cfg, out, seed, ckpt)
        print(f"llr: {rec.epochs} epochs, test error {rec.start_test_err:.4f} -> {rec.test_err:.4f}")
    elif args.command == "compare":
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        seeds = [args.seed] if args.seed is not None else None
        report, _, _ = harness.cmd_compare(cfg, out, seeds, args.jobs, ckpt)
        print(report.render(), end="")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = {0: logging.WARNING, 1: logging.INFO}.get(args.verbose, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except DSDError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except (OSError, ArithmeticError, ValueError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
