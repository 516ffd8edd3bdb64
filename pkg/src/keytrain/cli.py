"""Command line entry point: ``keytrain {sweep,pilots,converge,validate}``."""

from __future__ import annotations

import argparse
import logging
import sys

from . import bench
from .errors import KeytrainError

log = logging.getLogger("keytrain")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="keytrain", description="Downlink training design experiments for secret-key generation.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {
        "sweep": "average capacity vs DL SNR for each strategy",
        "pilots": "pilot count vs DL SNR for each strategy",
        "converge": "coherence and optimal-vs-large-antenna gap as M grows",
        "validate": "cross-check analytic capacities against Monte Carlo",
    }
    for name, text in helps.items():
        s = sub.add_parser(name, help=text, description=text)
        s.add_argument("--config", required=True, help="scenario YAML file")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        if name in ("sweep", "pilots"):
            s.add_argument("--jobs", type=int, default=1, help="worker processes for sweep points")
    return p


def run(args: argparse.Namespace) -> int:
    cfg = bench.load_config(args.config).with_seed(args.seed)
    if args.command in ("sweep", "pilots"):
        runner = bench.run_capacity_sweep if args.command == "sweep" else bench.run_pilot_sweep
        rows = runner(cfg, jobs=max(1, args.jobs))
        paths = bench.emit_outputs(rows, args.out, cfg)
    elif args.command == "converge":
        paths = bench.emit_convergence(bench.run_large_antenna_convergence(cfg), args.out, cfg)
    else:
        rows = bench.run_validation(cfg)
        paths = bench.emit_validation(rows, args.out, cfg)
        bad = [r for r in rows if not r.ok]
        for r in bad:
            log.error("validation failed: %g dB, %s, user %d (woodbury %.12g, determinant %.12g, "
                      "z %.2f)", r.dl_snr_db, r.strategy, r.user, r.woodbury_bits,
                      r.determinant_bits, r.z_score)
        if bad:
            return 1
    for p in paths:
        log.info("wrote %s", p)
    return 0


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return run(args)
    except (KeytrainError, OSError) as exc:
        print(f"keytrain: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
