#!/usr/bin/env python3
"""Measure the style/fog gap decomposition before and after style adaptation."""

import argparse
import logging
import sys
from pathlib import Path

from cudanet.ablation import run_motivation
from cudanet.config import load_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/motivation.yaml")
    ap.add_argument("--set", dest="sets", action="append", default=[])
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config, sets=args.sets, seed=args.seed, out_dir=args.out)
    res = run_motivation(cfg, Path(cfg.out_dir))
    b, a = res["before"], res["after"]
    print(f"style gap: {b.gap_style:+.4f} -> {a.gap_style:+.4f}")
    print(f"  fog gap: {b.gap_fog:+.4f} -> {a.gap_fog:+.4f}")
    print(f" dual gap: {b.gap_dual:+.4f} -> {a.gap_dual:+.4f}")
    print(f"({res['elapsed_seconds']:.0f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
