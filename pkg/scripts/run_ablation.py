#!/usr/bin/env python3
"""Run the full pipeline ablation and print one mIoU per arm."""

import argparse
import logging
import sys
from pathlib import Path

from cudanet.ablation import ABLATION_ARMS, run_ablation
from cudanet.config import load_config


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--config", default="configs/desk64.yaml")
    ap.add_argument("--set", dest="sets", action="append", default=[])
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--out", default=None)
    args = ap.parse_args()

    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    cfg = load_config(args.config, sets=args.sets, seed=args.seed, out_dir=args.out)
    results = run_ablation(cfg, Path(cfg.out_dir) / "ablation")
    for arm in ABLATION_ARMS:
        print(f"{arm:>14}: {results[arm]:.4f}")
    print(f"(source-only on s: {results['source_only_on_s']:.4f}; "
          f"{results['elapsed_seconds']:.0f}s)")
    return 0


if __name__ == "__main__":
    sys.exit(main())
