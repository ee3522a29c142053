#!/usr/bin/env python3
"""Run the two-arm experiment (full pipeline vs no-decomposition/no-correction
baseline) and leave checkpoints, renders, and summary.csv in the run directory."""
from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from cleanfield.ablation import run_ablation
from cleanfield.config import RunConfig, load_config


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", help="JSON run configuration; defaults match the experiment")
    parser.add_argument("--seed", type=int, help="override the config seed")
    parser.add_argument("--out", default="runs/ablation", help="run directory")
    args = parser.parse_args(argv)

    config = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        config = replace(config, seed=args.seed)

    def progress(iteration, breakdown):
        print(f"  iter {iteration}: total {breakdown.total:.5f}", flush=True)

    run_ablation(args.out, config, progress=progress)
    return 0


if __name__ == "__main__":
    sys.exit(main())
