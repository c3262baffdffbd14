"""Correlate approximate trace scores on true data with scores under random
labels and under random inputs, over every architecture of the default space.

    python scripts/agnostic.py [--m 256] [--batch-size 64]
"""
import argparse

from ntknas.harness import ScoringSetup, agnostic_experiment, benchmark_data
from ntknas.io import default_space

ap = argparse.ArgumentParser()
ap.add_argument("--m", type=int, default=256)
ap.add_argument("--batch-size", type=int, default=64)
ap.add_argument("--seed", type=int, default=1)
args = ap.parse_args()

setup = ScoringSetup(benchmark_data(args.m), batch_size=args.batch_size)
for mode in ("random_labels", "random_data"):
    r = agnostic_experiment(default_space(), setup, mode, args.seed)
    print(f"{mode:14s} pearson {r.pearson:.3f}  spearman {r.spearman:.3f}  kendall {r.kendall:.3f}  (n={r.n})")
