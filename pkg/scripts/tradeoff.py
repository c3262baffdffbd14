"""Binned test error against approximate trace on the cached benchmark, plus
how each proxy score ranks against test error.

    python scripts/tradeoff.py [--bins 4]
"""
import argparse
from pathlib import Path

from ntknas.archspace import enumerate_space
from ntknas.harness import SCORE_M, ScoringSetup, benchmark_data, correlation, ground_truth_cache, score_cache, tradeoff_curve
from ntknas.io import default_space

ap = argparse.ArgumentParser()
ap.add_argument("--bins", type=int, default=4)
args = ap.parse_args()

root = Path(__file__).resolve().parents[1] / "benchmarks"
space = default_space()
scores = score_cache(root / "scores.jsonl", space, ScoringSetup(benchmark_data(SCORE_M)))
gt = ground_truth_cache(root / "ground_truth.jsonl", space)
keys = [a.key() for a in enumerate_space(space)]
err = [gt.get(k)["test_error"] for k in keys]

curve = tradeoff_curve([scores.get(k)["trace_approx"] for k in keys], err, bins=args.bins)
print("bin  count  mean trace  test error")
for i, b in enumerate(curve.bins):
    mark = "  <- min" if i == curve.argmin else ""
    print(f"{i:>3}  {b.count:>5}  {b.trace_mean:10.3e}  {b.error_mean:.3f} +- {b.error_std:.3f}{mark}")
print(f"interior minimum: {curve.interior_minimum}")

print("\nspearman with test error")
for col in ("trace_exact", "trace_approx", "snip", "synflow", "params"):
    print(f"  {col:13s} {correlation([scores.get(k)[col] for k in keys], err).spearman:+.3f}")
