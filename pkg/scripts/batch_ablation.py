"""How well the minibatch trace estimate tracks the exact trace as the batch
size changes. Exact traces come from benchmarks/scores.jsonl.

    python scripts/batch_ablation.py [--sizes 4 8 16 32 64] [--loss mse]
"""
import argparse
from pathlib import Path

from ntknas.archspace import enumerate_space
from ntknas.harness import SCORE_M, ScoringSetup, approx_scores, benchmark_data, correlation, score_cache
from ntknas.io import default_space

ap = argparse.ArgumentParser()
ap.add_argument("--sizes", type=int, nargs="+", default=[4, 8, 16, 32, 64])
ap.add_argument("--loss", choices=("mse", "ce"), default="mse")
args = ap.parse_args()

space = default_space()
data = benchmark_data(SCORE_M)
cache = score_cache(Path(__file__).resolve().parents[1] / "benchmarks" / "scores.jsonl", space, ScoringSetup(data))
archs = enumerate_space(space)
exact = [cache.get(a.key())["trace_exact"] for a in archs]
print(f"{'b':>4}  pearson  spearman  kendall")
for b in args.sizes:
    r = correlation(approx_scores(space, data, ScoringSetup(data, batch_size=b, loss_kind=args.loss), archs), exact)
    print(f"{b:>4}  {r.pearson:7.3f}  {r.spearman:8.3f}  {r.kendall:7.3f}")
