"""Place the search's selections in the cached ground-truth ranking.

    python scripts/search_benchmark.py [--seeds 5] [--nu-policy fixed] [--mu 2]
"""
import argparse

from ntknas.harness import benchmark_split, search_effectiveness
from ntknas.io import default_space, read_jsonl

ap = argparse.ArgumentParser()
ap.add_argument("--seeds", type=int, default=5)
ap.add_argument("--nu-policy", default="adaptive")
ap.add_argument("--mu", type=float)
ap.add_argument("--ground-truth", default="benchmarks/ground_truth.jsonl")
args = ap.parse_args()

errors = {r["arch"]: r["test_error"] for r in read_jsonl(args.ground_truth)[1:]}
train, _ = benchmark_split()
cfg = {"nu_policy": args.nu_policy, "mu": args.mu}
hits = 0
for o in search_effectiveness(default_space(), train, errors, range(args.seeds), cfg):
    hits += o.top
    print(f"seed {o.seed}: {o.arch}  error {o.test_error:.3f}  {o.better} better  {'top-25%' if o.top else ''}  {o.seconds:.1f}s")
print(f"{hits}/{args.seeds} selections in the top 25%")
