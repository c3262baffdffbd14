"""Build (or verify) the exhaustive micro-benchmark caches under benchmarks/.

    python scripts/build_benchmark.py            # fill missing records
    python scripts/build_benchmark.py --verify 8 # also retrain 8 cached archs
"""
import argparse
import logging
import time
from pathlib import Path

import numpy as np

from ntknas.archspace import ArchId, enumerate_space
from ntknas.harness import (
    BENCH_SCORERS,
    SCORE_M,
    ScoringSetup,
    TrainConfig,
    benchmark_data,
    benchmark_split,
    ground_truth_cache,
    score_arch,
    score_cache,
    train_all,
)
from ntknas.io import default_space, save_space

ROOT = Path(__file__).resolve().parents[1] / "benchmarks"


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--verify", type=int, default=0)
    args = ap.parse_args()
    logging.basicConfig(level="INFO", format="%(message)s")
    space = default_space()
    save_space(space, ROOT / "space.json")

    t0 = time.perf_counter()
    setup = ScoringSetup(benchmark_data(SCORE_M))
    scores = score_cache(ROOT / "scores.jsonl", space, setup)
    for a in enumerate_space(space):
        if a.key() not in scores:
            scores.add(score_arch(space, a, setup, BENCH_SCORERS))
    print(f"scores: {len(scores)} records ({time.perf_counter() - t0:.0f}s)")

    t0 = time.perf_counter()
    train, test = benchmark_split()
    gt = ground_truth_cache(ROOT / "ground_truth.jsonl", space)
    known = len(gt)
    train_all(space, train, test, TrainConfig(), gt, progress=lambda i, n: print(f"  trained {i}/{n}") if i % 16 == 0 else None)
    print(f"ground truth: {len(gt)} records ({time.perf_counter() - t0:.0f}s)")

    if args.verify and known:
        rng = np.random.default_rng(1)
        keys = rng.choice(sorted(gt.records), size=args.verify, replace=False)
        for k in keys:
            a = ArchId.parse(str(k))
            gt.check(train_all(space, train, test, TrainConfig(), None, [a])[0])
            scores.check(score_arch(space, a, setup, BENCH_SCORERS))
        print(f"verified {len(keys)} cached architectures")


if __name__ == "__main__":
    main()
