"""Acceptance gate: one test per criterion, each run at its stated size and
tolerance. Every criterion prints a PASS/FAIL line, collected into the
terminal summary. Run directly (``python tests/test_acceptance.py``) to get
just those lines.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from ntknas import verify
from ntknas.archspace import ArchId, enumerate_space, instantiate
from ntknas.cli import main as cli_main
from ntknas.harness import (
    SCORE_M,
    ScoringSetup,
    TrainConfig,
    approx_scores,
    benchmark_data,
    benchmark_split,
    correlation,
    ground_truth_cache,
    score_arch,
    score_cache,
    search_effectiveness,
    tradeoff_curve,
    train_all,
)
from ntknas.io import default_space, read_json, read_jsonl
from ntknas.search import delta_star, nu_adaptive_step

ROOT = Path(__file__).resolve().parents[1]
BENCH = ROOT / "benchmarks"
GOLDEN = Path(__file__).parent / "golden" / "cli_search"


def report(n: int, title: str, passed: bool, detail: str, t0: float) -> None:
    line = f"{'PASS' if passed else 'FAIL'}  C{n:<2} {title}: {detail} ({time.perf_counter() - t0:.1f}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert passed, line


def suite_report(n: int, title: str, res, t0: float) -> None:
    detail = "; ".join(f"{c.name}: {c.detail}" for c in res.checks)
    report(n, title, res.passed, detail, t0)


@pytest.fixture(scope="module")
def space():
    return default_space()


@pytest.fixture(scope="module")
def scores(space):
    return score_cache(BENCH / "scores.jsonl", space, ScoringSetup(benchmark_data(SCORE_M)))


@pytest.fixture(scope="module")
def ground_truth(space):
    return ground_truth_cache(BENCH / "ground_truth.jsonl", space)


# ---------------------------------------------------------------------------


def test_c01_trace_identity():
    t0 = time.perf_counter()
    suite_report(1, "trace identity, 50 archs, rtol 1e-8", verify.trace_identity(n_archs=50, rtol=1e-8), t0)


def test_c02_inequality_chain():
    t0 = time.perf_counter()
    res = verify.inequality_chain(n_archs=100, slack=1e-8, loss_kinds=("mse", "ce"))
    suite_report(2, "bound chain, 100 archs, MSE and CE", res, t0)


def test_c03_closed_form_dynamics():
    t0 = time.perf_counter()
    res = verify.closed_form_dynamics(width=512, m=16, times=(10, 50, 100), rtol=0.05)
    suite_report(3, "closed-form MSE loss vs simulation within 5%", res, t0)


def test_c04_leading_bound():
    t0 = time.perf_counter()
    res = verify.prop1_bound(width=512, m=16, times=(1, 10), eps=0.1)
    suite_report(4, "leading bound + 0.1 and feasibility iff eta*lambda < 1", res, t0)


def test_c05_width_convergence():
    t0 = time.perf_counter()
    res = verify.width_convergence(widths=(16, 64, 256, 1024), seeds=range(5), tol=0.15)
    suite_report(5, "empirical kernel -> arc-cosine kernel", res, t0)


def test_c06_linearization_gap():
    t0 = time.perf_counter()
    res = verify.linearization_width(widths=(64, 1024), seeds=range(5), steps=100)
    suite_report(6, "linearization gap shrinks 64 -> 1024", res, t0)


def test_c07_approximation_quality(space, scores):
    t0 = time.perf_counter()
    archs = enumerate_space(space)
    assert len(archs) == 96
    data = benchmark_data(SCORE_M)
    setup = ScoringSetup(data)
    # spot-check the cache against fresh computation before trusting it
    rng = np.random.default_rng(7)
    for k in rng.choice(len(archs), 4, replace=False):
        scores.check(score_arch(space, archs[k], setup, ["exact", "approx"]))
    keys = [a.key() for a in archs]
    exact = [scores.get(k)["trace_exact"] for k in keys]
    rho64 = correlation([scores.get(k)["trace_approx"] for k in keys], exact).pearson
    b4 = approx_scores(space, data, ScoringSetup(data, batch_size=4), archs)
    rho4 = correlation(b4, exact).pearson
    ok = rho64 is not None and rho4 is not None and rho64 >= 0.6 and rho64 >= rho4 - 0.05
    report(7, "approx vs exact trace, 96 archs", ok, f"pearson b=64 {rho64:.3f} (>= 0.6), b=4 {rho4:.3f}", t0)


def test_c08_agnosticism():
    t0 = time.perf_counter()
    res = verify.suite_agnostic(quick=False, rho_labels=0.9, rho_data=0.8)
    suite_report(8, "random labels >= 0.9, random data >= 0.8", res, t0)


def test_c09_distribution_gap_bound():
    t0 = time.perf_counter()
    res = verify.prop2_trials(trials=20, width=512, depth=3, n0=64)
    suite_report(9, "normalized trace gap <= 2L/n0, 20 trials", res, t0)


def test_c10_search_effectiveness(space, ground_truth):
    t0 = time.perf_counter()
    assert len(ground_truth) == 96
    train, test = benchmark_split()
    rng = np.random.default_rng(3)
    for key in rng.choice(sorted(ground_truth.records), 2, replace=False):
        ground_truth.check(train_all(space, train, test, TrainConfig(), None, [ArchId.parse(str(key))])[0])
    errors = {k: r["test_error"] for k, r in ground_truth.records.items()}
    outcomes = search_effectiveness(space, train, errors, range(5))
    hits = sum(o.top for o in outcomes)
    slowest = max(o.seconds for o in outcomes)
    picks = ", ".join(f"{o.arch}({o.better} better)" for o in outcomes)
    ok = hits >= 4 and slowest < 30
    report(10, "search selection in top 25%", ok, f"{hits}/5 seeds [{picks}], slowest {slowest:.1f}s", t0)


def test_c11_tradeoff_curve(space, scores, ground_truth):
    t0 = time.perf_counter()
    keys = [a.key() for a in enumerate_space(space)]
    curve = tradeoff_curve([scores.get(k)["trace_approx"] for k in keys], [ground_truth.get(k)["test_error"] for k in keys], bins=4)
    means = " / ".join(f"{b.error_mean:.3f}" for b in curve.bins)
    ok = len(curve.bins) == 4 and curve.interior_minimum
    report(11, "interior argmin of binned error", ok, f"bin errors {means}, argmin {curve.argmin}", t0)


def test_c12_optimizer_contracts(tmp_path):
    t0 = time.perf_counter()
    problems = []
    d = delta_star([np.array([1.0, 0.0]), np.array([0.0, 2.0])], 1.0)
    if not np.allclose(d, [0.5, 0.5], rtol=0, atol=1e-15):
        problems.append(f"hand example gave {d}")
    rng = np.random.default_rng(0)
    for _ in range(200):
        G = list(rng.standard_normal((int(rng.integers(1, 20)), 6)) * rng.exponential(1.0, (1, 6)))
        xi = float(rng.uniform(0.1, 3))
        if np.linalg.norm(delta_star(G, xi)) > xi * (1 + 1e-12):
            problems.append("norm bound")
            break
    hist = [4.0, 9.0, 2.0, 7.0]
    for t in range(1, len(hist) + 2):
        want = (500.0 + sum(hist[: t - 1])) / t
        if not math.isclose(nu_adaptive_step(500.0, hist[: t - 1]), want, rel_tol=1e-15):
            problems.append(f"adaptive nu at t={t}")

    data = tmp_path / "data"
    assert cli_main(["gen-data", "--kind", "image_patches", "--m", "128", "--seed", "0", "--param", "color_shift=0.1", "--out", str(data)]) == 0
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert cli_main(["search", "--data", str(data), "--config", str(GOLDEN / "config.json"), "--out", str(out)]) == 0
        if (out / "selected.json").read_bytes() != (GOLDEN / "selected.json").read_bytes():
            problems.append(f"run {k}: selected.json differs from golden")
        got, want = read_jsonl(out / "run.jsonl"), read_jsonl(GOLDEN / "run.jsonl")
        for g, w in ((got[0], want[0]), (got[-1], want[-1])):
            g.get("config", {}).pop("data", None), w.get("config", {}).pop("data", None)
            g.pop("wall_clock", None), w.pop("wall_clock", None)
        if got != want:
            problems.append(f"run {k}: run.jsonl differs from golden")
        steps = [r for r in got if r["type"] == "step"]
        if any(s["running_max"] < p["running_max"] for p, s in zip(steps, steps[1:])):
            problems.append("running max decreased")
    sel = read_json(GOLDEN / "selected.json")
    detail = "; ".join(problems) if problems else f"hand example, norm bound, adaptive nu, golden search {sel['arch']}"
    report(12, "optimizer contracts and golden files", not problems, detail, t0)


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-s"]))
