"""Property suites behind ``ntknas verify``.

Every suite returns a :class:`SuiteResult`; its checks carry a name, a pass
flag and a human-readable detail. Default sizes keep each suite to tens of
seconds; the acceptance tests call the same functions at full size.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .archspace import IMAGE_OPS, VECTOR_OPS, CellSpace, MlpNet, instantiate, unrank
from .data import normalize_rows
from .harness import ScoringSetup, agnostic_experiment, benchmark_data
from .io import default_space
from .ntk import (
    InfeasibleError,
    analytic_ntk_relu_mlp,
    exact_ntk,
    linearization_gap,
    linearized_train,
    mse_trajectory,
    ntk_width_convergence,
    prop1_leading_bound,
    prop2_gap_check,
    stacked_jacobian,
    trace_lower_bounds,
    trace_norm_exact,
)
from .tensor import Tensor

log = logging.getLogger(__name__)

SUITES = ("ntk", "chain", "dynamics", "agnostic", "prop2")


@dataclass
class Check:
    name: str
    passed: bool
    detail: str


@dataclass
class SuiteResult:
    suite: str
    checks: list[Check] = field(default_factory=list)

    def add(self, name: str, passed: bool, detail: str) -> bool:
        self.checks.append(Check(name, bool(passed), detail))
        log.info("%s/%s: %s (%s)", self.suite, name, "ok" if passed else "FAIL", detail)
        return bool(passed)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def first_failure(self) -> Check | None:
        return next((c for c in self.checks if not c.passed), None)


def micro_spaces() -> list[CellSpace]:
    """One vector and one image space over the full catalogs (N=4)."""
    return [
        CellSpace(4, VECTOR_OPS, (16,), 2, 8),
        CellSpace(4, IMAGE_OPS, (6, 6, 2), 3, 4),
    ]


def _space_data(space: CellSpace, m: int, seed: int):
    rng = np.random.default_rng([seed, 11])
    X = normalize_rows(rng.standard_normal((m, space.input_dim)))
    Y = np.eye(space.output_dim)[rng.integers(0, space.output_dim, m)]
    return X, Y


def _random_archs(space: CellSpace, count: int, seed: int):
    rng = np.random.default_rng([seed, 12])
    return [unrank(space, int(r)) for r in rng.integers(0, space.size, count)]


# ---------------------------------------------------------------------------


def trace_identity(n_archs: int = 50, m: int = 8, seed: int = 0, rtol: float = 1e-8) -> SuiteResult:
    """trace of the assembled Gram matrix against the sum of Jacobian norms."""
    res = SuiteResult("ntk")
    spaces = micro_spaces()
    worst, count = 0.0, 0
    for i in range(n_archs):
        space = spaces[i % len(spaces)]
        X, _ = _space_data(space, m, seed + i)
        arch = _random_archs(space, 1, seed + i)[0]
        net = instantiate(space, arch, seed + i)
        a = exact_ntk(net, X).trace
        b = trace_norm_exact(net, X)
        rel = abs(a - b) / a if a > 0 else abs(a - b)
        worst = max(worst, rel)
        count += 1
    res.add("trace_identity", worst < rtol, f"{count} archs, worst relative gap {worst:.2e} (< {rtol:g})")
    return res


def width_convergence(
    widths=(16, 64, 256, 1024), seeds=range(5), m: int = 16, n0: int = 8, depth: int = 2, tol: float = 0.15
) -> SuiteResult:
    res = SuiteResult("ntk")
    X = normalize_rows(np.random.default_rng(3).standard_normal((m, n0)))
    curve = ntk_width_convergence(widths, X, depth, list(seeds))
    devs = [d for _, d in curve]
    inversions = sum(b > a for a, b in zip(devs, devs[1:]))
    detail = ", ".join(f"k={w}: {d:.3f}" for w, d in curve)
    res.add("width_monotone", inversions <= 1, f"{inversions} inversions; {detail}")
    res.add("width_final", devs[-1] < tol, f"deviation at k={curve[-1][0]} is {devs[-1]:.3f} (< {tol})")
    return res


def suite_ntk(quick: bool = True) -> SuiteResult:
    res = trace_identity(n_archs=12 if quick else 50)
    wc = width_convergence(widths=(16, 64, 256) if quick else (16, 64, 256, 1024), seeds=range(3 if quick else 5))
    if quick:
        # the absolute tolerance applies at the largest width only
        wc.checks = [c for c in wc.checks if c.name == "width_monotone"]
    res.checks += wc.checks
    return res


# ---------------------------------------------------------------------------


def inequality_chain(
    n_archs: int = 100, m: int = 12, batch_size: int = 4, seed: int = 0, slack: float = 1e-8,
    loss_kinds=("mse", "ce"), labels: str = "onehot",
) -> SuiteResult:
    """exact >= gamma^-1 sum ||grad L_x||^2 >= gamma^-1 sum_j b_j ||batch grad||^2."""
    res = SuiteResult("chain")
    spaces = micro_spaces()
    violations, total = [], 0
    for i in range(n_archs):
        space = spaces[i % len(spaces)]
        X, Y = _space_data(space, m, seed + i)
        if labels == "uniform":
            Y = np.random.default_rng([seed, i, 13]).uniform(0.0, 1.0, Y.shape)
        net = instantiate(space, _random_archs(space, 1, seed + i)[0], seed + i)
        exact = trace_norm_exact(net, X)
        for kind in loss_kinds:
            if kind == "ce" and labels == "uniform":
                continue
            est = trace_lower_bounds(net, X, Y, kind, batch_size, seed + i, exact=exact)
            total += 1
            if not est.chain_holds(slack):
                violations.append(f"{space.catalog[2]}:{i}:{kind}")
    res.add(
        f"chain_{labels}",
        not violations,
        f"{len(violations)} violations in {total} checks" + (f": {violations[:3]}" if violations else ""),
    )
    return res


def suite_chain(quick: bool = True) -> SuiteResult:
    n = 20 if quick else 100
    res = inequality_chain(n_archs=n)
    res.checks += inequality_chain(n_archs=n // 2, labels="uniform", loss_kinds=("mse",)).checks
    return res


# ---------------------------------------------------------------------------


def _wide_mlp_problem(width: int = 512, m: int = 16, n0: int = 8, seed: int = 0):
    rng = np.random.default_rng([seed, 21])
    X = normalize_rows(rng.standard_normal((m, n0)))
    Y = rng.uniform(0.0, 1.0, (m, 1))
    net = MlpNet(n0, [width], 1, seed=seed)
    return net, X, Y


def closed_form_dynamics(
    width: int = 512, m: int = 16, times=(10, 50, 100), rtol: float = 0.05, seed: int = 0
) -> SuiteResult:
    res = SuiteResult("dynamics")
    net, X, Y = _wide_mlp_problem(width, m, seed=seed)
    J = stacked_jacobian(net, X)
    gram = exact_ntk(net, X)
    eta = 0.5 / gram.lambda_max
    f0 = net.forward(Tensor(X)).data
    closed = mse_trajectory(gram, Y, eta, times, f0=f0).losses
    sim = linearized_train(net, X, Y, eta, max(times), J=J).losses
    worst = max(abs(c - sim[t]) / sim[t] for c, t in zip(closed, times))
    res.add("closed_form", worst < rtol, f"worst relative gap {worst:.2e} at t in {list(times)} (< {rtol})")
    return res


def prop1_bound(width: int = 512, m: int = 16, times=(1, 10), eps: float = 0.1, seed: int = 0) -> SuiteResult:
    res = SuiteResult("dynamics")
    net, X, Y = _wide_mlp_problem(width, m, seed=seed)
    J = stacked_jacobian(net, X)
    gram = exact_ntk(net, X)
    lam_bar = gram.mean_eigenvalue
    worst, checked = -np.inf, 0
    for frac in (0.25, 0.5, 0.9):
        eta = frac / lam_bar
        if eta * gram.lambda_max >= 2:
            # the simulated dynamics diverge; the bound is not about that regime
            continue
        sim = linearized_train(net, X, Y, eta, max(times), J=J).losses
        for t in times:
            worst = max(worst, sim[t] - prop1_leading_bound(gram, eta, m, 1, t))
            checked += 1
    res.add("prop1_bound", checked > 0 and worst <= eps, f"{checked} checks, max(L_t - leading bound) = {worst:.3g} (<= {eps})")
    raised = []
    for frac in (0.999, 1.001, 1.5):
        try:
            prop1_leading_bound(gram, frac / lam_bar, m, 1, 1)
            raised.append(False)
        except InfeasibleError:
            raised.append(True)
    res.add("prop1_feasibility", raised == [False, True, True], f"raised for eta*lambda_bar in (0.999, 1.001, 1.5): {raised}")
    return res


def linearization_width(
    widths=(64, 1024), seeds=range(5), m: int = 16, n0: int = 8, steps: int = 100
) -> SuiteResult:
    res = SuiteResult("dynamics")
    rng = np.random.default_rng(5)
    X = normalize_rows(rng.standard_normal((m, n0)))
    Y = rng.uniform(0.0, 1.0, (m, 1))
    eta = 0.5 / analytic_ntk_relu_mlp(X, 2).lambda_max
    gaps = [float(np.mean([linearization_gap(MlpNet(n0, [w], 1, seed=s), X, Y, eta, steps) for s in seeds])) for w in widths]
    detail = ", ".join(f"k={w}: {g:.4f}" for w, g in zip(widths, gaps))
    res.add("linearization_gap", all(b < a for a, b in zip(gaps, gaps[1:])), detail)
    return res


def suite_dynamics(quick: bool = True) -> SuiteResult:
    res = closed_form_dynamics()
    res.checks += prop1_bound().checks
    res.checks += linearization_width(seeds=range(2 if quick else 5)).checks
    return res


# ---------------------------------------------------------------------------


def suite_agnostic(quick: bool = True, rho_labels: float = 0.9, rho_data: float = 0.8) -> SuiteResult:
    res = SuiteResult("agnostic")
    space = default_space()
    data = benchmark_data(m=128 if quick else 256)
    setup = ScoringSetup(data, batch_size=64)
    for mode, thr in (("random_labels", rho_labels), ("random_data", rho_data)):
        rep = agnostic_experiment(space, setup, mode, seed=1)
        ok = not rep.degenerate and rep.pearson >= thr
        res.add(mode, ok, f"pearson {rep.pearson} over {rep.n} archs (>= {thr})")
    res.checks += inequality_chain(n_archs=10 if quick else 40, labels="uniform", loss_kinds=("mse",)).checks
    return res


# ---------------------------------------------------------------------------


def unit_rows(X: np.ndarray) -> np.ndarray:
    return X / np.linalg.norm(X, axis=1, keepdims=True)


def sparse_directions(rng: np.random.Generator, m: int, n0: int, nnz: int = 4) -> np.ndarray:
    X = np.zeros((m, n0))
    for i in range(m):
        X[i, rng.choice(n0, nnz, replace=False)] = rng.standard_normal(nnz)
    return X


def prop2_trials(trials: int = 20, width: int = 512, depth: int = 3, n0: int = 64, m: int = 16) -> SuiteResult:
    """Normalized trace gap between two input distributions against 2L/n0 (gamma = 1)."""
    res = SuiteResult("prop2")
    worst, bound, fails = 0.0, None, 0
    for s in range(trials):
        rng = np.random.default_rng([s, 31])
        net = MlpNet(n0, [width] * (depth - 1), 1, seed=s)
        P = unit_rows(rng.standard_normal((m, n0)))
        Q = unit_rows(sparse_directions(rng, m, n0))
        gap, bound = prop2_gap_check(net, P, Q, 1.0, depth)
        worst = max(worst, gap)
        fails += gap > bound
    res.add("prop2_gap", fails == 0, f"{fails}/{trials} trials above {bound:.4f}; worst gap {worst:.4f}")
    return res


def suite_prop2(quick: bool = True) -> SuiteResult:
    return prop2_trials(trials=5 if quick else 20)


RUNNERS = {
    "ntk": suite_ntk,
    "chain": suite_chain,
    "dynamics": suite_dynamics,
    "agnostic": suite_agnostic,
    "prop2": suite_prop2,
}


def run_suite(name: str, quick: bool = True) -> SuiteResult:
    if name not in RUNNERS:
        raise KeyError(name)
    return RUNNERS[name](quick)
