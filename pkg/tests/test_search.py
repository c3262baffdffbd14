import json
import math
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy.stats import spearmanr

from conftest import finite_diff
from ntknas.archspace import (
    VECTOR_OPS,
    AlphaParams,
    CellSpace,
    enumerate_space,
    gumbel_draw,
    instantiate,
    instantiate_supernet,
    log_prob,
    sample_architecture,
)
from ntknas.data import gen_dataset
from ntknas.ntk import minibatch_trace
from ntknas.search import (
    DegenerateSearch,
    PenaltyConfig,
    SearchState,
    default_mu,
    delta_star,
    grad_alpha_R,
    nasi_search,
    nu_adaptive_step,
    nu_fixed,
    objective_R,
    objective_value,
    relaxed_trace,
)
from ntknas.tensor import ContractError

GOLDEN = Path(__file__).parent / "golden"
SPACE = CellSpace(4, VECTOR_OPS, (8,), 2, 8)


@pytest.fixture(scope="module")
def blobs():
    return gen_dataset("blobs", 256, seed=0, n0=8)


# ---------------------------------------------------------------------------
# objective


@pytest.mark.parametrize("trace, nu, mu, expected", [(5, 10, 7, 5), (15, 10, 2, 5), (10, 10, 3, 10), (10, 10, 0, 10)])
def test_objective_examples(trace, nu, mu, expected):
    assert objective_value(trace, mu, nu) == expected


def test_objective_on_instance(blobs):
    net = instantiate(SPACE, enumerate_space(SPACE)[50], 0)
    tr = minibatch_trace(net, blobs.X[:16], blobs.Y[:16], "mse")
    assert objective_R(net, blobs.X[:16], blobs.Y[:16], 2.0, tr / 2) == pytest.approx(tr - 2 * (tr / 2))
    with pytest.raises(ContractError):
        objective_R(net, blobs.X[:0], blobs.Y[:0], 1.0, 1.0)


def test_config_validation_and_round_trip():
    for bad in (dict(mu=-1), dict(nu0=0.0), dict(T=0), dict(b=0), dict(nu_policy="x"), dict(normalizer="x")):
        with pytest.raises(ContractError):
            PenaltyConfig(**bad)
    cfg = PenaltyConfig(nu0=math.inf, mu=0.0, T=7)
    assert PenaltyConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
    with pytest.raises(ContractError):
        PenaltyConfig.from_dict({"bogus": 1})


def test_default_mu_follows_space_complexity():
    assert default_mu(SPACE) == 1.0
    assert default_mu(CellSpace(4, VECTOR_OPS, (8,), 2, 8, complexity="large")) == 2.0


# ---------------------------------------------------------------------------
# delta star


def test_delta_star_hand_example():
    np.testing.assert_allclose(delta_star([np.array([1.0, 0.0]), np.array([0.0, 2.0])], 1.0), [0.5, 0.5])


def test_delta_star_single_and_identical():
    g = np.array([3.0, -4.0])
    np.testing.assert_allclose(delta_star([g], 2.0), 2.0 * g / 5.0)
    np.testing.assert_allclose(delta_star([g] * 9, 1.0), g / 5.0)


def test_delta_star_degenerate():
    with pytest.raises(DegenerateSearch):
        delta_star([np.zeros(3), np.zeros(3)])
    with pytest.raises(DegenerateSearch):
        delta_star([np.zeros(3)], normalizer="mean_norm")


def test_delta_star_mean_norm_variant():
    G = [np.array([1.0, 0.0]), np.array([0.0, 3.0])]
    d = delta_star(G, 1.0, "mean_norm")
    np.testing.assert_allclose(d, np.array([1.0, 3.0]) / np.sqrt(10))


@given(
    st.lists(hnp.arrays(np.float64, 4, elements=st.floats(-1e3, 1e3)), min_size=1, max_size=12),
    st.floats(0.01, 10.0),
)
def test_delta_star_norm_at_most_xi(G, xi):
    if all(not np.any(g) for g in G):
        return
    assert np.linalg.norm(delta_star(G, xi)) <= xi * (1 + 1e-12)


@given(st.lists(st.floats(0, 1e3), min_size=1, max_size=20))
def test_running_max_is_monotone(norms):
    state = SearchState(AlphaParams.zeros(SPACE))
    for n in norms:
        state.push(np.array([n, 0.0]), 1.0, 1.0)
    assert all(b >= a for a, b in zip(state.running_max, state.running_max[1:]))


# ---------------------------------------------------------------------------
# nu


def test_nu_adaptive_formula():
    assert nu_adaptive_step(500.0, []) == 500.0
    hist = [10.0, 20.0, 30.0]
    assert nu_adaptive_step(500.0, hist) == pytest.approx((500 + 60) / 4)
    assert nu_adaptive_step(500.0, [3.0] * 100_000) == pytest.approx(3.0, rel=1e-2)


def test_nu_fixed_mean_and_determinism(blobs):
    nu, traces = nu_fixed(SPACE, blobs.X, blobs.Y, seed=1, N=12, batch_size=32)
    assert len(traces) == 12
    assert min(traces) <= nu <= max(traces)
    assert nu == nu_fixed(SPACE, blobs.X, blobs.Y, seed=1, N=12, batch_size=32)[0]


# ---------------------------------------------------------------------------
# gradients


def test_penalty_inactive_gives_raw_trace_gradient(blobs, rng):
    sn = instantiate_supernet(SPACE, 0)
    alpha = AlphaParams.zeros(SPACE)
    g = gumbel_draw(alpha, rng)
    X, Y = blobs.X[:16], blobs.Y[:16]
    a = grad_alpha_R(sn, alpha, g, X, Y, mu=0.0, nu=math.inf)
    b = grad_alpha_R(sn, alpha, g, X, Y, mu=5.0, nu=math.inf)
    np.testing.assert_allclose(a.grad.flat(), b.grad.flat())
    assert a.R == a.trace
    c = grad_alpha_R(sn, alpha, g, X, Y, mu=3.0, nu=0.0)
    np.testing.assert_allclose(c.grad.flat(), -2.0 * a.grad.flat())


def test_kink_uses_zero_subgradient(blobs, rng):
    sn = instantiate_supernet(SPACE, 0)
    alpha = AlphaParams.zeros(SPACE)
    g = gumbel_draw(alpha, rng)
    X, Y = blobs.X[:16], blobs.Y[:16]
    raw = grad_alpha_R(sn, alpha, g, X, Y, 0.0, math.inf)
    at = grad_alpha_R(sn, alpha, g, X, Y, 4.0, raw.trace)
    np.testing.assert_allclose(at.grad.flat(), raw.grad.flat())
    assert at.R == pytest.approx(raw.trace)


def test_hard_trace_equals_sampled_arch_trace(blobs, rng):
    sn = instantiate_supernet(SPACE, 2)
    alpha = AlphaParams.zeros(SPACE)
    res = grad_alpha_R(sn, alpha, gumbel_draw(alpha, rng), blobs.X[:16], blobs.Y[:16], 0.0, math.inf)
    assert res.trace == pytest.approx(minibatch_trace(instantiate(SPACE, res.arch, 2), blobs.X[:16], blobs.Y[:16], "mse"), rel=1e-10)


def test_gradient_sums_to_zero_and_shift_invariance(blobs, rng):
    sn = instantiate_supernet(SPACE, 0)
    alpha = AlphaParams.zeros(SPACE).like(rng.standard_normal(AlphaParams.zeros(SPACE).flat().size))
    g = gumbel_draw(alpha, rng)
    X, Y = blobs.X[:16], blobs.Y[:16]
    res = grad_alpha_R(sn, alpha, g, X, Y, 1.0, 1.0)
    for v in (*res.grad.ops, *res.grad.inputs):
        assert abs(v.sum()) < 1e-12 * max(1.0, np.abs(v).max())
    shifted = alpha.like(alpha.flat())
    shifted.ops[0] = shifted.ops[0] + 7.0
    res2 = grad_alpha_R(sn, shifted, g, X, Y, 1.0, 1.0)
    assert res2.arch == res.arch and res2.R == res.R


def test_soft_gradient_matches_finite_differences(blobs, rng):
    sn = instantiate_supernet(SPACE, 0)
    base = AlphaParams.zeros(SPACE)
    alpha = base.like(rng.standard_normal(base.flat().size))
    g = gumbel_draw(alpha, rng)
    X, Y = blobs.X[:16], blobs.Y[:16]
    res = grad_alpha_R(sn, alpha, g, X, Y, 0.0, math.inf, hard=False)

    def f(v):
        _, soft = sample_architecture(alpha.like(v), g)
        return relaxed_trace(sn, list(soft.ops), list(soft.inputs), X, Y, "mse")[0]

    fd = finite_diff(f, alpha.flat(), h=1e-5)
    assert np.linalg.norm(res.grad.flat() - fd) / np.linalg.norm(fd) < 1e-4


# ---------------------------------------------------------------------------
# end to end


def test_two_op_oracle_selects_trainable_op(blobs):
    sp = CellSpace(3, ("zero", "dense-relu"), (8,), 2, 8)
    for seed in range(3):
        res = nasi_search(sp, blobs.X, blobs.Y, PenaltyConfig(mu=0.0, nu0=math.inf, T=20, b=32, seed=seed))
        assert sp.catalog[res.arch.ops[0]] == "dense-relu"


def test_search_is_deterministic(blobs):
    cfg = PenaltyConfig(T=8, b=32, nu_samples=5, seed=3)
    a, b = nasi_search(SPACE, blobs.X, blobs.Y, cfg), nasi_search(SPACE, blobs.X, blobs.Y, cfg)
    assert a.arch == b.arch
    assert a.log == b.log


def test_search_golden_file(blobs):
    cfg = PenaltyConfig(T=10, b=32, nu_samples=8, seed=11, nu_policy="adaptive")
    res = nasi_search(SPACE, blobs.X, blobs.Y, cfg)
    golden = json.loads((GOLDEN / "search_small.json").read_text())
    assert res.arch.key() == golden["arch"]
    assert res.nu0 == pytest.approx(golden["nu0"], rel=1e-9)
    assert len(res.log) == len(golden["log"])
    for got, want in zip(res.log, golden["log"]):
        assert got["arch"] == want["arch"]
        for k in ("trace", "R", "nu", "grad_norm", "running_max"):
            assert got[k] == pytest.approx(want[k], rel=1e-9, abs=1e-15)


def test_label_free_search_uses_uniform_targets(blobs):
    res = nasi_search(SPACE, blobs.X, None, PenaltyConfig(T=3, b=32, nu_samples=3))
    assert res.labels == "random-uniform"


def test_search_rejects_small_dataset(blobs):
    with pytest.raises(ContractError):
        nasi_search(SPACE, blobs.X[:10], blobs.Y[:10], PenaltyConfig(b=64))


def test_delta_norm_bounded_on_every_run(blobs):
    for seed in range(3):
        res = nasi_search(SPACE, blobs.X, blobs.Y, PenaltyConfig(T=5, b=32, nu_samples=4, seed=seed, xi=0.7))
        assert np.linalg.norm(res.delta) <= 0.7 * (1 + 1e-12)


def test_unpenalized_search_prefers_high_trace(blobs):
    archs = enumerate_space(SPACE)
    rng = np.random.default_rng(0)
    batch = rng.choice(blobs.m, 64, replace=False)
    for seed in range(5):
        res = nasi_search(SPACE, blobs.X, blobs.Y, PenaltyConfig(mu=0.0, nu0=math.inf, seed=seed))
        implied = [log_prob(res.alpha_star, a) for a in archs]
        brute = [minibatch_trace(instantiate(SPACE, a, seed), blobs.X[batch], blobs.Y[batch], "mse") for a in archs]
        assert spearmanr(implied, brute).statistic > 0.3


def test_raising_mu_never_raises_selected_trace_above_unpenalized(blobs):
    batch = np.arange(64)
    for seed in range(3):
        base = PenaltyConfig(mu=0.0, seed=seed, T=40, nu_samples=20)
        r0 = nasi_search(SPACE, blobs.X, blobs.Y, base)
        t0 = minibatch_trace(instantiate(SPACE, r0.arch, seed), blobs.X[batch], blobs.Y[batch], "mse")
        if t0 <= r0.nu0:
            continue
        for mu in (1.0, 2.0, 5.0):
            r = nasi_search(SPACE, blobs.X, blobs.Y, PenaltyConfig.from_dict({**base.to_dict(), "mu": mu}))
            t = minibatch_trace(instantiate(SPACE, r.arch, seed), blobs.X[batch], blobs.Y[batch], "mse")
            assert t <= t0 * (1 + 1e-12)
