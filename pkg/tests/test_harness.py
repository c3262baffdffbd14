import numpy as np
import pytest
from hypothesis import assume, given, strategies as st
from hypothesis.extra import numpy as hnp
from scipy import stats

from ntknas.archspace import VECTOR_OPS, ArchId, CellSpace, enumerate_space, instantiate
from ntknas.data import gen_dataset
from ntknas.harness import (
    ScoringSetup,
    TrainConfig,
    agnostic_experiment,
    average_ranks,
    baseline_snip,
    baseline_synflow,
    correlation,
    rank_space,
    sgd_train_eval,
    tradeoff_curve,
    train_all,
)
from ntknas.ntk import exact_ntk
from ntknas.tensor import ContractError

TINY = CellSpace(4, ("zero", "dense-relu"), (8,), 2, 8)
DEEP = ArchId((1, 1), (0, 2))


@pytest.fixture(scope="module")
def blobs():
    return gen_dataset("blobs", 300, seed=0, n0=8)


# ---------------------------------------------------------------------------
# correlation


def test_correlation_examples():
    r = correlation([1, 2, 3, 4], [1, 2, 3, 4])
    assert (r.pearson, r.spearman, r.kendall) == (1.0, 1.0, 1.0)
    r = correlation([1, 2, 3, 4], [4, 3, 2, 1])
    assert (r.pearson, r.spearman, r.kendall) == (-1.0, -1.0, -1.0)
    assert correlation([1, 2, 3], [1, 3, 2]).kendall == pytest.approx(1 / 3)


def test_correlation_degenerate_and_errors():
    r = correlation([1, 1, 1], [1, 2, 3])
    assert r.degenerate and r.pearson is None and r.kendall is None
    with pytest.raises(ContractError):
        correlation([1], [1])
    with pytest.raises(ContractError):
        correlation([1, 2], [1, 2, 3])


def test_average_ranks_ties():
    np.testing.assert_allclose(average_ranks([3.0, 1.0, 3.0, 2.0]), [3.5, 1.0, 3.5, 2.0])


vectors = st.integers(3, 30).flatmap(
    lambda n: st.tuples(
        hnp.arrays(np.float64, n, elements=st.integers(-5, 5).map(float)),
        hnp.arrays(np.float64, n, elements=st.floats(-1e3, 1e3)),
    )
)


@given(vectors)
def test_correlation_matches_scipy(ab):
    a, b = ab
    assume(np.ptp(a) > 0 and np.ptp(b) > 1e-6)
    r = correlation(a, b)
    assert r.pearson == pytest.approx(stats.pearsonr(a, b).statistic, abs=1e-9)
    assert r.spearman == pytest.approx(stats.spearmanr(a, b).statistic, abs=1e-9)
    assert r.kendall == pytest.approx(stats.kendalltau(a, b).statistic, abs=1e-9)


@given(vectors)
def test_correlation_symmetric_and_rank_invariant(ab):
    a, b = ab
    assume(np.ptp(a) > 0 and np.ptp(b) > 1e-6)
    r, s = correlation(a, b), correlation(b, a)
    assert r.spearman == pytest.approx(s.spearman) and r.kendall == pytest.approx(s.kendall)
    t = correlation(np.exp(a / 5) * 3 + 1, b)
    assert t.spearman == pytest.approx(r.spearman, abs=1e-9)
    assert t.kendall == pytest.approx(r.kendall, abs=1e-9)


# ---------------------------------------------------------------------------
# trainer


def test_zero_arch_is_at_chance():
    data = gen_dataset("image_patches", 600, seed=0)
    sp = CellSpace(4, ("zero", "identity"), (8, 8, 3), 4, 4)
    train, test = data.split(400)
    r = sgd_train_eval(ArchId((0, 0), (0, 0)), sp, train, test, epochs=2, lr=1.0, seed=0)
    assert not r.diverged
    assert abs(r.error - 0.75) < 0.08


def test_dense_arch_learns_blobs(blobs):
    train, test = blobs.split(200)
    best = DEEP
    r = sgd_train_eval(best, TINY, train, test, epochs=50, lr=10.0, seed=0, batch_size=32)
    assert r.error < 0.05
    r2 = sgd_train_eval(best, TINY, train, test, epochs=50, lr=10.0, seed=0, batch_size=32)
    assert r2 == r


def test_divergence_is_reported(blobs):
    train, test = blobs.split(200)
    r = sgd_train_eval(DEEP, TINY, train, test, epochs=3, lr=1e12, seed=0)
    assert r.diverged and r.error == 1.0


def test_train_all_uses_cache(blobs, tmp_path):
    from ntknas.io import BenchmarkCache

    train, test = blobs.split(200)
    cfg = TrainConfig(epochs=2, lr=1.0, batch_size=32)
    cache = BenchmarkCache(tmp_path / "gt.jsonl", {"k": 1})
    rows = train_all(TINY, train, test, cfg, cache)
    assert len(rows) == TINY.size == len(cache)
    again = train_all(TINY, train, test, cfg, BenchmarkCache(tmp_path / "gt.jsonl", {"k": 1}))
    assert again == rows


# ---------------------------------------------------------------------------
# baselines


def test_baselines_vanish_on_zero_arch(blobs):
    net = instantiate(TINY, ArchId((0, 0), (0, 0)), 0)
    assert baseline_synflow(net) == 0.0
    assert baseline_snip(net, blobs.X[:16], blobs.Y[:16]) == 0.0


def test_synflow_is_positive_and_grows_with_paths():
    a = baseline_synflow(instantiate(TINY, ArchId((1, 0), (0, 0)), 0))
    b = baseline_synflow(instantiate(TINY, DEEP, 0))
    assert 0 < a < b


def test_snip_zero_when_relu_inactive():
    net = instantiate(TINY, DEEP, 0)
    X = np.zeros((4, 8))
    Y = np.eye(2)[[0, 1, 0, 1]]
    assert baseline_snip(net, X, Y) == 0.0


# ---------------------------------------------------------------------------
# ranking and trade-off


def test_rank_space_exact_matches_kernel_trace(blobs):
    setup = ScoringSetup(blobs.subset(range(12)), batch_size=4)
    ranked = rank_space(TINY, setup, ["exact", "params"])
    assert len(ranked.rows) == TINY.size == 24
    brute = [np.trace(exact_ntk(instantiate(TINY, a, 0), blobs.X[:12]).matrix) for a in enumerate_space(TINY)]
    np.testing.assert_allclose(ranked.column("trace_exact"), brute, rtol=1e-10)
    assert ranked.order("trace_exact")[0] == enumerate_space(TINY)[int(np.argmax(brute))].key()


def test_tradeoff_single_bin_is_global_mean():
    tr, er = np.arange(10.0), np.linspace(0, 1, 10)
    c = tradeoff_curve(tr, er, bins=1)
    assert len(c.bins) == 1 and c.bins[0].error_mean == pytest.approx(er.mean())
    assert not c.interior_minimum


def test_tradeoff_interior_minimum():
    tr = np.arange(40.0)
    er = (tr - 18) ** 2 / 400
    c = tradeoff_curve(tr, er, bins=4)
    assert [b.count for b in c.bins] == [10] * 4
    assert c.interior_minimum and not c.merged


def test_tradeoff_merges_sparse_bins():
    c = tradeoff_curve(np.arange(5.0), np.ones(5), bins=4, min_count=3)
    assert c.merged and sum(b.count for b in c.bins) == 5
    assert min(b.count for b in c.bins) >= 2


@given(st.integers(1, 60), st.integers(1, 6))
def test_tradeoff_preserves_counts(n, bins):
    rng = np.random.default_rng(n)
    c = tradeoff_curve(rng.random(n), rng.random(n), bins=bins, min_count=1)
    assert sum(b.count for b in c.bins) == n
    means = [b.trace_mean for b in c.bins]
    assert means == sorted(means)


def test_agnostic_random_labels_on_vector_space(blobs):
    sp = CellSpace(4, VECTOR_OPS, (8,), 2, 8)
    rep = agnostic_experiment(sp, ScoringSetup(blobs.subset(range(128)), batch_size=32), "random_labels")
    assert rep.pearson > 0.9
    with pytest.raises(ContractError):
        agnostic_experiment(sp, ScoringSetup(blobs), "bogus")
