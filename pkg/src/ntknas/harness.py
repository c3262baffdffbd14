"""Ground truth and evaluation: rank correlations, a small SGD trainer,
exhaustive space scoring, label/data-randomization experiments, proxy
baselines and binned trade-off curves."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import tensor as T
from .archspace import ArchId, CellSpace, Network, enumerate_space, instantiate, param_count, rank
from .data import DatasetBundle, gen_dataset, random_data, random_labels
from .ntk import approx_trace, loss_gradient, trace_norm_exact
from .tensor import ContractError, NumericError, Tensor

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# correlation


@dataclass
class CorrelationReport:
    pearson: float | None
    spearman: float | None
    kendall: float | None
    n: int
    degenerate: bool = False
    provenance: tuple[str, str] = ("a", "b")

    def to_dict(self) -> dict:
        return {
            "pearson": self.pearson,
            "spearman": self.spearman,
            "kendall": self.kendall,
            "n": self.n,
            "degenerate": self.degenerate,
            "provenance": list(self.provenance),
        }


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties given the mean of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    ranks = np.empty(len(x))
    sx = x[order]
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and sx[j + 1] == sx[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2 + 1
        i = j + 1
    return ranks


def _pearson(a: np.ndarray, b: np.ndarray) -> float | None:
    da, db = a - a.mean(), b - b.mean()
    den = np.sqrt((da @ da) * (db @ db))
    if den == 0:
        return None
    return float(np.clip((da @ db) / den, -1.0, 1.0))


def kendall_tau_b(a: np.ndarray, b: np.ndarray) -> float | None:
    sa = np.sign(a[:, None] - a[None, :])
    sb = np.sign(b[:, None] - b[None, :])
    iu = np.triu_indices(len(a), 1)
    sa, sb = sa[iu], sb[iu]
    n0 = len(sa)
    ties_a = np.count_nonzero(sa == 0)
    ties_b = np.count_nonzero(sb == 0)
    den = np.sqrt(float(n0 - ties_a) * float(n0 - ties_b))
    if den == 0:
        return None
    return float(np.clip(np.sum(sa * sb) / den, -1.0, 1.0))


def correlation(a: Sequence[float], b: Sequence[float], names: tuple[str, str] = ("a", "b")) -> CorrelationReport:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ContractError("correlation needs two vectors of equal length")
    if len(a) < 2:
        raise ContractError("correlation needs at least 2 points")
    p = _pearson(a, b)
    s = _pearson(average_ranks(a), average_ranks(b))
    k = kendall_tau_b(a, b)
    degenerate = p is None or s is None or k is None
    return CorrelationReport(p, s, k, len(a), degenerate, names)


# ---------------------------------------------------------------------------
# training

# the exhaustive micro-benchmark: dataset, split and training budget
BENCH_DATA = {"kind": "image_patches", "m": 1500, "seed": 0, "color_shift": 0.1}
BENCH_TRAIN = 1000


def benchmark_data(m: int | None = None) -> DatasetBundle:
    """The benchmark's data, or its first ``m`` training samples."""
    d = BENCH_DATA
    bundle = gen_dataset(d["kind"], d["m"], seed=d["seed"], color_shift=d["color_shift"])
    if m is not None:
        return bundle.subset(range(min(m, BENCH_TRAIN)))
    return bundle


def benchmark_split() -> tuple[DatasetBundle, DatasetBundle]:
    return benchmark_data().split(BENCH_TRAIN)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    lr: float = 100.0
    batch_size: int = 64
    seed: int = 0

    def to_dict(self) -> dict:
        return {"epochs": self.epochs, "lr": self.lr, "batch_size": self.batch_size, "seed": self.seed}


@dataclass
class TrainResult:
    error: float
    diverged: bool
    final_loss: float | None


def predict(net: Network, X: np.ndarray, params=None, chunk: int = 256) -> np.ndarray:
    out = [net.forward(Tensor(X[i : i + chunk]), params).data for i in range(0, X.shape[0], chunk)]
    return np.concatenate(out, axis=0)


def _sgd_step(params: list[Tensor], g: np.ndarray, lr: float) -> list[Tensor]:
    out, k = [], 0
    for p in params:
        out.append(Tensor.wrap(p.data - lr * g[k : k + p.size].reshape(p.shape)))
        k += p.size
    return out


def sgd_train_eval(
    arch: ArchId,
    space: CellSpace,
    train: DatasetBundle,
    test: DatasetBundle,
    epochs: int,
    lr: float,
    seed: int,
    batch_size: int = 64,
) -> TrainResult:
    """Mini-batch SGD on cross-entropy; returns the test misclassification rate."""
    net = instantiate(space, arch, seed)
    params = list(net.params)
    rng = np.random.default_rng([seed, 1])
    loss = None
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            for _ in range(epochs):
                perm = rng.permutation(train.m)
                for start in range(0, train.m, batch_size):
                    idx = perm[start : start + batch_size]
                    loss, g = loss_gradient(net, train.X[idx], train.Y[idx], "ce", params)
                    if not np.isfinite(loss):
                        raise NumericError("loss")
                    params = _sgd_step(params, g, lr)
            pred = predict(net, test.X, params).argmax(axis=1)
    except NumericError:
        return TrainResult(1.0, True, None)
    return TrainResult(float(np.mean(pred != test.labels)), False, loss)


# ---------------------------------------------------------------------------
# proxy baselines


def baseline_snip(net: Network, X: np.ndarray, Y: np.ndarray, loss_kind: str = "ce") -> float:
    """sum |dL/dw * w| over all weights."""
    _, g = loss_gradient(net, X, Y, loss_kind)
    return float(np.abs(g * net.theta.data).sum())


def baseline_synflow(net: Network) -> float:
    """sum |w| * dR/d|w| with R the summed output on an all-ones input under |weights|."""
    absp = [Tensor.wrap(np.abs(p.data)) for p in net.params]
    with T.Tape() as tape:
        tape.watch(*absp)
        R = T.reduce_sum(net.forward(Tensor(np.ones((1, net.input_dim))), absp))
    g = T.backward(tape, 1.0, R)
    return float(sum(np.sum(p.data * g[p.id].data) for p in absp))


# ---------------------------------------------------------------------------
# exhaustive scoring


@dataclass
class ScoringSetup:
    """Shared inputs for scoring every architecture of a space."""

    data: DatasetBundle  # samples the scores are computed on
    weight_seed: int = 0
    batch_size: int = 64
    batch_seed: int = 0
    loss_kind: str = "mse"


SCORERS = ("exact", "approx", "snip", "synflow", "params")


def score_arch(space: CellSpace, arch: ArchId, setup: ScoringSetup, scorers: Iterable[str]) -> dict:
    net = instantiate(space, arch, setup.weight_seed)
    d = setup.data
    rec: dict = {"arch": arch.key(), "rank": rank(space, arch)}
    for s in scorers:
        if s == "exact":
            rec["trace_exact"] = trace_norm_exact(net, d.X)
        elif s == "approx":
            rec["trace_approx"] = approx_trace(net, d.X, d.Y, setup.loss_kind, setup.batch_size, setup.batch_seed)
        elif s == "snip":
            rec["snip"] = baseline_snip(net, d.X[: setup.batch_size], d.Y[: setup.batch_size])
        elif s == "synflow":
            rec["synflow"] = baseline_synflow(net)
        elif s == "params":
            rec["params"] = param_count(space, arch)
        else:
            raise ContractError(f"unknown scorer {s!r}; choose from {SCORERS}")
    return rec


@dataclass
class RankedSpace:
    space: CellSpace
    rows: list[dict] = field(default_factory=list)

    def column(self, key: str) -> np.ndarray:
        return np.array([r[key] for r in self.rows], dtype=np.float64)

    def by_arch(self) -> dict[str, dict]:
        return {r["arch"]: r for r in self.rows}

    def order(self, key: str, descending: bool = True) -> list[str]:
        col = self.column(key)
        idx = np.argsort(-col if descending else col, kind="mergesort")
        return [self.rows[i]["arch"] for i in idx]


def train_all(
    space: CellSpace,
    train: DatasetBundle,
    test: DatasetBundle,
    cfg: TrainConfig,
    cache=None,
    archs: Sequence[ArchId] | None = None,
    progress: Callable[[int, int], None] | None = None,
) -> list[dict]:
    """Ground-truth test error for every architecture (or ``archs``).

    With a cache, architectures already present are read back instead of
    retrained; new results are appended.
    """
    archs = enumerate_space(space) if archs is None else list(archs)
    rows = []
    for i, a in enumerate(archs):
        key = a.key()
        if cache is not None and key in cache:
            rows.append(cache.get(key))
        else:
            r = sgd_train_eval(a, space, train, test, cfg.epochs, cfg.lr, cfg.seed, cfg.batch_size)
            rec = {"arch": key, "rank": rank(space, a), "test_error": r.error, "diverged": r.diverged}
            if cache is not None:
                cache.add(rec)
            rows.append(rec)
        if progress:
            progress(i + 1, len(archs))
    return rows


def rank_space(
    space: CellSpace,
    setup: ScoringSetup,
    scorers: Sequence[str],
    cap: int = 100_000,
    progress: Callable[[int, int], None] | None = None,
) -> RankedSpace:
    archs = enumerate_space(space, cap)
    rows = []
    for i, a in enumerate(archs):
        rows.append(score_arch(space, a, setup, scorers))
        if progress:
            progress(i + 1, len(archs))
    return RankedSpace(space, rows)


def approx_scores(space: CellSpace, data: DatasetBundle, setup: ScoringSetup, archs=None) -> np.ndarray:
    archs = enumerate_space(space) if archs is None else archs
    return np.array(
        [
            approx_trace(instantiate(space, a, setup.weight_seed), data.X, data.Y, setup.loss_kind, setup.batch_size, setup.batch_seed)
            for a in archs
        ]
    )


def agnostic_experiment(space: CellSpace, setup: ScoringSetup, mode: str, seed: int = 0) -> CorrelationReport:
    """Correlate approximate trace scores under true vs randomized labels or inputs.

    Weights and the sampled batch are shared between the two runs.
    """
    if mode == "random_labels":
        other = random_labels(setup.data, seed)
    elif mode == "random_data":
        other = random_data(setup.data, seed)
    else:
        raise ContractError(f"unknown mode {mode!r}")
    archs = enumerate_space(space)
    true = approx_scores(space, setup.data, setup, archs)
    rand = approx_scores(space, other, setup, archs)
    return correlation(true, rand, ("true", mode))


# ---------------------------------------------------------------------------
# benchmark caches

SCORE_M = 256  # training samples the cached scores are computed on
BENCH_SCORERS = ["exact", "approx", "snip", "synflow", "params"]


def score_cache(path, space: CellSpace, setup: ScoringSetup):
    from .io import BenchmarkCache, space_to_dict

    header = {
        "kind": "scores",
        "space": space_to_dict(space),
        "data": {**BENCH_DATA, "subset": setup.data.m},
        "scorers": BENCH_SCORERS,
        "setup": {"weight_seed": setup.weight_seed, "batch_size": setup.batch_size, "batch_seed": setup.batch_seed, "loss": setup.loss_kind},
    }
    return BenchmarkCache(path, header)


def ground_truth_cache(path, space: CellSpace, cfg: TrainConfig = TrainConfig()):
    from .io import BenchmarkCache, space_to_dict

    header = {"kind": "ground_truth", "space": space_to_dict(space), "data": BENCH_DATA, "train_size": BENCH_TRAIN, "train": cfg.to_dict()}
    return BenchmarkCache(path, header)


# ---------------------------------------------------------------------------
# trade-off curve


@dataclass
class TradeoffBin:
    count: int
    trace_mean: float
    error_mean: float
    error_std: float


@dataclass
class TradeoffCurve:
    bins: list[TradeoffBin]
    argmin: int
    merged: bool

    @property
    def interior_minimum(self) -> bool:
        return 0 < self.argmin < len(self.bins) - 1


def tradeoff_curve(
    traces: Sequence[float], errors: Sequence[float], bins: int = 4, min_count: int = 3
) -> TradeoffCurve:
    """Group architectures into equal-count bins by trace; mean +- std of error per bin.

    Bins with fewer than ``min_count`` members are merged into a neighbour.
    """
    tr = np.asarray(traces, dtype=np.float64)
    er = np.asarray(errors, dtype=np.float64)
    if tr.shape != er.shape or tr.size == 0:
        raise ContractError("need matching, non-empty trace and error vectors")
    order = np.argsort(tr, kind="mergesort")
    groups = [g for g in np.array_split(order, bins) if g.size]
    merged = False
    while len(groups) > 1 and min(g.size for g in groups) < min_count:
        i = min(range(len(groups)), key=lambda k: groups[k].size)
        j = i - 1 if i == len(groups) - 1 else i + 1
        lo, hi = min(i, j), max(i, j)
        groups[lo:hi + 1] = [np.concatenate([groups[lo], groups[hi]])]
        merged = True
    if merged:
        log.info("trade-off curve: merged sparse bins down to %d", len(groups))
    out = [TradeoffBin(int(g.size), float(tr[g].mean()), float(er[g].mean()), float(er[g].std())) for g in groups]
    argmin = int(np.argmin([b.error_mean for b in out]))
    return TradeoffCurve(out, argmin, merged)


# ---------------------------------------------------------------------------
# search against ground truth

BENCH_SEARCH = {"nu_policy": "adaptive", "T": 100, "b": 64, "loss_kind": "mse"}


@dataclass
class SearchOutcome:
    seed: int
    arch: str
    test_error: float
    better: int  # architectures with strictly lower test error
    top: bool
    seconds: float


def search_effectiveness(
    space: CellSpace, train: DatasetBundle, errors: dict[str, float], seeds: Sequence[int], config: dict | None = None,
    top_fraction: float = 0.25,
) -> list[SearchOutcome]:
    """Run the search once per seed and place each selection in the ground-truth ranking."""
    import time

    from .search import PenaltyConfig, nasi_search

    cfg = {**BENCH_SEARCH, **(config or {})}
    allerr = np.array(list(errors.values()))
    out = []
    for s in seeds:
        t0 = time.perf_counter()
        res = nasi_search(space, train.X, train.Y, PenaltyConfig.from_dict({**cfg, "seed": s}))
        key = res.arch.key()
        e = errors[key]
        better = int(np.sum(allerr < e))
        out.append(SearchOutcome(s, key, e, better, better < top_fraction * len(allerr), time.perf_counter() - t0))
    return out
