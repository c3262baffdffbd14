"""One-step Gumbel-Softmax search over a cell space, scored by the mini-batch
trace estimate with an exterior penalty.

All gradients are taken at the initial logits ``alpha_0 = 0``; the selected
architecture is the per-node argmax of ``alpha_0 + Delta``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as T
from .archspace import (
    AlphaParams,
    ArchId,
    ArchInstance,
    CellSpace,
    MixWeights,
    SoftWeights,
    argmax_architecture,
    gumbel_draw,
    instantiate,
    instantiate_supernet,
    sample_architecture,
    unrank,
)
from .ntk import batch_loss, check_labels, minibatch_trace
from .tensor import ContractError, NumericError, Tensor

log = logging.getLogger(__name__)


class DegenerateSearch(ValueError):
    """Every sampled gradient was zero."""


@dataclass
class PenaltyConfig:
    mu: float | None = None  # None: 1 for small-complexity spaces, 2 for large
    nu_policy: str = "fixed"  # fixed | adaptive
    nu0: float | None = None  # None: fixed -> sampled mean, adaptive -> sampled max
    nu_samples: int = 50
    tau: float = 1.0
    xi: float = 1.0
    T: int = 100
    b: int = 64
    loss_kind: str = "mse"
    seed: int = 0
    normalizer: str = "running_max"  # running_max | mean_norm

    def __post_init__(self):
        if self.mu is not None and self.mu < 0:
            raise ContractError("mu must be non-negative")
        if self.nu_policy not in ("fixed", "adaptive"):
            raise ContractError(f"unknown nu policy {self.nu_policy!r}")
        if self.nu0 is not None and not self.nu0 > 0:
            raise ContractError("nu0 must be positive")
        if self.T < 1 or self.b < 1 or self.nu_samples < 1:
            raise ContractError("T, b and nu_samples must be >= 1")
        if self.tau <= 0 or self.xi <= 0:
            raise ContractError("tau and xi must be positive")
        if self.normalizer not in ("running_max", "mean_norm"):
            raise ContractError(f"unknown normalizer {self.normalizer!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["nu0"] is not None and math.isinf(d["nu0"]):
            d["nu0"] = "inf"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PenaltyConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if d.get("nu0") == "inf":
            d["nu0"] = math.inf
        return cls(**d)


def default_mu(space: CellSpace) -> float:
    return 1.0 if space.complexity == "small" else 2.0


def penalty(x: float) -> float:
    return max(0.0, x)


def objective_value(trace: float, mu: float, nu: float) -> float:
    """R = trace - mu * max(0, trace - nu)."""
    return trace - mu * penalty(trace - nu)


def objective_R(instance, batch, labels, mu: float, nu: float, loss_kind: str = "mse") -> float:
    if np.asarray(batch).shape[0] == 0:
        raise ContractError("empty batch")
    return objective_value(minibatch_trace(instance, batch, labels, loss_kind), mu, nu)


def relaxed_trace(
    supernet: ArchInstance,
    op_w: Sequence[np.ndarray],
    in_w: Sequence[np.ndarray],
    X: np.ndarray,
    Y: np.ndarray,
    loss_kind: str,
) -> tuple[float, list[np.ndarray], list[np.ndarray]]:
    """Trace estimate of the supergraph mixed by ``op_w``/``in_w`` and its
    gradient with respect to those mixing weights (double reverse pass)."""
    wo = [Tensor(w) for w in op_w]
    wi = [Tensor(w) for w in in_w]
    with T.Tape() as tape:
        tape.watch(*supernet.params)
        tape.watch(*wo, *wi)
        f = supernet.forward(Tensor(X), mix=MixWeights(tuple(wo), tuple(wi)))
        loss = batch_loss(f, Y, loss_kind)
        grads = T.grad(tape, loss, supernet.params, create_graph=True)
        tr = None
        for g in grads:
            sq = T.reduce_sum(T.mul(g, g))
            tr = sq if tr is None else T.add(tr, sq)
    gw = T.backward(tape, 1.0, tr)
    return tr.item(), [gw[w.id].data.copy() for w in wo], [gw[w.id].data.copy() for w in wi]


def _softmax_vjp(s: np.ndarray, g: np.ndarray, tau: float) -> np.ndarray:
    return s * (g - np.dot(g, s)) / tau


def _onehot(i: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[i] = 1.0
    return v


@dataclass
class RGradient:
    grad: AlphaParams
    trace: float
    R: float
    arch: ArchId


def grad_alpha_R(
    supernet: ArchInstance,
    alpha: AlphaParams,
    g: AlphaParams,
    X: np.ndarray,
    Y: np.ndarray,
    mu: float,
    nu: float,
    tau: float = 1.0,
    loss_kind: str = "mse",
    hard: bool = True,
) -> RGradient:
    """Gradient of R with respect to the logits through the Gumbel-Softmax path.

    ``hard=True`` is the straight-through estimator: the forward pass uses the
    sampled one-hot architecture and the backward pass the softmax Jacobian.
    ``hard=False`` differentiates the fully relaxed objective, where the forward
    pass mixes every op by its softmax weight.
    """
    arch, soft = sample_architecture(alpha, g, tau)
    if hard:
        op_w = [_onehot(o, len(s)) for o, s in zip(arch.ops, soft.ops)]
        in_w = [_onehot(j, len(s)) for j, s in zip(arch.inputs, soft.inputs)]
    else:
        op_w, in_w = list(soft.ops), list(soft.inputs)
    trace, g_ops, g_ins = relaxed_trace(supernet, op_w, in_w, X, Y, loss_kind)
    # subgradient 0 of the penalty at the kink
    dR = 1.0 - (mu if trace > nu else 0.0)
    grad = AlphaParams(
        [dR * _softmax_vjp(s, gh, tau) for s, gh in zip(soft.ops, g_ops)],
        [dR * _softmax_vjp(s, gh, tau) for s, gh in zip(soft.inputs, g_ins)],
    )
    if not np.all(np.isfinite(grad.flat())):
        raise NumericError(f"non-finite logit gradient for {arch.key()}")
    return RGradient(grad, trace, objective_value(trace, mu, nu), arch)


def delta_star(gradients: Sequence[np.ndarray], xi: float = 1.0, normalizer: str = "running_max") -> np.ndarray:
    """(xi / T) sum_t G_t / max(||G_1||, ..., ||G_t||).

    ``normalizer="mean_norm"`` instead returns xi * mean(G) / ||mean(G)||.
    """
    G = [np.asarray(g, dtype=np.float64) for g in gradients]
    if not G:
        raise ContractError("need at least one gradient")
    if normalizer == "mean_norm":
        mean = np.mean(G, axis=0)
        nrm = np.linalg.norm(mean)
        if nrm == 0:
            raise DegenerateSearch("mean gradient is zero")
        return xi * mean / nrm
    total = np.zeros_like(G[0])
    running = 0.0
    for g in G:
        running = max(running, float(np.linalg.norm(g)))
        if running > 0:
            total += g / running
    if running == 0:
        raise DegenerateSearch("all sampled gradients are zero")
    return xi * total / len(G)


def nu_fixed(
    space: CellSpace,
    X: np.ndarray,
    Y: np.ndarray,
    seed: int,
    N: int = 50,
    batch_size: int = 64,
    loss_kind: str = "mse",
    weight_seed: int | None = None,
) -> tuple[float, list[float]]:
    """Mean mini-batch trace estimate over ``N`` uniformly sampled architectures."""
    rng = np.random.default_rng([seed, 50])
    ws = seed if weight_seed is None else weight_seed
    traces = []
    for _ in range(N):
        arch = unrank(space, int(rng.integers(space.size)))
        idx = rng.choice(X.shape[0], size=min(batch_size, X.shape[0]), replace=False)
        traces.append(minibatch_trace(instantiate(space, arch, ws), X[idx], Y[idx], loss_kind))
    return float(np.mean(traces)), traces


def nu_adaptive_step(nu0: float, history: Sequence[float]) -> float:
    """nu_t = t^-1 (nu_0 + sum of the t-1 earlier trace estimates)."""
    t = len(history) + 1
    return (nu0 + float(np.sum(history))) / t


@dataclass
class SearchState:
    alpha0: AlphaParams
    gradients: list[np.ndarray] = field(default_factory=list)
    running_max: list[float] = field(default_factory=list)
    nu: list[float] = field(default_factory=list)
    traces: list[float] = field(default_factory=list)
    step: int = 0

    def push(self, g: np.ndarray, trace: float, nu: float) -> None:
        prev = self.running_max[-1] if self.running_max else 0.0
        self.gradients.append(g)
        self.running_max.append(max(prev, float(np.linalg.norm(g))))
        self.traces.append(trace)
        self.nu.append(nu)
        self.step += 1


@dataclass
class SearchResult:
    arch: ArchId
    alpha_star: AlphaParams
    delta: np.ndarray
    state: SearchState
    log: list[dict]
    nu0: float
    mu: float
    labels: str


def nasi_search(space: CellSpace, X: np.ndarray, Y: np.ndarray | None, config: PenaltyConfig) -> SearchResult:
    X = np.asarray(X, dtype=np.float64)
    m = X.shape[0]
    if m < config.b:
        raise ContractError(f"dataset has {m} samples, batch size is {config.b}")
    rng = np.random.default_rng(config.seed)
    if Y is None:
        Y = rng.uniform(0.0, 1.0, size=(m, space.output_dim))
        labels = "random-uniform"
    else:
        Y = np.asarray(Y, dtype=np.float64)
        labels = "dataset"
    check_labels(Y, config.loss_kind)
    log.info("search labels: %s", labels)

    mu = default_mu(space) if config.mu is None else config.mu
    nu0 = config.nu0
    if nu0 is None:
        mean, traces = nu_fixed(space, X, Y, config.seed, config.nu_samples, config.b, config.loss_kind)
        nu0 = mean if config.nu_policy == "fixed" else max(traces)
    supernet = instantiate_supernet(space, config.seed)
    alpha0 = AlphaParams.zeros(space)
    state = SearchState(alpha0)
    entries = []
    for t in range(1, config.T + 1):
        nu_t = nu0 if config.nu_policy == "fixed" else nu_adaptive_step(nu0, state.traces)
        idx = rng.choice(m, size=config.b, replace=False)
        g = gumbel_draw(alpha0, rng)
        res = grad_alpha_R(supernet, alpha0, g, X[idx], Y[idx], mu, nu_t, config.tau, config.loss_kind)
        flat = res.grad.flat()
        state.push(flat, res.trace, nu_t)
        entries.append(
            {
                "step": t,
                "arch": res.arch.key(),
                "trace": res.trace,
                "R": res.R,
                "nu": nu_t,
                "grad_norm": float(np.linalg.norm(flat)),
                "running_max": state.running_max[-1],
            }
        )
    delta = delta_star(state.gradients, config.xi, config.normalizer)
    assert np.linalg.norm(delta) <= config.xi * (1 + 1e-12)
    alpha_star = alpha0 + alpha0.like(delta)
    return SearchResult(argmax_architecture(alpha_star), alpha_star, delta, state, entries, float(nu0), mu, labels)
