"""Empirical NTK, its trace norm and the gradient-norm lower bounds on it,
linearized MSE dynamics, and the analytic infinite-width ReLU kernel.

Sample-major layout throughout: row ``i * n + c`` of a Jacobian or Gram matrix
is output ``c`` of sample ``i``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import ops
from . import tensor as T
from .archspace import MlpNet, Network
from .tensor import ContractError, NumericError, Tensor

DEFAULT_GRAM_CAP = 2000
LOSS_LIPSCHITZ = {"mse": 2.0, "ce": 1.0}


class InfeasibleError(ValueError):
    """The step size violates eta * mean eigenvalue < 1."""


class DivergenceError(ArithmeticError):
    pass


def pairwise_sum(values: Sequence[float]) -> float:
    """Fixed-shape tree reduction, so parallel and serial sums agree bit-for-bit."""
    vals = [float(v) for v in values]
    if not vals:
        return 0.0
    while len(vals) > 1:
        nxt = [vals[i] + vals[i + 1] for i in range(0, len(vals) - 1, 2)]
        if len(vals) % 2:
            nxt.append(vals[-1])
        vals = nxt
    return vals[0]


def _as_batch(X) -> Tensor:
    X = X if isinstance(X, Tensor) else Tensor(np.asarray(X, dtype=np.float64))
    if X.data.ndim == 1:
        X = Tensor.wrap(X.data[None, :])
    return X


def _flat(grads: dict[int, Tensor], params: Sequence[Tensor]) -> np.ndarray:
    if not params:
        return np.zeros(0)
    return np.concatenate([grads[p.id].data.reshape(-1) for p in params])


def jacobian(net: Network, x) -> np.ndarray:
    """Per-sample Jacobian ``(n, p)`` from ``n`` reverse passes with unit seeds."""
    x = _as_batch(x)
    if x.shape[0] != 1:
        raise ContractError(f"jacobian takes a single sample, got batch of {x.shape[0]}")
    with T.Tape() as tape:
        tape.watch(*net.params)
        out = net.forward(x)
    n = out.shape[1]
    rows = np.zeros((n, net.num_params))
    for c in range(n):
        seed = np.zeros((1, n))
        seed[0, c] = 1.0
        rows[c] = _flat(T.backward(tape, seed, out, retain_graph=True), net.params)
    if not np.all(np.isfinite(rows)):
        raise NumericError("non-finite Jacobian")
    return rows


def stacked_jacobian(net: Network, X) -> np.ndarray:
    X = _as_batch(X)
    return np.concatenate([jacobian(net, X.data[i : i + 1]) for i in range(X.shape[0])], axis=0)


@dataclass
class NtkGram:
    matrix: np.ndarray
    eigenvalues: np.ndarray  # descending
    eigenvectors: np.ndarray  # columns, matching eigenvalues
    m: int
    n: int

    @classmethod
    def from_matrix(cls, mat: np.ndarray, m: int, n: int) -> "NtkGram":
        mat = 0.5 * (mat + mat.T)
        w, v = np.linalg.eigh(mat)
        w = np.where((w < 0) & (w >= -1e-8 * max(1.0, abs(w).max(initial=0.0))), 0.0, w)
        order = np.argsort(w)[::-1]
        return cls(mat, w[order], v[:, order], m, n)

    @property
    def mean_eigenvalue(self) -> float:
        return float(self.eigenvalues.mean())

    @property
    def trace(self) -> float:
        return float(np.trace(self.matrix))

    @property
    def lambda_max(self) -> float:
        return float(self.eigenvalues[0])

    @property
    def lambda_min(self) -> float:
        return float(self.eigenvalues[-1])


def exact_ntk(net: Network, X, cap: int = DEFAULT_GRAM_CAP) -> NtkGram:
    X = _as_batch(X)
    m, n = X.shape[0], net.n_outputs
    if m < 1:
        raise ContractError("need at least one sample")
    if m * n > cap:
        raise ContractError(f"Gram size m*n = {m * n} exceeds cap {cap}")
    J = stacked_jacobian(net, X)
    return NtkGram.from_matrix(J @ J.T, m, n)


def trace_norm_exact(net: Network, X, cap: int = DEFAULT_GRAM_CAP) -> float:
    """Sum over samples of squared Frobenius norms of per-sample Jacobians.

    Computed from reverse-pass gradient norms directly, without forming the Gram.
    """
    X = _as_batch(X)
    if X.shape[0] * net.n_outputs > cap:
        raise ContractError(f"Gram size exceeds cap {cap}")
    per_sample = []
    for i in range(X.shape[0]):
        with T.Tape() as tape:
            tape.watch(*net.params)
            out = net.forward(Tensor.wrap(X.data[i : i + 1]))
        total = []
        for c in range(out.shape[1]):
            seed = np.zeros(out.shape)
            seed[0, c] = 1.0
            g = T.backward(tape, seed, out, retain_graph=True)
            total.append(sum(float(np.vdot(g[p.id].data, g[p.id].data)) for p in net.params))
        per_sample.append(pairwise_sum(total))
    return pairwise_sum(per_sample)


# ---------------------------------------------------------------------------
# losses


def check_labels(Y: np.ndarray, loss_kind: str) -> None:
    if loss_kind not in LOSS_LIPSCHITZ:
        raise ContractError(f"unknown loss kind {loss_kind!r}; use 'mse' or 'ce'")
    if loss_kind == "mse" and (Y.min() < 0 or Y.max() > 1):
        raise ContractError("MSE labels must lie in [0, 1]")
    if loss_kind == "ce" and not np.allclose(Y.sum(axis=1), 1.0):
        raise ContractError("cross-entropy labels must be one-hot rows")


def batch_loss(f: Tensor, Y: np.ndarray, loss_kind: str) -> Tensor:
    """Mean over the batch of per-sample losses.

    Per-sample MSE is ``n^-1 ||f(x) - y||^2``; per-sample cross-entropy is
    ``-sum_c y_c log softmax(f(x))_c``.
    """
    m, n = f.shape
    y = Tensor.wrap(np.asarray(Y, dtype=np.float64))
    if loss_kind == "mse":
        r = T.sub(f, y)
        return T.scale(T.reduce_sum(T.mul(r, r)), 1.0 / (m * n))
    if loss_kind == "ce":
        return T.scale(T.reduce_sum(T.mul(ops.log_softmax(f), y)), -1.0 / m)
    raise ContractError(f"unknown loss kind {loss_kind!r}")


def loss_gradient(net: Network, X, Y, loss_kind: str, params: Sequence[Tensor] | None = None) -> tuple[float, np.ndarray]:
    """(batch-mean loss, its flattened parameter gradient)."""
    X = _as_batch(X)
    Y = np.asarray(Y, dtype=np.float64)
    check_labels(Y, loss_kind)
    ps = net.params if params is None else list(params)
    with T.Tape() as tape:
        tape.watch(*ps)
        loss = batch_loss(net.forward(X, ps), Y, loss_kind)
    g = T.backward(tape, 1.0, loss)
    return loss.item(), _flat(g, ps)


def minibatch_trace(net: Network, X, Y, loss_kind: str) -> float:
    """||b^-1 sum_x grad_theta L_x||^2 on one batch."""
    _, g = loss_gradient(net, X, Y, loss_kind)
    return float(np.vdot(g, g))


@dataclass
class TraceEstimates:
    exact: float
    grad_sum: float  # gamma^-1 sum_x ||grad L_x||^2
    batch_sum: float  # gamma^-1 sum_j b_j ||mean grad over batch j||^2
    minibatch: float  # ||mean grad over the sampled batch||^2
    scaled: float  # m gamma^-1 minibatch
    gamma: float
    batch_indices: list[int] = field(default_factory=list)
    last_batch_truncated: bool = False

    def chain_holds(self, slack: float = 1e-8) -> bool:
        tol = slack * max(1.0, abs(self.exact))
        return self.exact + tol >= self.grad_sum and self.grad_sum + tol >= self.batch_sum


def trace_lower_bounds(
    net: Network, X, Y, loss_kind: str, batch_size: int, seed: int = 0, exact: float | None = None
) -> TraceEstimates:
    """Exact trace norm and the chain of gradient-norm lower bounds on it.

    The data is split into consecutive batches of a seeded permutation; when
    ``batch_size`` does not divide ``m`` the last batch is smaller and is
    weighted by its own size. The single sampled mini-batch is the first one.
    """
    X = _as_batch(X)
    Y = np.asarray(Y, dtype=np.float64)
    check_labels(Y, loss_kind)
    m = X.shape[0]
    if batch_size < 1 or m < 1:
        raise ContractError("empty batch")
    b = min(batch_size, m)
    gamma = LOSS_LIPSCHITZ[loss_kind]
    if exact is None:
        exact = trace_norm_exact(net, X)

    per_sample = []
    for i in range(m):
        _, g = loss_gradient(net, X.data[i : i + 1], Y[i : i + 1], loss_kind)
        per_sample.append(float(np.vdot(g, g)))
    grad_sum = pairwise_sum(per_sample) / gamma

    perm = np.random.default_rng(seed).permutation(m)
    terms, first = [], None
    for start in range(0, m, b):
        idx = perm[start : start + b]
        _, g = loss_gradient(net, X.data[idx], Y[idx], loss_kind)
        sq = float(np.vdot(g, g))
        if first is None:
            first = sq
        terms.append(len(idx) * sq)
    batch_sum = pairwise_sum(terms) / gamma
    return TraceEstimates(
        exact=exact,
        grad_sum=grad_sum,
        batch_sum=batch_sum,
        minibatch=first,
        scaled=m * first / gamma,
        gamma=gamma,
        batch_indices=[int(i) for i in perm[:b]],
        last_batch_truncated=m % b != 0,
    )


def approx_trace(net: Network, X, Y, loss_kind: str, batch_size: int, seed: int = 0, m: int | None = None) -> float:
    """m gamma^-1 ||mean grad||^2 on one uniformly sampled batch (no exact pass)."""
    X = _as_batch(X)
    Y = np.asarray(Y, dtype=np.float64)
    total = X.shape[0] if m is None else m
    idx = np.random.default_rng(seed).choice(X.shape[0], size=min(batch_size, X.shape[0]), replace=False)
    return total * minibatch_trace(net, X.data[idx], Y[idx], loss_kind) / LOSS_LIPSCHITZ[loss_kind]


# ---------------------------------------------------------------------------
# linearized dynamics


@dataclass
class LossTrajectory:
    eta: float
    times: list
    losses: list
    source: str


def mse_trajectory(gram: NtkGram, Y, eta: float, times: Sequence[float], f0=None) -> LossTrajectory:
    """Closed-form MSE ``m^-1 sum_i (1 - eta lambda_i)^(2t) (u_i^T r_0)^2``.

    ``r_0 = Y - f0`` (``f0`` defaults to zero), with ``Y`` flattened sample-major.
    """
    if eta <= 0:
        raise ContractError("learning rate must be positive")
    r0 = np.asarray(Y, dtype=np.float64).reshape(-1)
    if f0 is not None:
        r0 = r0 - np.asarray(f0, dtype=np.float64).reshape(-1)
    if r0.size != gram.m * gram.n:
        raise ContractError(f"targets have {r0.size} entries, Gram is {gram.m * gram.n}")
    proj2 = (gram.eigenvectors.T @ r0) ** 2
    base = 1.0 - eta * gram.eigenvalues
    losses = [float(np.sum(base ** (2 * t) * proj2) / gram.m) for t in times]
    return LossTrajectory(eta, list(times), losses, "closed-form")


def linearized_train(net: Network, X, Y, eta: float, steps: int, J: np.ndarray | None = None) -> LossTrajectory:
    """Full-batch gradient descent on ``1/2 ||Y - f_lin||^2`` for the linearization.

    ``f_lin(x; theta) = f(x; theta_0) + J(x)(theta - theta_0)``; its NTK is
    ``J J^T`` at every step because ``J`` never changes. The reported loss is
    ``m^-1 ||Y - f_lin||^2``.
    """
    X = _as_batch(X)
    m, n = X.shape[0], net.n_outputs
    if J is None:
        J = stacked_jacobian(net, X)
    f0 = net.forward(X).data.reshape(-1)
    y = np.asarray(Y, dtype=np.float64).reshape(-1)
    delta = np.zeros(J.shape[1])
    losses = []
    for t in range(steps + 1):
        r = f0 + J @ delta - y
        loss = float(r @ r) / m
        if not math.isfinite(loss) or loss > 1e6:
            raise DivergenceError(f"linearized training diverged at step {t} with eta={eta}")
        losses.append(loss)
        if t < steps:
            delta = delta - eta * (J.T @ r)
    return LossTrajectory(eta, list(range(steps + 1)), losses, "simulated")


def gd_outputs(net: Network, X, Y, eta: float, steps: int) -> list[np.ndarray]:
    """Outputs of the actual network along full-batch GD on ``1/2 ||Y - f||^2``."""
    X = _as_batch(X)
    y = Tensor.wrap(np.asarray(Y, dtype=np.float64).reshape(X.shape[0], net.n_outputs))
    params = list(net.params)
    outs = []
    for t in range(steps + 1):
        with T.Tape() as tape:
            tape.watch(*params)
            f = net.forward(X, params)
            r = T.sub(f, y)
            loss = T.scale(T.reduce_sum(T.mul(r, r)), 0.5)
        outs.append(f.data.reshape(-1).copy())
        if t == steps:
            break
        g = T.backward(tape, 1.0, loss)
        params = [Tensor.wrap(p.data - eta * g[p.id].data) for p in params]
    return outs


def linearized_outputs(net: Network, X, Y, eta: float, steps: int, J: np.ndarray | None = None) -> list[np.ndarray]:
    X = _as_batch(X)
    if J is None:
        J = stacked_jacobian(net, X)
    f0 = net.forward(X).data.reshape(-1)
    y = np.asarray(Y, dtype=np.float64).reshape(-1)
    delta = np.zeros(J.shape[1])
    outs = []
    for t in range(steps + 1):
        f = f0 + J @ delta
        outs.append(f)
        delta = delta - eta * (J.T @ (f - y))
    return outs


def linearization_gap(net: Network, X, Y, eta: float, steps: int) -> float:
    """sup_t ||f_t - f_lin_t||_2 over GD steps."""
    J = stacked_jacobian(net, X)
    real = gd_outputs(net, X, Y, eta, steps)
    lin = linearized_outputs(net, X, Y, eta, steps, J)
    return max(float(np.linalg.norm(a - b)) for a, b in zip(real, lin))


def prop1_leading_bound(gram: NtkGram, eta: float, m: int, n: int, t: float) -> float:
    """Leading term ``m n^2 (1 - eta * mean_eigenvalue)^q`` of the MSE bound.

    ``q = 2t`` for ``t < 0.5`` and 1 otherwise. The additive finite-width
    term is not computed.
    """
    lam_bar = gram.mean_eigenvalue
    if eta * lam_bar >= 1.0:
        raise InfeasibleError(f"eta * mean eigenvalue = {eta * lam_bar:.6g} >= 1")
    q = 2 * t if t < 0.5 else 1.0
    return m * n**2 * (1.0 - eta * lam_bar) ** q


# ---------------------------------------------------------------------------
# infinite-width oracle


@dataclass
class ReluKernels:
    sigma: list[np.ndarray]  # Sigma^(1..L)
    sigma_dot: list[np.ndarray | None]  # Sigma_dot^(1..L); index 0 unused
    theta: np.ndarray


def relu_kernel_recursion(X, depth: int) -> ReluKernels:
    """Arc-cosine recursion for a bias-free ReLU chain of ``depth`` layers."""
    X = np.asarray(X.data if isinstance(X, Tensor) else X, dtype=np.float64)
    n0 = X.shape[1]
    sig = X @ X.T / n0
    sigmas, dots = [sig], [None]
    theta = sig.copy()
    for _ in range(1, depth):
        d = np.sqrt(np.clip(np.diag(sig), 0.0, None))
        norm = np.outer(d, d)
        with np.errstate(invalid="ignore", divide="ignore"):
            cos = np.where(norm > 0, sig / np.where(norm > 0, norm, 1.0), 0.0)
        ang = np.arccos(np.clip(cos, -1.0, 1.0))
        new = norm / (2 * np.pi) * (np.sin(ang) + (np.pi - ang) * np.cos(ang))
        dot = (np.pi - ang) / (2 * np.pi)
        theta = theta * dot + new
        sig = new
        sigmas.append(sig)
        dots.append(dot)
    return ReluKernels(sigmas, dots, theta)


def analytic_ntk_relu_mlp(X, depth: int, n_out: int = 1, activation: str = "relu") -> NtkGram:
    """Infinite-width NTK of a bias-free ReLU chain, ``Theta_inf kron I_n``."""
    if activation != "relu":
        raise ContractError("the analytic kernel is only available for ReLU chains")
    k = relu_kernel_recursion(X, depth)
    mat = np.kron(k.theta, np.eye(n_out))
    return NtkGram.from_matrix(mat, k.theta.shape[0], n_out)


def relative_entry_deviation(empirical: np.ndarray, analytic: np.ndarray) -> float:
    return float(np.abs(empirical - analytic).max() / np.abs(analytic).max())


def ntk_width_convergence(
    widths: Sequence[int], X, depth: int, seeds: Sequence[int]
) -> list[tuple[int, float]]:
    """Seed-averaged max relative entry deviation of the empirical NTK from the limit."""
    X = np.asarray(X, dtype=np.float64)
    target = analytic_ntk_relu_mlp(X, depth).matrix
    out = []
    for w in widths:
        devs = [
            relative_entry_deviation(exact_ntk(MlpNet(X.shape[1], [w] * (depth - 1), 1, seed=s), X).matrix, target)
            for s in seeds
        ]
        out.append((w, float(np.mean(devs))))
    return out


def prop2_bound(gamma: float, depth: int, n0: int, z: float = 2.0) -> float:
    d = depth if gamma == 1 else (1 - gamma ** (2 * depth)) / (1 - gamma**2)
    return z * d / n0


def prop2_gap_check(net: Network, P, Q, gamma: float, depth: int) -> tuple[float, float]:
    """(normalized trace gap between two sample sets, its bound with Z = 2)."""
    P = np.asarray(P, dtype=np.float64)
    Q = np.asarray(Q, dtype=np.float64)
    for name, S in (("P", P), ("Q", Q)):
        if np.linalg.norm(S, axis=1).max() > 1 + 1e-12:
            raise ContractError(f"samples in {name} must satisfy ||x|| <= 1")
    if P.shape[0] != Q.shape[0]:
        raise ContractError("P and Q need the same sample count")
    m, n, n0 = P.shape[0], net.n_outputs, P.shape[1]
    gap = abs(trace_norm_exact(net, P) - trace_norm_exact(net, Q)) / (m * n)
    return gap, prop2_bound(gamma, depth, n0)
