"""Micro cell-DAG search spaces, concrete architectures and weight instantiation.

A cell has input nodes 0 and 1 (the two preceding states), intermediate nodes
2..N-1 that each apply one operation to one earlier node, and an output that
merges all intermediate nodes. Architectures stack ``num_cells`` identical
cells between two stems and a linear head.

Weights are drawn per supergraph slot (cell, node, op) from a seed derived
from the instance seed, so every architecture instantiated with the same seed
shares the weights of the slots it uses.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np

from . import ops
from . import tensor as T
from .tensor import ContractError, Tensor

VECTOR_OPS = ("identity", "zero", "dense-relu", "dense-tanh")
IMAGE_OPS = ("identity", "zero", "conv3x3-relu", "conv1x1-relu", "mean-pool3x3", "max-pool3x3")
MERGE_RULES = ("sum", "concat")
COMPLEXITY = ("small", "large")
DEFAULT_CAP = 100_000


class EnumerationTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class CellSpace:
    num_nodes: int
    catalog: tuple[str, ...]
    input_shape: tuple[int, ...]
    output_dim: int
    width: int
    merge: str = "sum"
    num_cells: int = 1
    seed: int = 0
    complexity: str = "small"  # sets the default penalty coefficient

    def __post_init__(self):
        object.__setattr__(self, "catalog", tuple(self.catalog))
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        if self.num_nodes < 3:
            raise ContractError("a cell needs at least 3 nodes (two inputs, one intermediate)")
        if not self.catalog:
            raise ContractError("operation catalog is empty")
        if self.merge not in MERGE_RULES:
            raise ContractError(f"merge must be one of {MERGE_RULES}, got {self.merge!r}")
        if len(self.input_shape) not in (1, 3):
            raise ContractError("input shape must be (n0,) or (H, W, C)")
        allowed = IMAGE_OPS if self.is_image else VECTOR_OPS
        bad = [op for op in self.catalog if op not in allowed]
        if bad:
            raise ContractError(f"operations {bad} not available for {'image' if self.is_image else 'vector'} inputs")
        if self.complexity not in COMPLEXITY:
            raise ContractError(f"complexity must be one of {COMPLEXITY}")
        if self.width < 1 or self.output_dim < 1 or self.num_cells < 1:
            raise ContractError("width, output and cells must be positive")

    @property
    def is_image(self) -> bool:
        return len(self.input_shape) == 3

    @property
    def input_dim(self) -> int:
        return int(np.prod(self.input_shape))

    @property
    def intermediate_nodes(self) -> range:
        return range(2, self.num_nodes)

    @property
    def size(self) -> int:
        return math.prod(len(self.catalog) * i for i in self.intermediate_nodes)


@dataclass(frozen=True, order=True)
class ArchId:
    """One op index and one input index per intermediate node (2..N-1)."""

    ops: tuple[int, ...]
    inputs: tuple[int, ...]

    def validate(self, space: CellSpace) -> "ArchId":
        n = len(space.intermediate_nodes)
        if len(self.ops) != n or len(self.inputs) != n:
            raise ContractError(f"architecture has {len(self.ops)} nodes, space has {n}")
        for i, o, j in zip(space.intermediate_nodes, self.ops, self.inputs):
            if not 0 <= o < len(space.catalog):
                raise ContractError(f"node {i}: op index {o} out of range")
            if not 0 <= j < i:
                raise ContractError(f"node {i}: input index {j} must precede the node")
        return self

    def key(self) -> str:
        return "-".join(f"o{o}i{j}" for o, j in zip(self.ops, self.inputs))

    @classmethod
    def parse(cls, key: str) -> "ArchId":
        ops_, ins = [], []
        for part in key.split("-"):
            o, j = part[1:].split("i")
            ops_.append(int(o))
            ins.append(int(j))
        return cls(tuple(ops_), tuple(ins))

    def describe(self, space: CellSpace) -> str:
        return ", ".join(
            f"x{i}={space.catalog[o]}(x{j})" for i, o, j in zip(space.intermediate_nodes, self.ops, self.inputs)
        )


def rank(space: CellSpace, arch: ArchId) -> int:
    """Position of ``arch`` in the canonical enumeration (first node most significant)."""
    r = 0
    for i, o, j in zip(space.intermediate_nodes, arch.ops, arch.inputs):
        r = r * (len(space.catalog) * i) + o * i + j
    return r


def unrank(space: CellSpace, r: int) -> ArchId:
    if not 0 <= r < space.size:
        raise ContractError(f"rank {r} outside 0..{space.size - 1}")
    ops_, ins = [], []
    for i in reversed(space.intermediate_nodes):
        r, d = divmod(r, len(space.catalog) * i)
        ops_.append(d // i)
        ins.append(d % i)
    return ArchId(tuple(reversed(ops_)), tuple(reversed(ins)))


def enumerate_space(space: CellSpace, cap: int = DEFAULT_CAP) -> list[ArchId]:
    size = space.size
    if size > cap:
        raise EnumerationTooLarge(f"space has {size} architectures, cap is {cap}")
    per_node = [[(o, j) for o in range(len(space.catalog)) for j in range(i)] for i in space.intermediate_nodes]
    return [ArchId(tuple(c[0] for c in combo), tuple(c[1] for c in combo)) for combo in itertools.product(*per_node)]


# ---------------------------------------------------------------------------
# weights


def _op_param_shape(space: CellSpace, op: str) -> tuple[int, ...] | None:
    k = space.width
    if op.startswith("dense"):
        return (k, k)
    if op == "conv3x3-relu":
        return (3, 3, k, k)
    if op == "conv1x1-relu":
        return (1, 1, k, k)
    return None


def param_slots(space: CellSpace, arch: ArchId | None = None) -> list[tuple[str, tuple[int, ...], tuple[int, ...]]]:
    """Ordered (name, shape, spawn key) for every weight the network uses.

    With ``arch=None`` the full supergraph is listed.
    """
    k = space.width
    if space.is_image:
        c_in = space.input_shape[2]
        stem = (3, 3, c_in, k)
    else:
        stem = (space.input_dim, k)
    slots = [("stem0", stem, (0, 0)), ("stem1", stem, (0, 1))]
    n_inter = len(space.intermediate_nodes)
    for c in range(space.num_cells):
        for idx, i in enumerate(space.intermediate_nodes):
            choices = range(len(space.catalog)) if arch is None else [arch.ops[idx]]
            for o in choices:
                shape = _op_param_shape(space, space.catalog[o])
                if shape is not None:
                    slots.append((f"cell{c}.node{i}.op{o}", shape, (1, c, i, o)))
        if space.merge == "concat":
            proj = (1, 1, k * n_inter, k) if space.is_image else (k * n_inter, k)
            slots.append((f"cell{c}.proj", proj, (2, c)))
    slots.append(("head", (k, space.output_dim), (3, 0)))
    return slots


def param_count(space: CellSpace, arch: ArchId) -> int:
    return sum(math.prod(shape) for _, shape, _ in param_slots(space, arch))


def _draw(seed: int, spawn_key: tuple[int, ...], shape: tuple[int, ...]) -> np.ndarray:
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=spawn_key))
    return rng.standard_normal(shape)


class Network:
    """Anything with an ordered parameter list and a batched forward pass."""

    names: list[str]
    params: list[Tensor]
    n_outputs: int
    input_dim: int

    def forward(self, X: Tensor, params: Sequence[Tensor] | None = None) -> Tensor:
        raise NotImplementedError

    @property
    def num_params(self) -> int:
        return sum(p.size for p in self.params)

    @property
    def theta(self) -> Tensor:
        """All parameters flattened into one vector (the order of ``params``)."""
        if not self.params:
            return Tensor.wrap(np.zeros(0))
        return Tensor.wrap(np.concatenate([p.data.reshape(-1) for p in self.params]))


@dataclass(frozen=True)
class MixWeights:
    """Per-node op and input weights for a relaxed (supergraph) forward pass."""

    ops: tuple[Tensor, ...]
    inputs: tuple[Tensor, ...]

    @property
    def leaves(self) -> list[Tensor]:
        return [*self.ops, *self.inputs]


class ArchInstance(Network):
    """An architecture with NTK-parameterized weights ``theta_0``.

    ``arch=None`` gives the supergraph holding the weights of every slot; its
    forward needs ``mix`` weights.
    """

    def __init__(self, space: CellSpace, arch: ArchId | None, seed: int, params: Sequence[Tensor] | None = None):
        self.space = space
        self.arch = arch
        self.seed = seed
        slots = param_slots(space, arch)
        self.names = [s[0] for s in slots]
        if params is None:
            params = [Tensor.wrap(_draw(seed, key, shape)) for _, shape, key in slots]
        self.params = list(params)
        self.n_outputs = space.output_dim
        self.input_dim = space.input_dim

    def with_params(self, params: Sequence[Tensor]) -> "ArchInstance":
        return ArchInstance(self.space, self.arch, self.seed, params)

    def forward(
        self, X: Tensor, params: Sequence[Tensor] | None = None, mix: MixWeights | None = None
    ) -> Tensor:
        sp = self.space
        if X.data.ndim != 2 or X.shape[1] != sp.input_dim:
            raise ContractError(f"expected input of shape (m, {sp.input_dim}), got {X.shape}")
        if self.arch is None and mix is None:
            raise ContractError("supergraph forward needs mix weights")
        P = dict(zip(self.names, self.params if params is None else params))
        m = X.shape[0]
        if sp.is_image:
            x = T.reshape(X, (m, *sp.input_shape))
            s0 = ops.forward_op("conv3x3", [x], [P["stem0"]])
            s1 = ops.forward_op("conv3x3", [x], [P["stem1"]])
        else:
            s0 = ops.forward_op("dense", [X], [P["stem0"]])
            s1 = ops.forward_op("dense", [X], [P["stem1"]])
        for c in range(sp.num_cells):
            out = self._cell(c, s0, s1, P, mix)
            s0, s1 = s1, out
        h = s1
        if sp.is_image:
            _, hh, ww, _ = h.shape
            h = T.scale(T.reduce_sum(h, axis=(1, 2)), 1.0 / (hh * ww))
        return ops.forward_op("dense", [h], [P["head"]])

    def _cell(self, c: int, s0: Tensor, s1: Tensor, P: dict, mix: MixWeights | None) -> Tensor:
        sp = self.space
        states = [s0, s1]
        for idx, i in enumerate(sp.intermediate_nodes):
            if mix is None:
                o, j = self.arch.ops[idx], self.arch.inputs[idx]
                states.append(self._apply(c, i, o, states[j], P))
                continue
            wx, wo = mix.inputs[idx], mix.ops[idx]
            x_in = None
            for j in range(i):
                term = T.mul(T.slice_axis(wx, 0, j, j + 1), states[j])
                x_in = term if x_in is None else T.add(x_in, term)
            y = None
            for o in range(len(sp.catalog)):
                if sp.catalog[o] == "zero":
                    continue
                term = T.mul(T.slice_axis(wo, 0, o, o + 1), self._apply(c, i, o, x_in, P))
                y = term if y is None else T.add(y, term)
            states.append(T.zeros(x_in.shape) if y is None else y)
        inter = states[2:]
        if sp.merge == "sum":
            return ops.forward_op("add", inter)
        cat = ops.forward_op("concat", inter)
        return ops.forward_op("conv1x1" if sp.is_image else "dense", [cat], [P[f"cell{c}.proj"]])

    def _apply(self, c: int, i: int, o: int, x: Tensor, P: dict) -> Tensor:
        op = self.space.catalog[o]
        if op == "identity":
            return x
        if op == "zero":
            return ops.forward_op("zero", [x])
        if op == "mean-pool3x3":
            return ops.forward_op("mean_pool", [x])
        if op == "max-pool3x3":
            return ops.forward_op("max_pool", [x])
        w = P[f"cell{c}.node{i}.op{o}"]
        if op == "dense-relu":
            return ops.forward_op("relu", [ops.forward_op("dense", [x], [w])])
        if op == "dense-tanh":
            return ops.forward_op("tanh", [ops.forward_op("dense", [x], [w])])
        kind = "conv3x3" if op == "conv3x3-relu" else "conv1x1"
        return ops.forward_op("relu", [ops.forward_op(kind, [x], [w])])


def instantiate(space: CellSpace, arch: ArchId, seed: int) -> ArchInstance:
    return ArchInstance(space, arch.validate(space), seed)


def instantiate_supernet(space: CellSpace, seed: int) -> ArchInstance:
    return ArchInstance(space, None, seed)


def forward(instance: Network, X: Tensor) -> Tensor:
    return instance.forward(X)


class MlpNet(Network):
    """Fully connected chain ``n0 -> hidden... -> n_out`` with NTK parameterization."""

    def __init__(
        self,
        n0: int,
        hidden: Sequence[int],
        n_out: int = 1,
        activation: str = "relu",
        seed: int = 0,
        params: Sequence[Tensor] | None = None,
    ):
        if activation not in ("relu", "tanh"):
            raise ContractError(f"unsupported activation {activation!r}")
        self.n0, self.hidden, self.activation, self.seed = n0, tuple(hidden), activation, seed
        dims = [n0, *self.hidden, n_out]
        self.names = [f"layer{i}" for i in range(len(dims) - 1)]
        if params is None:
            rng = np.random.default_rng(seed)
            params = [Tensor.wrap(rng.standard_normal((a, b))) for a, b in zip(dims[:-1], dims[1:])]
        self.params = list(params)
        self.n_outputs = n_out
        self.input_dim = n0

    @property
    def depth(self) -> int:
        return len(self.hidden) + 1

    def with_params(self, params: Sequence[Tensor]) -> "MlpNet":
        return MlpNet(self.n0, self.hidden, self.n_outputs, self.activation, self.seed, params)

    def forward(self, X: Tensor, params: Sequence[Tensor] | None = None) -> Tensor:
        ps = self.params if params is None else list(params)
        if X.data.ndim != 2 or X.shape[1] != self.n0:
            raise ContractError(f"expected input of shape (m, {self.n0}), got {X.shape}")
        h = X
        for w in ps[:-1]:
            h = ops.forward_op(self.activation, [ops.forward_op("dense", [h], [w])])
        return ops.forward_op("dense", [h], [ps[-1]])


# ---------------------------------------------------------------------------
# architecture distribution


@dataclass
class AlphaParams:
    """Logits per intermediate node: one vector over ops, one over inputs."""

    ops: list[np.ndarray]
    inputs: list[np.ndarray]

    @classmethod
    def zeros(cls, space: CellSpace) -> "AlphaParams":
        return cls(
            [np.zeros(len(space.catalog)) for _ in space.intermediate_nodes],
            [np.zeros(i) for i in space.intermediate_nodes],
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([*self.ops, *self.inputs])

    def like(self, vec: np.ndarray) -> "AlphaParams":
        vec = np.asarray(vec, dtype=np.float64)
        sizes = [len(a) for a in self.ops] + [len(a) for a in self.inputs]
        if vec.size != sum(sizes):
            raise ContractError(f"vector of length {vec.size} does not fit logits of length {sum(sizes)}")
        parts = np.split(vec, np.cumsum(sizes)[:-1])
        n = len(self.ops)
        return AlphaParams([p.copy() for p in parts[:n]], [p.copy() for p in parts[n:]])

    def __add__(self, other: "AlphaParams") -> "AlphaParams":
        return self.like(self.flat() + other.flat())


def gumbel_draw(alpha: AlphaParams, rng: np.random.Generator) -> AlphaParams:
    return alpha.like(rng.gumbel(size=alpha.flat().size))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


@dataclass(frozen=True)
class SoftWeights:
    """Softmax of the perturbed logits per node; the straight-through backward path."""

    ops: tuple[np.ndarray, ...]
    inputs: tuple[np.ndarray, ...]
    tau: float = 1.0


def sample_architecture(alpha: AlphaParams, g: AlphaParams, tau: float = 1.0) -> tuple[ArchId, SoftWeights]:
    """Straight-through Gumbel sample: argmax of softmax((alpha + g) / tau) per node."""
    if tau <= 0:
        raise ContractError("temperature must be positive")
    op_soft = tuple(_softmax((a + n) / tau) for a, n in zip(alpha.ops, g.ops))
    in_soft = tuple(_softmax((a + n) / tau) for a, n in zip(alpha.inputs, g.inputs))
    # argmax on the logits themselves: softmax is monotone and this avoids rounding ties
    arch = ArchId(
        tuple(int(np.argmax(a + n)) for a, n in zip(alpha.ops, g.ops)),
        tuple(int(np.argmax(a + n)) for a, n in zip(alpha.inputs, g.inputs)),
    )
    return arch, SoftWeights(op_soft, in_soft, tau)


def argmax_architecture(alpha: AlphaParams) -> ArchId:
    """Most probable architecture under p_alpha (ties go to the lowest index)."""
    return ArchId(tuple(int(np.argmax(a)) for a in alpha.ops), tuple(int(np.argmax(a)) for a in alpha.inputs))


def log_prob(alpha: AlphaParams, arch: ArchId) -> float:
    """log p_alpha(arch) with independent categoricals per node."""
    total = 0.0
    for a, o in zip(alpha.ops, arch.ops):
        total += a[o] - np.log(np.exp(a - a.max()).sum()) - a.max()
    for a, j in zip(alpha.inputs, arch.inputs):
        total += a[j] - np.log(np.exp(a - a.max()).sum()) - a.max()
    return float(total)


def iter_batches(m: int, b: int) -> Iterator[slice]:
    for start in range(0, m, b):
        yield slice(start, min(start + b, m))
