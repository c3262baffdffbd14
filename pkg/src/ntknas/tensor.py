"""Dense float64 tensors with a recording tape for reverse-mode differentiation.

Every primitive records a node whose vector-Jacobian product is itself written
in terms of primitives, so ``backward(..., create_graph=True)`` yields
gradients that can be differentiated again (needed for the gradient of a
squared gradient norm).
"""
from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

_ids = itertools.count()


class ContractError(ValueError):
    """An operation received inputs that violate its shape/kind contract."""


class NumericError(FloatingPointError):
    """An operation produced a non-finite value."""


class UsageError(RuntimeError):
    """A tape was used in a way its lifecycle does not allow."""


class Tensor:
    """Immutable row-major float64 array with a unique id."""

    __slots__ = ("data", "id")

    def __init__(self, data, *, _copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=_copy)
        if not _copy and arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr
        self.id = next(_ids)

    @classmethod
    def wrap(cls, arr: np.ndarray) -> "Tensor":
        """Take ownership of ``arr`` without copying."""
        return cls(np.ascontiguousarray(arr, dtype=np.float64), _copy=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, id={self.id})"

    # operator sugar; all route through recorded primitives
    def __add__(self, other):
        return add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, as_tensor(other))

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _raise_item(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass(frozen=True)
class Node:
    kind: str
    out_id: int
    in_ids: tuple[int, ...]
    vjp: Callable[[Tensor], Sequence[Tensor | None]]


class Tape:
    """Ordered record of primitive applications reachable from watched leaves.

    Single-owner; use one tape per worker thread.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.leaves: dict[int, Tensor] = {}
        self.tracked: set[int] = set()
        self.output: Tensor | None = None
        self.consumed = False
        self._position: dict[int, int] = {}
        self._paused = 0

    def watch(self, *tensors: Tensor) -> Tensor | tuple[Tensor, ...]:
        for t in tensors:
            self.leaves[t.id] = t
            self.tracked.add(t.id)
        return tensors[0] if len(tensors) == 1 else tensors

    def is_tracked(self, t: Tensor) -> bool:
        return t.id in self.tracked

    def _record(self, node: Node, out: Tensor) -> None:
        self._position[node.out_id] = len(self.nodes)
        self.nodes.append(node)
        self.tracked.add(node.out_id)
        self.output = out

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()


_local = threading.local()


def _stack() -> list:
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def active_tape() -> Tape | None:
    s = _stack()
    return s[-1] if s else None


def _emit(kind: str, out_data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NumericError(f"{kind}: non-finite output")
    out = Tensor.wrap(out_data)
    tape = active_tape()
    if tape is not None and not tape._paused and any(t.id in tape.tracked for t in inputs):
        tape._record(Node(kind, out.id, tuple(t.id for t in inputs), vjp), out)
    return out


# ---------------------------------------------------------------------------
# primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    return _emit("add", a.data + b.data, (a, b), lambda g: (sum_to(g, a.shape), sum_to(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        "sub", a.data - b.data, (a, b), lambda g: (sum_to(g, a.shape), sum_to(scale(g, -1.0), b.shape))
    )


def mul(a: Tensor, b: Tensor) -> Tensor:
    return _emit(
        "mul", a.data * b.data, (a, b), lambda g: (sum_to(mul(g, b), a.shape), sum_to(mul(g, a), b.shape))
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    def vjp(g):
        ga = div(g, b)
        return sum_to(ga, a.shape), sum_to(scale(mul(ga, out), -1.0), b.shape)

    out = _emit("div", a.data / b.data, (a, b), vjp)
    return out


def scale(a: Tensor, c: float) -> Tensor:
    return _emit("scale", a.data * c, (a,), lambda g: (scale(g, c),))


def add_scalar(a: Tensor, c: float) -> Tensor:
    return _emit("add_scalar", a.data + c, (a,), lambda g: (g,))


def mask_mul(a: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant (non-differentiable) array."""
    return _emit("mask_mul", a.data * mask, (a,), lambda g: (sum_to(mask_mul(g, mask), a.shape),))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ContractError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    return _emit(
        "matmul",
        a.data @ b.data,
        (a, b),
        lambda g: (matmul(g, transpose(b)), matmul(transpose(a), g)),
    )


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    axes = tuple(reversed(range(a.data.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    return _emit("transpose", np.ascontiguousarray(a.data.transpose(axes)), (a,), lambda g: (transpose(g, inv),))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    return _emit("reshape", a.data.reshape(shape), (a,), lambda g: (reshape(g, a.shape),))


def reduce_sum(a: Tensor, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:
    def vjp(g):
        if axis is None:
            kept = (1,) * a.data.ndim
        else:
            ax = (axis,) if isinstance(axis, int) else axis
            ax = tuple(x % a.data.ndim for x in ax)
            kept = tuple(1 if i in ax else n for i, n in enumerate(a.shape))
        return (broadcast_to(reshape(g, kept), a.shape),)

    return _emit("reduce_sum", np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), vjp)


def broadcast_to(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if a.shape == shape:
        return a
    return _emit("broadcast_to", np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (sum_to(g, a.shape),))


def sum_to(g: Tensor, shape: Sequence[int]) -> Tensor:
    """Reduce a broadcast result back to ``shape``."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    lead = g.data.ndim - len(shape)
    if lead:
        g = reduce_sum(g, axis=tuple(range(lead)))
    ax = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if ax:
        g = reduce_sum(g, axis=ax, keepdims=True)
    return g


def exp(a: Tensor) -> Tensor:
    out = _emit("exp", np.exp(a.data), (a,), lambda g: (mul(g, out),))
    return out


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        val = np.log(a.data)
    return _emit("log", val, (a,), lambda g: (div(g, a),))


def tanh(a: Tensor) -> Tensor:
    out = _emit("tanh", np.tanh(a.data), (a,), lambda g: (mul(g, add_scalar(scale(mul(out, out), -1.0), 1.0)),))
    return out


def relu(a: Tensor) -> Tensor:
    # subgradient 0 at the origin
    return mask_mul(a, (a.data > 0).astype(np.float64))


def gather(a: Tensor, index: np.ndarray) -> Tensor:
    """Pick flat entries of ``a``; index -1 yields 0. Output shape = index.shape."""
    flat = a.data.reshape(-1)
    padded = np.concatenate([flat, [0.0]])
    return _emit("gather", padded[index], (a,), lambda g: (scatter(g, index, a.shape),))


def scatter(g: Tensor, index: np.ndarray, shape: Sequence[int]) -> Tensor:
    """Adjoint of :func:`gather`: accumulate ``g`` into zeros of ``shape``."""
    shape = tuple(shape)
    size = int(np.prod(shape))
    idx = index.reshape(-1)
    vals = g.data.reshape(-1)
    keep = idx >= 0
    out = np.bincount(idx[keep], weights=vals[keep], minlength=size).reshape(shape)
    return _emit("scatter", out, (g,), lambda gg: (gather(gg, index),))


def slice_axis(a: Tensor, axis: int, start: int, stop: int) -> Tensor:
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, stop)
    return _emit(
        "slice_axis",
        np.ascontiguousarray(a.data[tuple(sl)]),
        (a,),
        lambda g: (pad_axis(g, axis, start, a.shape[axis]),),
    )


def pad_axis(a: Tensor, axis: int, start: int, total: int) -> Tensor:
    shape = list(a.shape)
    shape[axis] = total
    out = np.zeros(shape)
    sl = [slice(None)] * a.data.ndim
    sl[axis] = slice(start, start + a.shape[axis])
    out[tuple(sl)] = a.data
    return _emit("pad_axis", out, (a,), lambda g: (slice_axis(g, axis, start, start + a.shape[axis]),))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    ax = axis % tensors[0].data.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        return tuple(slice_axis(g, ax, int(bounds[i]), int(bounds[i + 1])) for i in range(len(tensors)))

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), vjp)


def zeros(shape: Sequence[int]) -> Tensor:
    return Tensor.wrap(np.zeros(tuple(shape)))


# ---------------------------------------------------------------------------
# reverse pass


def backward(
    tape: Tape,
    seed_grad,
    output: Tensor | None = None,
    *,
    create_graph: bool = False,
    retain_graph: bool = False,
) -> dict[int, Tensor]:
    """Gradient of ``<output, seed_grad>`` with respect to every watched leaf.

    Leaves the graph does not reach get zero gradients. With
    ``create_graph`` the reverse computations are recorded on ``tape`` so the
    returned gradients are differentiable; this implies ``retain_graph``.
    """
    if tape.consumed:
        raise UsageError("tape already consumed by a previous backward()")
    out = tape.output if output is None else output
    if out is None:
        raise UsageError("tape has no recorded output")
    seed = as_tensor(seed_grad)
    if seed.shape != out.shape:
        if seed.size == out.size == 1:
            seed = Tensor.wrap(seed.data.reshape(out.shape))
        else:
            raise UsageError(f"seed shape {seed.shape} does not match output shape {out.shape}")

    cot: dict[int, Tensor] = {out.id: seed}
    if out.id in tape._position:
        end = tape._position[out.id] + 1
    elif out.id in tape.leaves:
        end = 0
    else:
        raise UsageError("output was not recorded on this tape")
    nodes = tape.nodes[:end]

    if create_graph:
        _stack().append(tape)
    else:
        tape._paused += 1
    try:
        for node in reversed(nodes):
            g = cot.pop(node.out_id, None)
            if g is None:
                continue
            grads = node.vjp(g)
            for iid, gi in zip(node.in_ids, grads):
                if gi is None or iid not in tape.tracked:
                    continue
                prev = cot.get(iid)
                cot[iid] = gi if prev is None else add(prev, gi)
    finally:
        if create_graph:
            _stack().pop()
        else:
            tape._paused -= 1

    if not (retain_graph or create_graph):
        tape.consumed = True
    result = {}
    for lid, leaf in tape.leaves.items():
        g = cot.get(lid)
        result[lid] = zeros(leaf.shape) if g is None else g
    return result


def grad(
    tape: Tape, output: Tensor, wrt: Sequence[Tensor], *, create_graph: bool = False, retain_graph: bool = True
) -> list[Tensor]:
    """Convenience wrapper: gradients of a scalar ``output`` for ``wrt``."""
    g = backward(tape, np.ones(output.shape), output, create_graph=create_graph, retain_graph=retain_graph)
    return [g[t.id] for t in wrt]
