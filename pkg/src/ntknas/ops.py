"""Operation catalog built from tensor primitives.

Dense and convolution kinds use NTK parameterization: weights are N(0, 1)
and the pre-activation is ``(W . x) / sqrt(fan_in)`` with no bias. Images are
channels-last, ``(m, H, W, C)``.
"""
from __future__ import annotations

import math
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import ContractError, Tensor

KINDS = (
    "dense",
    "conv3x3",
    "conv1x1",
    "relu",
    "tanh",
    "add",
    "concat",
    "mean_pool",
    "max_pool",
    "scale",
    "softmax",
    "identity",
    "zero",
)


def _fail(kind: str, inputs: Sequence[Tensor], params: Sequence[Tensor], why: str):
    shapes = [t.shape for t in inputs]
    pshapes = [t.shape for t in params]
    raise ContractError(f"{kind}: {why} (inputs {shapes}, params {pshapes})")


@lru_cache(maxsize=64)
def window_index(m: int, h: int, w: int, c: int, k: int) -> np.ndarray:
    """Flat indices of k x k 'same'-padded windows; -1 marks padding.

    Shape ``(m, h, w, k, k, c)`` into an ``(m, h, w, c)`` array.
    """
    r = k // 2
    ii = np.arange(h)[:, None] + np.arange(-r, r + 1)[None, :]  # (h, k)
    jj = np.arange(w)[:, None] + np.arange(-r, r + 1)[None, :]  # (w, k)
    vi = (ii >= 0) & (ii < h)
    vj = (jj >= 0) & (jj < w)
    base = (
        np.arange(m)[:, None, None, None, None, None] * (h * w * c)
        + ii[None, :, None, :, None, None] * (w * c)
        + jj[None, None, :, None, :, None] * c
        + np.arange(c)[None, None, None, None, None, :]
    )
    valid = vi[None, :, None, :, None, None] & vj[None, None, :, None, :, None]
    idx = np.where(np.broadcast_to(valid, base.shape), base, -1)
    idx.flags.writeable = False
    return idx


def dense(x: Tensor, w: Tensor) -> Tensor:
    return T.scale(T.matmul(x, w), 1.0 / math.sqrt(w.shape[0]))


def conv(x: Tensor, w: Tensor) -> Tensor:
    m, h, wd, c = x.shape
    k, _, cin, cout = w.shape
    fan_in = k * k * cin
    if k == 1:
        cols = T.reshape(x, (m * h * wd, c))
    else:
        cols = T.reshape(T.gather(x, window_index(m, h, wd, c, k)), (m * h * wd, fan_in))
    y = T.matmul(cols, T.reshape(w, (fan_in, cout)))
    return T.reshape(T.scale(y, 1.0 / math.sqrt(fan_in)), (m, h, wd, cout))


def mean_pool(x: Tensor, k: int = 3) -> Tensor:
    m, h, w, c = x.shape
    win = T.gather(x, window_index(m, h, w, c, k))
    return T.scale(T.reduce_sum(win, axis=(3, 4)), 1.0 / (k * k))


def max_pool(x: Tensor, k: int = 3) -> Tensor:
    m, h, w, c = x.shape
    idx = window_index(m, h, w, c, k)
    vals = np.concatenate([x.data.reshape(-1), [-np.inf]])[idx].reshape(m, h, w, k * k, c)
    arg = vals.argmax(axis=3)
    chosen = np.take_along_axis(idx.reshape(m, h, w, k * k, c), arg[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    return T.gather(x, chosen)


def log_softmax(x: Tensor) -> Tensor:
    shift = Tensor.wrap(x.data.max(axis=-1, keepdims=True))
    z = T.sub(x, shift)
    lse = T.log(T.reduce_sum(T.exp(z), axis=-1, keepdims=True))
    return T.sub(z, lse)


def softmax(x: Tensor) -> Tensor:
    return T.exp(log_softmax(x))


def forward_op(kind: str, inputs: Sequence[Tensor], params: Sequence[Tensor] = (), **attrs) -> Tensor:
    """Apply one catalog operation; recorded on the active tape if any."""
    inputs = list(inputs)
    params = list(params)
    if kind not in KINDS:
        raise ContractError(f"unknown operation kind {kind!r}")
    if kind in ("add", "concat"):
        if not inputs:
            _fail(kind, inputs, params, "needs at least one input")
    elif len(inputs) != 1:
        _fail(kind, inputs, params, "expects exactly one input")
    x = inputs[0]

    if kind == "dense":
        if len(params) != 1 or x.data.ndim != 2 or params[0].data.ndim != 2 or params[0].shape[0] != x.shape[1]:
            _fail(kind, inputs, params, "need x (m, fan_in) and W (fan_in, out)")
        return dense(x, params[0])
    if kind in ("conv3x3", "conv1x1"):
        k = 3 if kind == "conv3x3" else 1
        w = params[0] if len(params) == 1 else None
        if w is None or x.data.ndim != 4 or w.shape[:3] != (k, k, x.shape[3]):
            _fail(kind, inputs, params, f"need x (m, H, W, C) and W ({k}, {k}, C, C_out)")
        return conv(x, w)
    if kind in ("mean_pool", "max_pool"):
        if x.data.ndim != 4:
            _fail(kind, inputs, params, "need x (m, H, W, C)")
        return mean_pool(x) if kind == "mean_pool" else max_pool(x)
    if kind == "relu":
        return T.relu(x)
    if kind == "tanh":
        return T.tanh(x)
    if kind == "add":
        if any(t.shape != x.shape for t in inputs):
            _fail(kind, inputs, params, "shapes differ")
        out = x
        for t in inputs[1:]:
            out = T.add(out, t)
        return out
    if kind == "concat":
        if any(t.shape[:-1] != x.shape[:-1] for t in inputs):
            _fail(kind, inputs, params, "leading shapes differ")
        return T.concat(inputs, axis=-1)
    if kind == "scale":
        return T.scale(x, float(attrs["factor"]))
    if kind == "softmax":
        return softmax(x)
    if kind == "identity":
        return x
    return T.zeros(x.shape)
