"""Synthetic datasets and their on-disk format.

A dataset directory holds ``meta.json`` plus ``X.f32`` and ``Y.f32``: raw
little-endian float32, row-major, shapes ``(m, prod(input_shape))`` and
``(m, n_classes)``. Values are rounded to float32 when generated, so loading
(and promoting to float64) reproduces the in-memory arrays exactly.

meta.json keys (all required, no others accepted):

  m            number of samples
  input_shape  [n0] for vectors, [H, W, C] for images (rows store H, W, C order)
  n_classes    number of label columns
  normalized   true when every row satisfies ||x||_2 <= 1
  generator    one of blobs, spirals, gaussian_noise, image_patches
  seed         generator seed
  params       generator parameters echoed back
  label_mode   "onehot" (every row sums to 1) or "scaled" (entries in [0, 1])
"""
from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import ContractError

META_KEYS = {"m", "input_shape", "n_classes", "normalized", "generator", "seed", "params", "label_mode"}
GENERATORS = ("blobs", "spirals", "gaussian_noise", "image_patches")


@dataclass
class DatasetBundle:
    meta: dict
    X: np.ndarray  # float64 holding float32-representable values
    Y: np.ndarray

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return tuple(self.meta["input_shape"])

    @property
    def labels(self) -> np.ndarray:
        return self.Y.argmax(axis=1)

    def split(self, n_train: int) -> tuple["DatasetBundle", "DatasetBundle"]:
        a = DatasetBundle({**self.meta, "m": n_train}, self.X[:n_train], self.Y[:n_train])
        b = DatasetBundle({**self.meta, "m": self.m - n_train}, self.X[n_train:], self.Y[n_train:])
        return a, b

    def subset(self, idx) -> "DatasetBundle":
        idx = np.asarray(idx)
        return DatasetBundle({**self.meta, "m": int(idx.size)}, self.X[idx], self.Y[idx])


def normalize_rows(X: np.ndarray) -> np.ndarray:
    """Scale the whole set so the largest row norm is just below 1, then round to float32."""
    peak = np.linalg.norm(X, axis=1).max()
    Xs = X / peak * (1 - 1e-6) if peak > 0 else X
    out = Xs.astype(np.float32).astype(np.float64)
    assert np.linalg.norm(out, axis=1).max() <= 1.0
    return out


def _onehot(labels: np.ndarray, n: int) -> np.ndarray:
    return np.eye(n)[labels]


def _blobs(rng, m, n0=16, n_classes=2, spread=0.5):
    centers = rng.standard_normal((n_classes, n0))
    labels = rng.integers(0, n_classes, m)
    X = centers[labels] + spread * rng.standard_normal((m, n0))
    return X, labels


def _spirals(rng, m, n_classes=2, noise=0.1, turns=1.5, n0=2):
    labels = rng.integers(0, n_classes, m)
    r = rng.uniform(0.1, 1.0, m)
    ang = r * turns * 2 * np.pi + labels * 2 * np.pi / n_classes
    X2 = np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1) + noise * rng.standard_normal((m, 2))
    if n0 == 2:
        return X2, labels
    basis, _ = np.linalg.qr(rng.standard_normal((n0, 2)))
    return X2 @ basis.T, labels


def _gaussian_noise(rng, m, n0=64, n_classes=2):
    return rng.standard_normal((m, n0)), rng.integers(0, n_classes, m)


def _image_patches(rng, m, size=8, channels=3, n_classes=4, noise=0.6, contrast=1.0, color_shift=0.0):
    """Oriented bar textures: class c draws bars along one of four directions.

    Orientation is invisible to any linear function of the spatial mean, so
    classes need a nonlinearity applied before global pooling. ``color_shift``
    adds a per-class mean color, a cue that pointwise ops can also pick up.
    """
    if n_classes > 4:
        raise ContractError("image_patches supports at most 4 classes")
    labels = rng.integers(0, n_classes, m)
    yy, xx = np.mgrid[0:size, 0:size]
    coords = [yy, xx, yy + xx, yy - xx]
    X = np.empty((m, size, size, channels))
    colors = rng.standard_normal((m, channels))
    for s in range(m):
        phase = rng.integers(0, 3)
        stripes = ((coords[labels[s]] + phase) % 3 == 0).astype(float) - 1 / 3
        X[s] = contrast * stripes[:, :, None] * colors[s][None, None, :]
    X += noise * rng.standard_normal(X.shape)
    if color_shift:
        class_color = rng.standard_normal((n_classes, channels))
        X += color_shift * class_color[labels][:, None, None, :]
    return X.reshape(m, -1), labels


def gen_dataset(kind: str, m: int, seed: int = 0, normalize: bool = True, **params) -> DatasetBundle:
    if kind not in GENERATORS:
        raise ContractError(f"unknown generator {kind!r}; choose from {GENERATORS}")
    if m < 1:
        raise ContractError("m must be positive")
    rng = np.random.default_rng(seed)
    try:
        if kind == "blobs":
            X, labels = _blobs(rng, m, **params)
            shape = [X.shape[1]]
            n_classes = params.get("n_classes", 2)
        elif kind == "spirals":
            X, labels = _spirals(rng, m, **params)
            shape = [X.shape[1]]
            n_classes = params.get("n_classes", 2)
        elif kind == "gaussian_noise":
            X, labels = _gaussian_noise(rng, m, **params)
            shape = [X.shape[1]]
            n_classes = params.get("n_classes", 2)
        else:
            X, labels = _image_patches(rng, m, **params)
            size, ch = params.get("size", 8), params.get("channels", 3)
            shape = [size, size, ch]
            n_classes = params.get("n_classes", 4)
    except TypeError as e:
        raise ContractError(f"invalid parameters for {kind}: {e}") from None
    X = normalize_rows(X) if normalize else X.astype(np.float32).astype(np.float64)
    meta = {
        "m": m,
        "input_shape": shape,
        "n_classes": int(n_classes),
        "normalized": bool(normalize),
        "generator": kind,
        "seed": seed,
        "params": params,
        "label_mode": "onehot",
    }
    return DatasetBundle(meta, X, _onehot(labels, n_classes).astype(np.float64))


def random_labels(bundle: DatasetBundle, seed: int) -> DatasetBundle:
    """Same inputs, labels permuted across samples."""
    perm = np.random.default_rng(seed).permutation(bundle.m)
    return DatasetBundle(dict(bundle.meta), bundle.X, bundle.Y[perm])


def random_data(bundle: DatasetBundle, seed: int) -> DatasetBundle:
    """Same labels, inputs resampled from N(0, I) and renormalized."""
    rng = np.random.default_rng(seed)
    X = normalize_rows(rng.standard_normal(bundle.X.shape))
    return DatasetBundle({**bundle.meta, "generator": "gaussian_noise"}, X, bundle.Y)


# ---------------------------------------------------------------------------
# serialization


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(bundle: DatasetBundle, directory) -> Path:
    d = Path(directory)
    atomic_write_bytes(d / "X.f32", bundle.X.astype("<f4").tobytes())
    atomic_write_bytes(d / "Y.f32", bundle.Y.astype("<f4").tobytes())
    atomic_write_bytes(d / "meta.json", (json.dumps(bundle.meta, indent=2, sort_keys=True) + "\n").encode())
    return d


def validate_meta(meta: dict) -> None:
    unknown = set(meta) - META_KEYS
    missing = META_KEYS - set(meta)
    if unknown:
        raise ContractError(f"unknown meta.json keys: {sorted(unknown)}")
    if missing:
        raise ContractError(f"missing meta.json keys: {sorted(missing)}")
    if meta["generator"] not in GENERATORS:
        raise ContractError(f"unknown generator {meta['generator']!r}")
    if meta["label_mode"] not in ("onehot", "scaled"):
        raise ContractError(f"unknown label mode {meta['label_mode']!r}")


def load_dataset(directory) -> DatasetBundle:
    d = Path(directory)
    meta = json.loads((d / "meta.json").read_text())
    validate_meta(meta)
    m, n0 = meta["m"], int(np.prod(meta["input_shape"]))
    X = np.fromfile(d / "X.f32", dtype="<f4")
    Y = np.fromfile(d / "Y.f32", dtype="<f4")
    if X.size != m * n0 or Y.size != m * meta["n_classes"]:
        raise ContractError("buffer sizes do not match meta.json")
    X = X.reshape(m, n0).astype(np.float64)
    Y = Y.reshape(m, meta["n_classes"]).astype(np.float64)
    if meta["normalized"] and np.linalg.norm(X, axis=1).max() > 1.0:
        raise ContractError("dataset flagged normalized has rows with ||x|| > 1")
    return DatasetBundle(meta, X, Y)
