"""Dense numeric kernel shared by every model in the package.

Matrices are plain ``numpy.ndarray`` objects of dtype float64 in row-major
(C) order, with the row index addressing the output unit. All randomness goes
through :func:`make_rng`, a PCG64 generator whose stream is fixed by numpy's
bit-generator contract, so a seed reproduces the same numbers on any platform.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "ShapeError",
    "as_matrix",
    "as_vector",
    "matmul",
    "sigmoid",
    "tanh_act",
    "softmax",
    "make_rng",
    "uniform",
    "all_finite",
]


class ShapeError(ValueError):
    """Raised when operand dimensions do not agree."""


def as_matrix(a) -> np.ndarray:
    m = np.ascontiguousarray(a, dtype=np.float64)
    if m.ndim != 2:
        raise ShapeError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def as_vector(v) -> np.ndarray:
    x = np.ascontiguousarray(v, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-d vector, got shape {x.shape}")
    return x


def matmul(a, b) -> np.ndarray:
    """Matrix product with an explicit shape check.

    >>> matmul([[1, 2], [3, 4]], [[0], [1]]).tolist()
    [[2.0], [4.0]]
    """
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def sigmoid(x):
    """Logistic function, overflow-free for any finite input."""
    x = np.asarray(x, dtype=np.float64)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return out if out.ndim else float(out)


def tanh_act(x):
    out = np.tanh(np.asarray(x, dtype=np.float64))
    return out if out.ndim else float(out)


def softmax(logits) -> np.ndarray:
    x = np.asarray(logits, dtype=np.float64)
    if x.size == 0:
        raise ValueError("softmax of an empty vector")
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def make_rng(seed: int) -> np.random.Generator:
    if seed is None or int(seed) < 0 or int(seed) >= 2**64:
        raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
    return np.random.Generator(np.random.PCG64(int(seed)))


def uniform(rng: np.random.Generator, shape, bound: float) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


def all_finite(*arrays) -> bool:
    return all(np.isfinite(a).all() for a in arrays)
