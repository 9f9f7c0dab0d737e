"""Deterministic dense linear algebra and activations.

Matrices are plain 2-D ``float64`` numpy arrays. Products go through the
compiled ``_kernels`` extension when it is importable and through the
bit-identical ``_fallback`` otherwise; set ``PREDCODE_PURE=1`` to force the
fallback. No product ever touches BLAS, because BLAS does not promise a
summation order.

Every call to :func:`matmul` / :func:`matmul_tn` bumps a per-thread matmul
tally, and :func:`outer` / :func:`batch_outer` bump a separate outer-product
tally. The execution engine reads these to build its step ledger.
"""

from __future__ import annotations

import enum
import os
import threading

import numpy as np

from .errors import DivergenceError, ShapeError

if os.environ.get("PREDCODE_PURE", "0") == "1":
    from . import _fallback as _backend
else:
    try:
        from . import _kernels as _backend
    except ImportError:  # extension not built
        from . import _fallback as _backend

BACKEND = "compiled" if _backend.__name__.endswith("_kernels") else "python"

_tally = threading.local()


def _bump(kind: str) -> None:
    setattr(_tally, kind, getattr(_tally, kind, 0) + 1)


def tally() -> tuple[int, int]:
    """(matmuls, outer products) issued so far on the calling thread."""
    return getattr(_tally, "mm", 0), getattr(_tally, "outer", 0)


def as_matrix(a) -> np.ndarray:
    """Coerce to a C-contiguous 2-D float64 array."""
    arr = np.ascontiguousarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {arr.shape}")
    return arr


def check_finite(a: np.ndarray, what: str = "result", layer: int | None = None) -> np.ndarray:
    if not np.isfinite(a).all():
        raise DivergenceError(f"non-finite values in {what}", layer=layer)
    return a


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul {a.shape} x {b.shape}")
    _bump("mm")
    return check_finite(_backend.matmul(a, b), "matmul")


def matmul_tn(a, b) -> np.ndarray:
    """``transpose(a) @ b``; same summation order as ``matmul(transpose(a), b)``."""
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul_tn {a.shape}^T x {b.shape}")
    _bump("mm")
    return check_finite(_backend.matmul_tn(a, b), "matmul_tn")


def transpose(a) -> np.ndarray:
    return np.ascontiguousarray(as_matrix(a).T)


def hadamard(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape != b.shape:
        raise ShapeError(f"hadamard {a.shape} vs {b.shape}")
    return check_finite(a * b, "hadamard")


def outer(u, v) -> np.ndarray:
    u, v = as_matrix(u), as_matrix(v)
    if u.shape[1] != 1 or v.shape[1] != 1:
        raise ShapeError(f"outer expects column vectors, got {u.shape} and {v.shape}")
    return batch_outer(u, v)


def batch_outer(u, v) -> np.ndarray:
    """``sum_b u[:, b] v[:, b]^T``: the batched outer product behind weight gradients."""
    u, v = as_matrix(u), as_matrix(v)
    if u.shape[1] != v.shape[1]:
        raise ShapeError(f"batch_outer batch sizes {u.shape[1]} vs {v.shape[1]}")
    _bump("outer")
    return check_finite(_backend.batch_outer(u, v), "batch_outer")


class Activation(str, enum.Enum):
    TANH = "tanh"
    RELU = "relu"
    IDENTITY = "identity"

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self is Activation.TANH:
            return np.tanh(x)
        if self is Activation.RELU:
            return np.maximum(x, 0.0)
        return np.array(x, dtype=np.float64, copy=True)

    def derivative(self, x: np.ndarray) -> np.ndarray:
        # relu'(0) is taken as 0
        if self is Activation.TANH:
            t = np.tanh(x)
            return 1.0 - t * t
        if self is Activation.RELU:
            return (x > 0.0).astype(np.float64)
        return np.ones_like(x, dtype=np.float64)


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator; the only source of randomness in the library."""
    if seed < 0 or seed >= 2**64:
        raise ValueError("seed must fit in an unsigned 64-bit integer")
    return np.random.Generator(np.random.PCG64(seed))


INIT_SCHEMES = ("uniform_fan_in", "xavier_uniform")


def init_weights(rows: int, cols: int, rng: np.random.Generator,
                 scheme: str = "uniform_fan_in") -> np.ndarray:
    """Uniform weights on [-k, k].

    ``uniform_fan_in`` uses k = 1/sqrt(cols), the default of common
    fully-connected layers; ``xavier_uniform`` uses k = sqrt(6/(rows+cols)).
    """
    if rows <= 0 or cols <= 0:
        raise ShapeError(f"init_weights needs positive dims, got {rows}x{cols}")
    if scheme == "uniform_fan_in":
        k = 1.0 / np.sqrt(cols)
    elif scheme == "xavier_uniform":
        k = np.sqrt(6.0 / (rows + cols))
    else:
        raise ValueError(f"unknown init scheme {scheme!r}")
    return rng.uniform(-k, k, size=(rows, cols))
