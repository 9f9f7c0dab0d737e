"""Pure-numpy kernels, bit-compatible with the compiled ``_kernels`` module.

Each loop iteration adds one rank-1 slab into the accumulator, so every
output entry sees its products in ascending inner index, exactly like the
compiled loops. Slow for wide inner dimensions but always available.
"""

import numpy as np


def matmul(a, b):
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: inner dims differ ({a.shape[1]} vs {b.shape[0]})")
    out = np.zeros((a.shape[0], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[1]):
        out += a[:, k, None] * b[None, k, :]
    return out


def matmul_tn(a, b):
    if a.shape[0] != b.shape[0]:
        raise ValueError(f"matmul_tn: inner dims differ ({a.shape[0]} vs {b.shape[0]})")
    out = np.zeros((a.shape[1], b.shape[1]), dtype=np.float64)
    for k in range(a.shape[0]):
        out += a[k, :, None] * b[None, k, :]
    return out


def batch_outer(u, v):
    if u.shape[1] != v.shape[1]:
        raise ValueError(f"batch_outer: batch sizes differ ({u.shape[1]} vs {v.shape[1]})")
    out = np.zeros((u.shape[0], v.shape[0]), dtype=np.float64)
    for s in range(u.shape[1]):
        out += u[:, s, None] * v[None, :, s]
    return out
