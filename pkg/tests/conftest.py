"""Shared fixtures and independent reference implementations.

The ``oracle_*`` helpers recompute quantities from raw arrays with plain
numpy (BLAS products, explicit loops) and never call into the library.
"""

import numpy as np
import pytest

from predcode import network as nw
from predcode import numerics as nm
from predcode.engine import SerialEngine

ACT = {
    "tanh": (np.tanh, lambda x: 1.0 - np.tanh(x) ** 2),
    "identity": (lambda x: x, lambda x: np.ones_like(x)),
    "relu": (lambda x: np.maximum(x, 0.0), lambda x: (x > 0).astype(float)),
}


def oracle_energy(weights, values, activation="tanh"):
    f = ACT[activation][0]
    total = 0.0
    for l, w in enumerate(weights):
        e = values[l] - w @ f(values[l + 1])
        total += 0.5 * float(np.sum(e * e))
    return total


def oracle_forward(weights, x_top, activation="tanh"):
    f = ACT[activation][0]
    xs = [None] * (len(weights) + 1)
    xs[-1] = x_top
    for l in range(len(weights) - 1, -1, -1):
        xs[l] = weights[l] @ f(xs[l + 1])
    return xs


def fd_gradient(fun, arr, h=1e-5):
    """Central differences of scalar ``fun(arr)`` entry by entry."""
    grad = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        up = fun(arr)
        arr[idx] = old - h
        down = fun(arr)
        arr[idx] = old
        grad[idx] = (up - down) / (2 * h)
    return grad


def rel_err(a, b):
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / scale)


def random_problem(seed, L=None, max_width=8, batch=3, activation="tanh", mode="supervised"):
    """Random net plus a state with every layer free or clamped per ``mode``."""
    rng = np.random.default_rng(seed)
    if L is None:
        L = int(rng.integers(2, 6))
    dims = [int(d) for d in rng.integers(1, max_width + 1, size=L + 1)]
    net = nw.PCNetwork.init(dims, nm.make_rng(seed), activation)
    values = [rng.normal(0.0, 1.0, (d, batch)) for d in dims]
    pattern = nw.Mode(mode).clamp_pattern(L)
    state = nw.make_state(net, values, pattern, SerialEngine())
    return net, state, rng


@pytest.fixture
def engine():
    return SerialEngine()


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
