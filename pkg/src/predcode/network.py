"""The hierarchical Gaussian generative model.

Layer 0 is the generated (output) end and layer L the top. Layer ``l < L``
is predicted from the layer above as ``mu[l] = W[l] @ f(x[l+1])``; the top
layer has no prior, so ``mu[L] = x[L]`` and its error is identically zero.
Batches are stored one sample per column.

The energy carries a factor 1/2,

    F = 1/2 * sum_l ||x[l] - mu[l]||^2   (summed over the batch),

so that the value and weight updates in :mod:`predcode.schedules` are
exactly ``-gamma * dF/dx`` and ``-alpha/B * dF/dW``.
"""

from __future__ import annotations

import dataclasses
import enum
import struct
from pathlib import Path

import numpy as np

from . import numerics as nm
from .engine import SerialEngine
from .errors import ParseError, ShapeError, UsageError
from .numerics import Activation


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclasses.dataclass(frozen=True)
class PCNetwork:
    dims: tuple[int, ...]
    weights: tuple[np.ndarray, ...]
    activation: Activation = Activation.TANH

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) < 2 or min(dims) < 1:
            raise ShapeError(f"need at least two positive layer widths, got {dims}")
        weights = []
        for w in self.weights:
            a = nm.as_matrix(w)
            weights.append(_frozen(a.copy() if a.flags.writeable else a))
        weights = tuple(weights)
        if len(weights) != len(dims) - 1:
            raise ShapeError(f"{len(dims)} layers need {len(dims) - 1} weight matrices, got {len(weights)}")
        for l, w in enumerate(weights):
            if w.shape != (dims[l], dims[l + 1]):
                raise ShapeError(f"weights[{l}] has shape {w.shape}, expected {(dims[l], dims[l + 1])}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "activation", Activation(self.activation))

    @property
    def L(self) -> int:
        return len(self.dims) - 1

    @classmethod
    def init(cls, dims, rng, activation="tanh", scheme="uniform_fan_in") -> "PCNetwork":
        weights = [nm.init_weights(dims[l], dims[l + 1], rng, scheme) for l in range(len(dims) - 1)]
        return cls(tuple(dims), tuple(weights), Activation(activation))

    def with_weights(self, weights) -> "PCNetwork":
        return PCNetwork(self.dims, tuple(weights), self.activation)


class Mode(str, enum.Enum):
    GENERATIVE = "generative"
    SUPERVISED = "supervised"

    def clamp_pattern(self, L: int) -> tuple[bool, ...]:
        if self is Mode.GENERATIVE:
            return (True,) + (False,) * L
        return (True,) + (False,) * (L - 1) + (True,)


@dataclasses.dataclass(frozen=True)
class NetworkState:
    """Value nodes, their current predictions and prediction errors.

    ``errors[l] == values[l] - predictions[l]`` is kept current by every
    function that returns a state. Arrays are read-only.
    """

    values: tuple[np.ndarray, ...]
    predictions: tuple[np.ndarray, ...]
    errors: tuple[np.ndarray, ...]
    clamped: tuple[bool, ...]

    def __post_init__(self):
        for group in (self.values, self.predictions, self.errors):
            for a in group:
                _frozen(a)
        batch = {a.shape[1] for a in self.values}
        if len(batch) != 1:
            raise ShapeError(f"layers disagree on batch size: {sorted(batch)}")
        if not (len(self.values) == len(self.predictions) == len(self.errors) == len(self.clamped)):
            raise ShapeError("values/predictions/errors/clamped lengths differ")

    @property
    def batch_size(self) -> int:
        return self.values[0].shape[1]

    @property
    def L(self) -> int:
        return len(self.values) - 1

    def replace(self, **changes) -> "NetworkState":
        return dataclasses.replace(self, **changes)

    def snapshot(self) -> list[np.ndarray]:
        return [*self.values, *self.predictions, *self.errors]


def _default_engine(engine):
    return engine if engine is not None else SerialEngine()


def predict_layer(net: PCNetwork, x_above: np.ndarray, l: int) -> np.ndarray:
    return nm.matmul(net.weights[l], net.activation.apply(x_above))


def _check_shapes(net: PCNetwork, values) -> None:
    if len(values) != net.L + 1:
        raise ShapeError(f"state has {len(values)} layers, network has {net.L + 1}")
    for l, x in enumerate(values):
        if x.ndim != 2 or x.shape[0] != net.dims[l]:
            raise ShapeError(f"layer {l} has shape {x.shape}, expected ({net.dims[l]}, B)")


def predictions(net: PCNetwork, state: NetworkState, engine=None, kind: str = "init") -> list[np.ndarray]:
    """Recompute every ``mu[l]``; the L products are independent of each other."""
    _check_shapes(net, state.values)
    eng = _default_engine(engine)
    vals = state.values
    tasks = [(l, (lambda l=l: predict_layer(net, vals[l + 1], l))) for l in range(net.L)]
    mus = eng.phase(tasks, kind=kind, snapshot=list(vals) + list(net.weights))
    return mus + [vals[-1]]


def _errors_from(values, mus) -> list[np.ndarray]:
    errs = [nm.check_finite(values[l] - mus[l], "errors", layer=l) for l in range(len(values) - 1)]
    errs.append(np.zeros_like(values[-1]))
    return errs


def compute_errors(net: PCNetwork, state: NetworkState, engine=None, kind: str = "init") -> NetworkState:
    mus = predictions(net, state, engine, kind)
    return state.replace(predictions=tuple(mus), errors=tuple(_errors_from(state.values, mus)))


def energy(net: PCNetwork, state: NetworkState) -> float:
    """``1/2 * sum of squared errors`` over layers and batch, from the stored errors."""
    return 0.5 * float(sum(np.sum(e * e) for e in state.errors))


def make_state(net: PCNetwork, values, clamped=None, engine=None) -> NetworkState:
    """Build a consistent state from raw layer values."""
    values = [nm.as_matrix(v).copy() for v in values]
    _check_shapes(net, values)
    clamped = tuple(clamped) if clamped is not None else (False,) * (net.L + 1)
    proto = NetworkState(tuple(values), tuple(values), tuple(values), clamped)
    return compute_errors(net, proto, engine)


def feedforward_init(net: PCNetwork, input_batch, engine=None) -> NetworkState:
    """Top-down sweep ``x[l] = mu[l]`` from the input at layer L.

    Every error is exactly zero. The sweep is inherently sequential (L
    phases of one matmul each) and is booked as initialisation work.
    """
    x_top = nm.as_matrix(input_batch)
    if x_top.shape[0] != net.dims[-1]:
        raise ShapeError(f"input width {x_top.shape[0]} != top layer width {net.dims[-1]}")
    eng = _default_engine(engine)
    values: list = [None] * (net.L + 1)
    values[net.L] = x_top.copy()
    for l in range(net.L - 1, -1, -1):
        (mu,) = eng.phase([(l, lambda l=l: predict_layer(net, values[l + 1], l))],
                          kind="init", snapshot=[values[l + 1], net.weights[l]])
        values[l] = mu
    mus = [v for v in values[:-1]] + [values[-1]]
    errs = [np.zeros_like(v) for v in values]
    return NetworkState(tuple(values), tuple(mus), tuple(errs), (False,) * (net.L + 1))


def latent_init(net: PCNetwork, data, rng: np.random.Generator, std: float = 0.1,
                engine=None) -> NetworkState:
    """Generative starting point: small Gaussian latents above the data layer."""
    data = nm.as_matrix(data)
    batch = data.shape[1]
    values = [data.copy()] + [std * rng.standard_normal((n, batch)) for n in net.dims[1:]]
    return make_state(net, values, Mode.GENERATIVE.clamp_pattern(net.L), engine)


def clamp(net: PCNetwork, state: NetworkState, mode: Mode | str, data, labels=None,
          engine=None) -> NetworkState:
    """Fix the data-bearing layers for ``mode`` and refresh the affected errors.

    Generative: layer 0 holds ``data``. Supervised: layer 0 holds ``labels``
    and layer L holds ``data``.
    """
    mode = Mode(mode)
    L = net.L
    values = list(state.values)
    if mode is Mode.SUPERVISED:
        if labels is None:
            raise UsageError("supervised clamping needs labels")
        top = nm.as_matrix(data)
        bottom = nm.as_matrix(labels)
        if top.shape != values[L].shape:
            raise ShapeError(f"input shape {top.shape} != {values[L].shape}")
    else:
        bottom = nm.as_matrix(data)
        top = None
    if bottom.shape != values[0].shape:
        raise ShapeError(f"layer-0 data shape {bottom.shape} != {values[0].shape}")

    mus = list(state.predictions)
    values[0] = bottom.copy()
    if top is not None and not np.array_equal(top, values[L]):
        values[L] = top.copy()
        eng = _default_engine(engine)
        (mus[L - 1],) = eng.phase([(L - 1, lambda: predict_layer(net, values[L], L - 1))],
                                  kind="init", snapshot=[values[L], net.weights[L - 1]])
        mus[L] = values[L]
    errs = list(state.errors)
    errs[0] = nm.check_finite(values[0] - mus[0], "errors", layer=0)
    if L - 1 > 0:
        errs[L - 1] = nm.check_finite(values[L - 1] - mus[L - 1], "errors", layer=L - 1)
    return NetworkState(tuple(values), tuple(mus), tuple(errs), mode.clamp_pattern(L))


def forward(net: PCNetwork, inputs, engine=None) -> np.ndarray:
    """Output-layer prediction ``mu[0]`` of a plain top-down pass."""
    return feedforward_init(net, inputs, engine).values[0]


# -- checkpoint format -------------------------------------------------------
#
#   offset  size        field
#   0       4           magic b"PCNW"
#   4       4           format version (uint32, currently 1)
#   8       4           activation code (uint32: 0 tanh, 1 relu, 2 identity)
#   12      4           L (uint32)
#   16      4*(L+1)     layer widths dims[0..L] (uint32)
#   ...     8*sum(...)  weights[0..L-1], each row-major float64
#
# All integers and floats little-endian.

MAGIC = b"PCNW"
FORMAT_VERSION = 1
_ACT_CODES = {Activation.TANH: 0, Activation.RELU: 1, Activation.IDENTITY: 2}


def to_bytes(net: PCNetwork) -> bytes:
    header = MAGIC + struct.pack("<III", FORMAT_VERSION, _ACT_CODES[net.activation], net.L)
    header += struct.pack(f"<{net.L + 1}I", *net.dims)
    return header + b"".join(w.astype("<f8").tobytes(order="C") for w in net.weights)


def from_bytes(buf: bytes) -> PCNetwork:
    if len(buf) < 16:
        raise ParseError("checkpoint header truncated", len(buf))
    if buf[:4] != MAGIC:
        raise ParseError(f"bad magic {buf[:4]!r}", 0)
    version, act_code, L = struct.unpack_from("<III", buf, 4)
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    codes = {v: k for k, v in _ACT_CODES.items()}
    if act_code not in codes:
        raise ParseError(f"unknown activation code {act_code}", 8)
    off = 16
    if len(buf) < off + 4 * (L + 1):
        raise ParseError("dims truncated", len(buf))
    dims = struct.unpack_from(f"<{L + 1}I", buf, off)
    off += 4 * (L + 1)
    weights = []
    for l in range(L):
        n = dims[l] * dims[l + 1]
        if len(buf) < off + 8 * n:
            raise ParseError(f"weights[{l}] truncated", len(buf))
        w = np.frombuffer(buf, dtype="<f8", count=n, offset=off).astype(np.float64)
        weights.append(w.reshape(dims[l], dims[l + 1]))
        off += 8 * n
    if off != len(buf):
        raise ParseError("trailing bytes after weights", off)
    return PCNetwork(dims, tuple(weights), codes[act_code])


def save(net: PCNetwork, path) -> None:
    Path(path).write_bytes(to_bytes(net))


def load(path) -> PCNetwork:
    return from_bytes(Path(path).read_bytes())
