"""Phase executors and the matmul ledger.

A *phase* is a list of per-layer tasks that only read an immutable
snapshot; the executor runs them (serially or on a worker pool) and returns
their results in task order once all of them have finished. That join is the
barrier. A phase in which at least one matmul ran counts as one simultaneous
matrix multiplication (SMM); elementwise work is free.

Phases are tagged ``update`` (work that belongs to a weight update and is
audited against the closed-form counts), ``init`` (forward passes that build
a state) or ``eval`` (read-outs for logging; timed but not counted).
"""

from __future__ import annotations

import concurrent.futures as cf
import dataclasses
import enum
import time
from collections.abc import Callable, Sequence
from typing import Any

import numpy as np

from . import numerics
from .errors import DivergenceError, EngineError, PredcodeError

Task = tuple[int, Callable[[], Any]]


@dataclasses.dataclass
class StepLedger:
    mm_count: int = 0
    smm_count: int = 0
    outer_count: int = 0
    weight_updates: int = 0
    init_mm_count: int = 0
    init_smm_count: int = 0
    wall_ns: dict = dataclasses.field(default_factory=lambda: {"update": 0, "init": 0})

    def copy(self) -> "StepLedger":
        return dataclasses.replace(self, wall_ns=dict(self.wall_ns))

    def __sub__(self, other: "StepLedger") -> "StepLedger":
        return StepLedger(
            mm_count=self.mm_count - other.mm_count,
            smm_count=self.smm_count - other.smm_count,
            outer_count=self.outer_count - other.outer_count,
            weight_updates=self.weight_updates - other.weight_updates,
            init_mm_count=self.init_mm_count - other.init_mm_count,
            init_smm_count=self.init_smm_count - other.init_smm_count,
            wall_ns={k: self.wall_ns.get(k, 0) - other.wall_ns.get(k, 0) for k in self.wall_ns},
        )

    def counts(self) -> tuple[int, int, int, int, int, int]:
        """Everything except wall time, for equality checks across engines."""
        return (self.mm_count, self.smm_count, self.outer_count, self.weight_updates,
                self.init_mm_count, self.init_smm_count)


class EngineKind(str, enum.Enum):
    SERIAL = "serial"
    PARALLEL = "parallel"


def _run_counted(fn):
    mm0, outer0 = numerics.tally()
    result = fn()
    mm1, outer1 = numerics.tally()
    return result, mm1 - mm0, outer1 - outer0


def _with_layer(exc, layer):
    if exc.layer is not None:
        return exc
    new = DivergenceError(str(exc), layer)
    new.__cause__ = exc
    return new


def _fingerprint(arrays):
    return [(id(a), a.tobytes()) for a in arrays]


class SerialEngine:
    """Runs every task of a phase on the calling thread, in task order."""

    kind = EngineKind.SERIAL
    workers = 1

    def __init__(self, poison: bool = False):
        self.ledger = StepLedger()
        self.poison = poison

    def _execute(self, tasks: Sequence[Task]):
        out = []
        for layer, fn in tasks:
            try:
                out.append(_run_counted(fn))
            except DivergenceError as exc:
                raise _with_layer(exc, layer)
            except PredcodeError:
                raise
            except Exception as exc:
                raise EngineError(f"worker failed: {exc!r}", layer) from exc
        return out

    def phase(self, tasks: Sequence[Task], kind: str = "update",
              snapshot: Sequence[np.ndarray] = ()) -> list:
        """Run ``tasks`` against a shared snapshot and return their results in order.

        ``snapshot`` lists the arrays the tasks read; in poison mode they are
        fingerprinted before the phase and must come back untouched, and no
        result may alias them.
        """
        before = _fingerprint(snapshot) if self.poison else None
        t0 = time.perf_counter_ns()
        results = self._execute(tasks)
        elapsed = time.perf_counter_ns() - t0
        if self.poison:
            self._check_poison(tasks, snapshot, before, results)
        mm = sum(r[1] for r in results)
        outer = sum(r[2] for r in results)
        led = self.ledger
        if kind == "update":
            led.mm_count += mm
            led.outer_count += outer
            led.smm_count += 1 if mm else 0
        elif kind == "init":
            led.init_mm_count += mm
            led.init_smm_count += 1 if mm else 0
        led.wall_ns[kind] = led.wall_ns.get(kind, 0) + elapsed
        return [r[0] for r in results]

    def _check_poison(self, tasks, snapshot, before, results):
        if _fingerprint(snapshot) != before:
            raise EngineError("snapshot modified during phase", -1)
        for (layer, _), (res, _, _) in zip(tasks, results):
            outs = res if isinstance(res, tuple) else (res,)
            for arr in outs:
                if isinstance(arr, np.ndarray) and any(np.shares_memory(arr, s) for s in snapshot):
                    raise EngineError("task result aliases the pre-step snapshot", layer)

    def note_weight_update(self) -> None:
        self.ledger.weight_updates += 1

    def close(self) -> None:
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class LayerParallelEngine(SerialEngine):
    """Dispatches the tasks of a phase to a reusable thread pool.

    The compiled kernels release the GIL, so layers genuinely overlap on
    multi-core hosts. Results are collected in task order, which keeps
    trajectories bit-identical to :class:`SerialEngine`.
    """

    kind = EngineKind.PARALLEL

    def __init__(self, workers: int, poison: bool = False):
        if workers < 1:
            raise ValueError("workers must be >= 1")
        super().__init__(poison=poison)
        self.workers = workers
        self._pool = cf.ThreadPoolExecutor(max_workers=workers, thread_name_prefix="pc-layer")

    def _execute(self, tasks: Sequence[Task]):
        if len(tasks) <= 1 or self.workers == 1:
            return super()._execute(tasks)
        futures = [self._pool.submit(_run_counted, fn) for _, fn in tasks]
        cf.wait(futures)
        out = []
        for (layer, _), fut in zip(tasks, futures):
            exc = fut.exception()
            if exc is None:
                out.append(fut.result())
            elif isinstance(exc, DivergenceError):
                raise _with_layer(exc, layer)
            elif isinstance(exc, PredcodeError):
                raise exc
            else:
                raise EngineError(f"worker failed: {exc!r}", layer) from exc
        return out

    def close(self) -> None:
        self._pool.shutdown(wait=True)


def make_engine(kind: str | EngineKind = "serial", workers: int = 1, poison: bool = False):
    kind = EngineKind(kind)
    if kind is EngineKind.SERIAL:
        return SerialEngine(poison=poison)
    return LayerParallelEngine(workers, poison=poison)


def predicted_smm(algorithm: str, L: int, T: int = 1, mode: str = "supervised") -> tuple[int, int]:
    """Closed-form (matmuls, SMMs) per full weight update.

    Supervised values are the textbook table: one inference step costs
    ``2L-1`` matmuls in 2 SMMs; PC needs T steps, Z-IL ``L-1`` steps, iPC one,
    and BP runs its ``2L-1`` matmuls strictly in sequence. In generative mode
    the top layer is free, which adds one back-projection matmul per step.
    """
    if L < 1 or T < 1:
        raise ValueError("need L >= 1 and T >= 1")
    alg = str(getattr(algorithm, "value", algorithm)).lower()
    per_step = 2 * L - 1 if mode == "supervised" else 2 * L
    if alg == "ipc":
        return per_step, 2
    if alg == "pc":
        return per_step * T, 2 * T
    if alg == "zil":
        return per_step * (L - 1), 2 * (L - 1)
    if alg == "bp":
        return 2 * L - 1, 2 * L - 1
    raise ValueError(f"unknown algorithm {algorithm!r}")
