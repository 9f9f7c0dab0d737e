"""Layer-parallel steps, SMM audits and wall-clock ratio benchmarks."""

from __future__ import annotations

import dataclasses
import statistics
import time
import warnings

from . import numerics as nm
from .engine import LayerParallelEngine, SerialEngine, predicted_smm
from .errors import AuditError
from .network import Mode, PCNetwork, clamp, feedforward_init
from .schedules import Algorithm, ScheduleConfig, bp_update, ipc_update, pc_update, zil_update

BENCH_COLUMNS = ("algorithm", "L", "width", "workers", "median_ns_per_update",
                 "smm_per_update", "ratio_vs_bp")


def _kernel_fn(kernel):
    if callable(kernel) and not isinstance(kernel, (str, Algorithm)):
        return kernel
    cfg = kernel if isinstance(kernel, ScheduleConfig) else ScheduleConfig(algorithm=Algorithm(kernel))
    alg = cfg.algorithm
    if alg is Algorithm.IPC:
        return lambda net, st, eng: ipc_update(net, st, cfg, eng)
    if alg is Algorithm.PC:
        return lambda net, st, eng: pc_update(net, st, cfg, eng)
    if alg is Algorithm.ZIL:
        return lambda net, st, eng: (zil_update(net, st, cfg, eng), st)
    # BP reads input and target straight off the clamped state
    return lambda net, st, eng: (bp_update(net, st.values[net.L], st.values[0],
                                           cfg.alpha, cfg.weight_decay, eng), st)


def run_parallel_step(net: PCNetwork, state, schedule_kernel, workers: int, poison: bool = False):
    """One update on a layer-parallel engine; returns ``(successor, ledger_delta)``.

    ``schedule_kernel`` is an algorithm name, a :class:`ScheduleConfig`, or a
    callable ``(net, state, engine) -> successor``.
    """
    fn = _kernel_fn(schedule_kernel)
    with LayerParallelEngine(workers, poison=poison) as eng:
        before = eng.ledger.copy()
        successor = fn(net, state, eng)
        return successor, eng.ledger - before


@dataclasses.dataclass(frozen=True)
class AuditResult:
    passed: bool
    algorithm: str
    L: int
    T: int
    updates: int
    expected_mm: int
    observed_mm: int
    expected_smm: int
    observed_smm: int

    def describe(self) -> str:
        status = "ok" if self.passed else "MISMATCH"
        return (f"{status} {self.algorithm} L={self.L} T={self.T} updates={self.updates}: "
                f"mm {self.observed_mm}/{self.expected_mm}, smm {self.observed_smm}/{self.expected_smm}")


def count_audit(report, algorithm=None, L: int | None = None, T: int = 1,
                mode: str = "supervised", strict: bool = True) -> AuditResult:
    """Check a run's update-phase MM and SMM totals against the closed form.

    Accepts a :class:`TrainReport` or a bare ledger. Only ``update`` phases
    are audited; state construction and evaluation are booked separately.
    """
    ledger = getattr(report, "ledger", report)
    if L is None:
        L = report.network.L
    alg = Algorithm(getattr(algorithm, "value", algorithm))
    mm, smm = predicted_smm(alg, L, T, str(getattr(mode, "value", mode)))
    n = ledger.weight_updates
    res = AuditResult(
        passed=(ledger.mm_count == n * mm and ledger.smm_count == n * smm),
        algorithm=alg.value, L=L, T=T, updates=n,
        expected_mm=n * mm, observed_mm=ledger.mm_count,
        expected_smm=n * smm, observed_smm=ledger.smm_count,
    )
    if strict and not res.passed:
        raise AuditError(res.describe())
    return res


def _random_problem(L: int, width: int, batch: int, seed: int, activation="tanh"):
    rng = nm.make_rng(seed)
    net = PCNetwork.init([width] * (L + 1), rng, activation)
    x = rng.uniform(0.0, 1.0, (width, batch))
    y = rng.uniform(0.0, 1.0, (width, batch))
    return net, x, y


def time_updates(algorithm, L: int, width: int, workers: int = 1, repeats: int = 10,
                 batch: int = 1, seed: int = 0, T: int = 1) -> tuple[int, float]:
    """Median nanoseconds per weight update and SMMs per update.

    BP always runs on the serial engine; the others use a layer-parallel
    engine when ``workers > 1``. State construction is excluded from timing.
    """
    alg = Algorithm(getattr(algorithm, "value", algorithm))
    net, x, y = _random_problem(L, width, batch, seed)
    cfg = ScheduleConfig(algorithm=alg, gamma=1.0 if alg is Algorithm.ZIL else 0.1,
                         alpha=1e-3, T=T)
    fn = _kernel_fn(cfg)
    eng = SerialEngine() if alg is Algorithm.BP or workers == 1 else LayerParallelEngine(workers)
    times = []
    with eng:
        state = clamp(net, feedforward_init(net, x, eng), Mode.SUPERVISED, x, y, eng)
        fn(net, state, eng)  # warm-up
        smm0, upd0 = eng.ledger.smm_count, eng.ledger.weight_updates
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            fn(net, state, eng)
            times.append(time.perf_counter_ns() - t0)
        smm_per = (eng.ledger.smm_count - smm0) / max(1, eng.ledger.weight_updates - upd0)
    return int(statistics.median(times)), smm_per


def bench_update_ratio(depths, widths, workers: int = 1, repeats: int = 10, batch: int = 1,
                       seed: int = 0, algorithm="ipc") -> list[dict]:
    """Rows of the ms_algorithm / ms_BP grid, in (L, width) order."""
    if repeats < 10:
        warnings.warn(f"only {repeats} repeats: medians will be noisy", stacklevel=2)
    rows = []
    for L in depths:
        for width in widths:
            ns_bp, smm_bp = time_updates("bp", L, width, 1, repeats, batch, seed)
            ns_alg, smm_alg = time_updates(algorithm, L, width, workers, repeats, batch, seed)
            rows.append(dict(algorithm=Algorithm(algorithm).value, L=L, width=width, workers=workers,
                             median_ns_per_update=ns_alg, smm_per_update=smm_alg,
                             ratio_vs_bp=ns_alg / ns_bp))
            rows.append(dict(algorithm="bp", L=L, width=width, workers=1,
                             median_ns_per_update=ns_bp, smm_per_update=smm_bp, ratio_vs_bp=1.0))
    return rows


def audit_grid(depths, Ts=(1, 8, 12, 16), updates: int = 2, seed: int = 0,
               width: int = 4, batch: int = 2) -> list[AuditResult]:
    """Run every algorithm for a few updates at each depth and audit the ledger."""
    out = []
    for L in depths:
        net, x, y = _random_problem(L, width, batch, seed)
        runs = [(Algorithm.IPC, 1), (Algorithm.BP, 1), (Algorithm.ZIL, 1)]
        runs += [(Algorithm.PC, T) for T in Ts]
        for alg, T in runs:
            cfg = ScheduleConfig(algorithm=alg, gamma=1.0 if alg is Algorithm.ZIL else 0.1,
                                 alpha=1e-3, T=T)
            fn = _kernel_fn(cfg)
            eng = SerialEngine()
            n = net
            for _ in range(updates):
                st = clamp(n, feedforward_init(n, x, eng), Mode.SUPERVISED, x, y, eng)
                n, _ = fn(n, st, eng)
            out.append(count_audit(eng.ledger, alg, L, T, strict=False))
    return out
