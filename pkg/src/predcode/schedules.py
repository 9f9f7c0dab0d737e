"""Training schedules: PC, Z-IL, incremental PC and backprop.

Every step function is pure (state in, state out) and expresses its work
as barrier-separated phases of per-layer tasks handed to an engine from
:mod:`predcode.engine`. Within a phase every task reads the same pre-step
snapshot (Jacobi semantics), which is what lets the serial and the
layer-parallel engines produce identical trajectories.

Update rules, for a free layer ``l > 0`` and any weight ``W[l]``::

    x[l] += gamma * (-e[l] + f'(x[l]) * (W[l-1]^T @ e[l-1]))
    W[l]  = W[l] * (1 - alpha * decay) + alpha/B * e[l] @ f(x[l+1])^T

The first is ``-gamma * dF/dx[l]``; the second is ``-alpha * dF/dW[l]``
averaged over the batch. (Note the ``f`` on the presynaptic side: it is
what makes the weight rule the true energy gradient.)
"""

from __future__ import annotations

import dataclasses
import enum
import math

import numpy as np

from . import numerics as nm
from .engine import SerialEngine, StepLedger
from .errors import ConfigError, DivergenceError, ShapeError, UsageError
from .network import (
    Mode,
    NetworkState,
    PCNetwork,
    clamp,
    compute_errors,
    energy,
    feedforward_init,
    latent_init,
    make_state,
    predict_layer,
)


class Algorithm(str, enum.Enum):
    PC = "pc"
    ZIL = "zil"
    IPC = "ipc"
    BP = "bp"


FULL_BATCH = "full"


@dataclasses.dataclass
class ScheduleConfig:
    """Hyper-parameters of one training run.

    ``T`` is the number of inference steps per weight update for PC and the
    number of iPC updates per mini-batch; Z-IL ignores it (it always runs
    ``L-1`` steps). ``total_steps`` caps the number of weight updates in the
    full-batch regime; ``epochs`` drives the mini-batch regime.
    """

    algorithm: Algorithm = Algorithm.IPC
    gamma: float = 0.5
    alpha: float = 1e-3
    T: int = 1
    batch_size: int | str = FULL_BATCH
    epochs: int = 1
    total_steps: int = 100
    weight_decay: float = 0.0
    seed: int = 0
    sequential: bool = False
    warm_start: bool = False
    patience: int | None = None
    plateau_tol: float = 1e-6
    plateau_window: int = 10
    latent_std: float = 0.1
    track_loss: bool = True

    def __post_init__(self):
        try:
            self.algorithm = Algorithm(self.algorithm)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.algorithm is Algorithm.ZIL and self.gamma != 1.0:
            raise ConfigError("Z-IL requires gamma = 1")
        if not 0.0 < self.gamma <= 1.0:
            raise ConfigError(f"gamma must lie in (0, 1], got {self.gamma}")
        # alpha = 0 is allowed: it turns every schedule into pure inference
        if not self.alpha >= 0.0:
            raise ConfigError(f"alpha must be >= 0, got {self.alpha}")
        if self.T < 1:
            raise ConfigError(f"T must be >= 1, got {self.T}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.batch_size != FULL_BATCH and (not isinstance(self.batch_size, int) or self.batch_size < 1):
            raise ConfigError(f"batch_size must be a positive integer or {FULL_BATCH!r}")
        if self.epochs < 0 or self.total_steps < 0:
            raise ConfigError("epochs and total_steps must be >= 0")

    @property
    def full_batch(self) -> bool:
        return self.batch_size == FULL_BATCH


def _engine(engine):
    return engine if engine is not None else SerialEngine()


# -- per-layer kernels -------------------------------------------------------

def _new_value(net: PCNetwork, st: NetworkState, l: int, gamma: float) -> np.ndarray:
    x = st.values[l]
    back = nm.matmul_tn(net.weights[l - 1], st.errors[l - 1])
    drive = net.activation.derivative(x) * back - st.errors[l]
    return nm.check_finite(x + gamma * drive, "values", layer=l)


def _new_weight(net: PCNetwork, err: np.ndarray, x_above: np.ndarray, l: int,
                alpha: float, decay: float) -> np.ndarray:
    grad = nm.batch_outer(err, net.activation.apply(x_above))
    w = net.weights[l] * (1.0 - alpha * decay) + (alpha / err.shape[1]) * grad
    return nm.check_finite(w, "weights", layer=l)


def _free_layers(st: NetworkState) -> list[int]:
    return [l for l in range(1, st.L + 1) if not st.clamped[l]]


def _joint_phase(net, st, engine, gamma, weight_layers, alpha=0.0, decay=0.0, values=True):
    """One snapshot phase: value updates on free layers plus selected weight updates."""
    free = set(_free_layers(st)) if values else set()
    weight_layers = set(weight_layers)
    tasks = []
    for l in range(net.L + 1):
        do_x, do_w = l in free, l in weight_layers
        if not (do_x or do_w):
            continue

        def task(l=l, do_x=do_x, do_w=do_w):
            x_new = _new_value(net, st, l, gamma) if do_x else None
            w_new = _new_weight(net, st.errors[l], st.values[l + 1], l, alpha, decay) if do_w else None
            return x_new, w_new

        tasks.append((l, task))
    results = engine.phase(tasks, kind="update", snapshot=st.snapshot() + list(net.weights))
    new_values = list(st.values)
    new_weights = list(net.weights)
    for (l, _), (x_new, w_new) in zip(tasks, results):
        if x_new is not None:
            new_values[l] = x_new
        if w_new is not None:
            new_weights[l] = w_new
    new_net = net.with_weights(new_weights) if weight_layers else net
    return new_net, new_values


def _refresh(net, st, new_values, engine) -> NetworkState:
    proto = st.replace(values=tuple(new_values))
    return compute_errors(net, proto, engine, kind="update")


# -- step functions ------------------------------------------------------------

def inference_step(net: PCNetwork, state: NetworkState, gamma: float, engine=None) -> NetworkState:
    """One synchronous value update of every free layer, then an error refresh."""
    if gamma == 0:
        return state
    eng = _engine(engine)
    _, new_values = _joint_phase(net, state, eng, gamma, ())
    return _refresh(net, state, new_values, eng)


def weight_step(net: PCNetwork, state: NetworkState, alpha: float, weight_decay: float = 0.0,
                engine=None) -> PCNetwork:
    """Update every weight matrix from the current errors. Needs no matmul."""
    eng = _engine(engine)
    new_net, _ = _joint_phase(net, state, eng, 0.0, range(net.L), alpha, weight_decay, values=False)
    return new_net


def ipc_update(net: PCNetwork, state: NetworkState, cfg: ScheduleConfig,
               engine=None) -> tuple[PCNetwork, NetworkState]:
    """Values and weights updated together from one snapshot, then errors refreshed.

    With ``cfg.sequential`` the value step runs first and the weights use the
    refreshed errors, which costs an extra SMM.
    """
    eng = _engine(engine)
    if cfg.sequential:
        state = inference_step(net, state, cfg.gamma, eng)
        net = weight_step(net, state, cfg.alpha, cfg.weight_decay, eng)
        state = compute_errors(net, state, eng, kind="update")
    else:
        net, new_values = _joint_phase(net, state, eng, cfg.gamma, range(net.L),
                                       cfg.alpha, cfg.weight_decay)
        state = _refresh(net, state, new_values, eng)
    eng.note_weight_update()
    return net, state


def pc_update(net: PCNetwork, state: NetworkState, cfg: ScheduleConfig, engine=None,
              on_step=None) -> tuple[PCNetwork, NetworkState]:
    """T inference iterations; the weights move once, in the last iteration.

    The weight update shares the last iteration's snapshot with that
    iteration's value update, so a single PC update costs exactly ``2T``
    SMMs and ``pc_update`` with ``T = 1`` is one iPC update. ``on_step`` is
    called with ``(net, state)`` after every iteration.
    """
    eng = _engine(engine)
    for _ in range(cfg.T - 1):
        state = inference_step(net, state, cfg.gamma, eng)
        if on_step is not None:
            on_step(net, state)
    if cfg.sequential:
        state = inference_step(net, state, cfg.gamma, eng)
        net = weight_step(net, state, cfg.alpha, cfg.weight_decay, eng)
        state = compute_errors(net, state, eng, kind="update")
    else:
        net, new_values = _joint_phase(net, state, eng, cfg.gamma, range(net.L),
                                       cfg.alpha, cfg.weight_decay)
        state = _refresh(net, state, new_values, eng)
    if on_step is not None:
        on_step(net, state)
    eng.note_weight_update()
    return net, state


def zil_update(net: PCNetwork, state: NetworkState, cfg: ScheduleConfig, engine=None) -> PCNetwork:
    """Z-IL: ``W[t]`` is updated exactly at inference step ``t`` (gamma = 1).

    Starting from a feed-forward state with clamped output, the output error
    reaches layer ``t`` after ``t`` steps, so the update of ``W[t]`` is the
    backprop update. The last weight update needs no further inference, so
    one call costs ``2(L-1)`` SMMs.
    """
    if cfg.gamma != 1.0:
        raise ConfigError("Z-IL requires gamma = 1")
    L = net.L
    if any(np.any(state.errors[l]) for l in range(1, L)):
        raise ConfigError("Z-IL needs a feed-forward initialised state (hidden errors must be zero)")
    eng = _engine(engine)
    for t in range(L - 1):
        net, new_values = _joint_phase(net, state, eng, 1.0, (t,), cfg.alpha, cfg.weight_decay)
        state = _refresh(net, state, new_values, eng)
    net, _ = _joint_phase(net, state, eng, 1.0, (L - 1,), cfg.alpha, cfg.weight_decay, values=False)
    eng.note_weight_update()
    return net


def bp_update(net: PCNetwork, inputs, targets, alpha: float, weight_decay: float = 0.0,
              engine=None) -> PCNetwork:
    """Backprop on ``1/2 ||target - mu[0]||^2`` with the same forward model.

    L forward phases and L-1 backward phases, each holding a single matmul.
    """
    eng = _engine(engine)
    inputs, targets = nm.as_matrix(inputs), nm.as_matrix(targets)
    if inputs.shape[0] != net.dims[-1] or targets.shape[0] != net.dims[0] \
            or inputs.shape[1] != targets.shape[1]:
        raise ShapeError(f"bp_update: inputs {inputs.shape}, targets {targets.shape}, dims {net.dims}")
    L = net.L
    xs: list = [None] * (L + 1)
    xs[L] = inputs
    for l in range(L - 1, -1, -1):
        (xs[l],) = eng.phase([(l, lambda l=l: predict_layer(net, xs[l + 1], l))],
                             kind="update", snapshot=[xs[l + 1], net.weights[l]])
    deltas: list = [None] * L
    deltas[0] = nm.check_finite(targets - xs[0], "output error", layer=0)
    new_weights = list(net.weights)
    for l in range(1, L):
        def back(l=l):
            return nm.check_finite(
                net.activation.derivative(xs[l]) * nm.matmul_tn(net.weights[l - 1], deltas[l - 1]),
                "deltas", layer=l)

        def grad(l=l):
            return _new_weight(net, deltas[l - 1], xs[l], l - 1, alpha, weight_decay)

        deltas[l], new_weights[l - 1] = eng.phase(
            [(l, back), (l - 1, grad)], kind="update",
            snapshot=[xs[l], xs[l - 1], deltas[l - 1], net.weights[l - 1]])
    (new_weights[L - 1],) = eng.phase(
        [(L - 1, lambda: _new_weight(net, deltas[L - 1], xs[L], L - 1, alpha, weight_decay))],
        kind="update", snapshot=[xs[L], deltas[L - 1]])
    eng.note_weight_update()
    return net.with_weights(new_weights)


# -- evaluation ----------------------------------------------------------------

def predict(net: PCNetwork, inputs, engine=None) -> np.ndarray:
    """Test-time read-out: ``mu[0]`` of a plain forward pass."""
    eng = _engine(engine)
    x = nm.as_matrix(inputs)
    for l in range(net.L - 1, -1, -1):
        (x,) = eng.phase([(l, lambda l=l, x=x: predict_layer(net, x, l))], kind="eval")
    return x


def mse_loss(outputs: np.ndarray, targets: np.ndarray) -> float:
    """``1/2 ||target - output||^2`` averaged over samples."""
    d = targets - outputs
    with np.errstate(over="ignore"):
        loss = 0.5 * float(np.sum(d * d)) / outputs.shape[1]
    if not math.isfinite(loss):
        raise DivergenceError("training loss overflowed")
    return loss


def _accuracy(outputs: np.ndarray, targets: np.ndarray) -> float:
    return float(np.mean(np.argmax(outputs, axis=0) == np.argmax(targets, axis=0)))


# -- drivers -------------------------------------------------------------------

@dataclasses.dataclass
class TrainReport:
    energy_trace: list = dataclasses.field(default_factory=list)
    iteration_smm: list = dataclasses.field(default_factory=list)
    loss_trace: list = dataclasses.field(default_factory=list)
    epoch_train_loss: list = dataclasses.field(default_factory=list)
    epoch_train_acc: list = dataclasses.field(default_factory=list)
    test_acc_trace: list = dataclasses.field(default_factory=list)
    ledger: StepLedger = dataclasses.field(default_factory=StepLedger)
    network: PCNetwork | None = None
    updates: int = 0
    best_epoch: int | None = None
    stopped_early: bool = False
    diverged: str | None = None


def _plateaued(trace, window, tol) -> bool:
    if tol <= 0 or len(trace) <= window:
        return False
    old, new = trace[-1 - window], trace[-1]
    return abs(old - new) <= tol * max(abs(old), np.finfo(float).tiny)


def _supervised_state(net, inputs, labels, eng):
    state = feedforward_init(net, inputs, eng)
    return clamp(net, state, Mode.SUPERVISED, inputs, labels, eng)


def train(net: PCNetwork, dataset, cfg: ScheduleConfig, mode: Mode | str = Mode.SUPERVISED,
          engine=None, eval_set=None) -> TrainReport:
    """Train ``net`` on ``dataset`` (anything with ``inputs``/``labels`` matrices).

    Full-batch regime: the whole dataset is clamped once and updates repeat
    until ``total_steps`` weight updates or an energy plateau. Mini-batch
    regime: per batch the state is rebuilt and T iPC updates (or one PC /
    Z-IL / BP update) are applied; with ``eval_set`` and ``patience`` the
    best network by held-out accuracy is kept.

    A :class:`DivergenceError` escapes with the partial report attached as
    ``err.report``.
    """
    mode = Mode(mode)
    eng = _engine(engine)
    inputs = nm.as_matrix(dataset.inputs)
    labels = None if dataset.labels is None else nm.as_matrix(dataset.labels)
    if mode is Mode.SUPERVISED and labels is None:
        raise UsageError("supervised training needs labels")
    if mode is Mode.GENERATIVE and cfg.algorithm in (Algorithm.ZIL, Algorithm.BP):
        raise ConfigError(f"{cfg.algorithm.value} is only defined for supervised training")
    report = TrainReport(network=net)
    rng = nm.make_rng(cfg.seed)
    try:
        if cfg.full_batch:
            _train_full(net, inputs, labels, cfg, mode, eng, rng, report)
        else:
            _train_minibatch(net, inputs, labels, cfg, mode, eng, rng, report, eval_set)
    except DivergenceError as err:
        report.diverged = str(err)
        report.ledger = eng.ledger.copy()
        err.report = report
        raise
    report.ledger = eng.ledger.copy()
    return report


def _record_loss(report, net, inputs, labels, eng):
    if labels is not None:
        out = predict(net, inputs, eng)
        report.loss_trace.append((eng.ledger.smm_count, mse_loss(out, labels)))


def _train_full(net, inputs, labels, cfg, mode, eng, rng, report):
    alg = cfg.algorithm
    sup = mode is Mode.SUPERVISED
    state = None
    if alg in (Algorithm.IPC, Algorithm.PC):
        if sup:
            state = _supervised_state(net, inputs, labels, eng)
        else:
            state = latent_init(net, inputs, rng, cfg.latent_std, eng)

    def log_iteration(n, s):
        report.energy_trace.append(energy(n, s))
        report.iteration_smm.append(eng.ledger.smm_count)

    if state is not None:
        log_iteration(net, state)
    if cfg.track_loss and sup:
        _record_loss(report, net, inputs, labels, eng)
    update_energy = []
    for _ in range(cfg.total_steps):
        if alg is Algorithm.IPC:
            net, state = ipc_update(net, state, cfg, eng)
            log_iteration(net, state)
        elif alg is Algorithm.PC:
            net, state = pc_update(net, state, cfg, eng, on_step=log_iteration)
        elif alg is Algorithm.ZIL:
            fresh = _supervised_state(net, inputs, labels, eng)
            net = zil_update(net, fresh, cfg, eng)
        else:
            net = bp_update(net, inputs, labels, cfg.alpha, cfg.weight_decay, eng)
        report.updates += 1
        report.network = net
        if cfg.track_loss and sup:
            _record_loss(report, net, inputs, labels, eng)
        if state is not None:
            update_energy.append(report.energy_trace[-1])
            if _plateaued(update_energy, cfg.plateau_window, cfg.plateau_tol):
                report.stopped_early = True
                break


def _train_minibatch(net, inputs, labels, cfg, mode, eng, rng, report, eval_set):
    alg = cfg.algorithm
    sup = mode is Mode.SUPERVISED
    n = inputs.shape[1]
    bs = min(cfg.batch_size, n)
    hidden_store = None
    if cfg.warm_start and alg in (Algorithm.IPC, Algorithm.PC):
        hidden_store = {}
    best_acc, best_net, since_best = -math.inf, net, 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            xb = np.ascontiguousarray(inputs[:, idx])
            yb = None if labels is None else np.ascontiguousarray(labels[:, idx])
            if alg is Algorithm.BP:
                net = bp_update(net, xb, yb, cfg.alpha, cfg.weight_decay, eng)
            elif alg is Algorithm.ZIL:
                net = zil_update(net, _supervised_state(net, xb, yb, eng), cfg, eng)
            else:
                state = _batch_state(net, xb, yb, idx, sup, cfg, eng, rng, hidden_store)
                if alg is Algorithm.IPC:
                    for _ in range(cfg.T):
                        net, state = ipc_update(net, state, cfg, eng)
                else:
                    net, state = pc_update(net, state, cfg, eng)
                report.energy_trace.append(energy(net, state))
                report.iteration_smm.append(eng.ledger.smm_count)
                if hidden_store is not None:
                    for l in range(1, net.L + (0 if sup else 1)):
                        hidden_store.setdefault(l, {}).update(zip(idx.tolist(), state.values[l].T))
            report.updates += 1
        report.network = net
        if sup:
            out = predict(net, inputs, eng)
            report.epoch_train_loss.append(mse_loss(out, labels))
            report.epoch_train_acc.append(_accuracy(out, labels))
        if eval_set is not None and eval_set.labels is not None:
            acc = _accuracy(predict(net, eval_set.inputs, eng), nm.as_matrix(eval_set.labels))
            report.test_acc_trace.append(acc)
            if acc > best_acc:
                best_acc, best_net, since_best = acc, net, 0
                report.best_epoch = epoch
            else:
                since_best += 1
            if cfg.patience is not None and since_best >= cfg.patience:
                report.stopped_early = True
                break
    if eval_set is not None and report.best_epoch is not None:
        report.network = best_net
    else:
        report.network = net


def _batch_state(net, xb, yb, idx, sup, cfg, eng, rng, hidden_store):
    if sup:
        state = _supervised_state(net, xb, yb, eng)
    else:
        state = latent_init(net, xb, rng, cfg.latent_std, eng)
    if hidden_store:
        values = list(state.values)
        for l, store in hidden_store.items():
            cols = [store.get(i) for i in idx.tolist()]
            values[l] = np.stack([c if c is not None else values[l][:, j]
                                  for j, c in enumerate(cols)], axis=1)
        state = make_state(net, values, state.clamped, eng)
    return state
