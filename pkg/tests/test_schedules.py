import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import fd_gradient, oracle_energy, oracle_forward, random_problem, rel_err
from predcode import network as nw
from predcode import numerics as nm
from predcode import schedules as sch
from predcode.data import Dataset, synthetic_generative
from predcode.engine import SerialEngine
from predcode.errors import ConfigError, DivergenceError, ShapeError
from predcode.schedules import ScheduleConfig


def supervised_problem(seed, L=3, width=5, batch=4, act="tanh"):
    rng = np.random.default_rng(seed)
    dims = [int(d) for d in rng.integers(1, width + 1, size=L + 1)]
    net = nw.PCNetwork.init(dims, nm.make_rng(seed), act)
    x = rng.normal(size=(dims[-1], batch))
    y = rng.normal(size=(dims[0], batch))
    state = nw.clamp(net, nw.feedforward_init(net, x), "supervised", x, y)
    return net, state, x, y


# -- value and weight rules against finite differences -----------------------------

@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("act", ["tanh", "identity"])
@pytest.mark.parametrize("mode", ["generative", "supervised"])
def test_inference_step_is_negative_energy_gradient(seed, act, mode):
    net, state, _ = random_problem(seed, L=2 + seed % 4, activation=act, mode=mode)
    new = sch.inference_step(net, state, 1.0)
    weights = [np.asarray(w) for w in net.weights]
    for l in range(net.L + 1):
        if state.clamped[l]:
            assert np.array_equal(new.values[l], state.values[l])
            continue
        vals = [v.copy() for v in state.values]

        def energy_of(x, l=l):
            vs = list(vals)
            vs[l] = x
            return oracle_energy(weights, vs, act)

        grad = fd_gradient(energy_of, vals[l].copy())
        assert rel_err(new.values[l] - state.values[l], -grad) <= 1e-6


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("act", ["tanh", "identity"])
def test_weight_step_is_negative_batch_mean_gradient(seed, act):
    net, state, _ = random_problem(seed, L=2 + seed % 4, activation=act, batch=3)
    new = sch.weight_step(net, state, alpha=1.0)
    B = state.batch_size
    for l in range(net.L):
        ws = [np.array(w) for w in net.weights]

        def energy_of(w, l=l):
            cur = list(ws)
            cur[l] = w
            return oracle_energy(cur, state.values, act)

        grad = fd_gradient(energy_of, ws[l].copy())
        delta = np.asarray(new.weights[l]) - np.asarray(net.weights[l])
        assert rel_err(delta, -grad / B) <= 1e-6


def test_weight_step_hand_outer_product():
    w = np.zeros((1, 2))
    net = nw.PCNetwork((1, 2), (w,), "identity")
    state = nw.make_state(net, [np.array([[1.0]]), np.array([[2.0], [3.0]])], (True, True))
    new = sch.weight_step(net, state, alpha=0.1)
    assert np.allclose(new.weights[0], [[0.2, 0.3]], rtol=0, atol=1e-16)


def test_weight_step_decay():
    net, state, _, _ = supervised_problem(1)
    zero = state.replace(errors=tuple(np.zeros_like(e) for e in state.errors))
    new = sch.weight_step(net, zero, alpha=0.1, weight_decay=0.5)
    for a, b in zip(new.weights, net.weights):
        assert np.array_equal(a, b * (1 - 0.05))


def test_zero_errors_fixed_points():
    net = nw.PCNetwork.init([3, 4, 2], nm.make_rng(0))
    state = nw.feedforward_init(net, np.ones((2, 3)))
    assert all(np.array_equal(a, b) for a, b in zip(sch.inference_step(net, state, 0.5).values, state.values))
    assert all(np.array_equal(a, b) for a, b in zip(sch.weight_step(net, state, 0.1).weights, net.weights))
    cfg = ScheduleConfig(gamma=0.5, alpha=0.1)
    n2, s2 = sch.ipc_update(net, state, cfg)
    assert all(np.array_equal(a, b) for a, b in zip(n2.weights, net.weights))
    assert all(np.array_equal(a, b) for a, b in zip(s2.values, state.values))


def test_gamma_zero_is_identity():
    net, state, _ = random_problem(3)
    assert sch.inference_step(net, state, 0.0) is state


def test_divergence_carries_layer():
    net = nw.PCNetwork((1, 1), (np.array([[1e300]]),), "tanh")
    state = nw.make_state(net, [np.array([[-1e300]]), np.array([[1.0]])], (True, False))
    with pytest.raises(DivergenceError) as info:
        sch.inference_step(net, state, 1.0)
    assert info.value.layer == 1


# -- schedule relationships -------------------------------------------------------

def test_ipc_equals_pc_with_T1():
    net, state, _, _ = supervised_problem(4)
    a_net, a_st = sch.ipc_update(net, state, ScheduleConfig(algorithm="ipc", gamma=0.3, alpha=0.05))
    b_net, b_st = sch.pc_update(net, state, ScheduleConfig(algorithm="pc", gamma=0.3, alpha=0.05, T=1))
    assert all(np.array_equal(a, b) for a, b in zip(a_net.weights, b_net.weights))
    assert all(np.array_equal(a, b) for a, b in zip(a_st.values, b_st.values))


def test_pc_with_zero_alpha_is_pure_inference():
    net, state, _, _ = supervised_problem(5)
    cfg = ScheduleConfig(algorithm="pc", gamma=0.2, alpha=0.0, T=6)
    n2, s2 = sch.pc_update(net, state, cfg)
    ref = state
    for _ in range(6):
        ref = sch.inference_step(net, ref, 0.2)
    assert all(np.array_equal(a, b) for a, b in zip(n2.weights, net.weights))
    assert all(np.array_equal(a, b) for a, b in zip(s2.values, ref.values))


def test_pc_T1_changes_weights_iff_errors():
    net, state, _, _ = supervised_problem(6)
    n2, _ = sch.pc_update(net, state, ScheduleConfig(algorithm="pc", gamma=0.2, alpha=0.1, T=1))
    assert any(not np.array_equal(a, b) for a, b in zip(n2.weights, net.weights))


@pytest.mark.parametrize("seed", range(10))
def test_pc_inference_lowers_energy_on_toy_suite(seed):
    net, state, _, _ = supervised_problem(seed, L=3, width=6)
    cfg = ScheduleConfig(algorithm="pc", gamma=0.5, alpha=0.0, T=8)
    before = nw.energy(net, state)
    net2, after = sch.pc_update(net, state, cfg)
    assert nw.energy(net2, after) <= before


def test_ipc_energy_strictly_decreases_full_batch():
    net, state, _, _ = supervised_problem(7, L=3, width=6, batch=8)
    cfg = ScheduleConfig(gamma=0.05, alpha=0.01)
    e = [nw.energy(net, state)]
    for _ in range(100):
        net, state = sch.ipc_update(net, state, cfg)
        e.append(nw.energy(net, state))
    assert all(b < a for a, b in zip(e, e[1:]))


def test_ipc_L1_is_delta_rule():
    rng = np.random.default_rng(0)
    w = rng.normal(size=(2, 3))
    net = nw.PCNetwork((2, 3), (w,), "identity")
    x, y = rng.normal(size=(3, 4)), rng.normal(size=(2, 4))
    state = nw.clamp(net, nw.feedforward_init(net, x), "supervised", x, y)
    n2, s2 = sch.ipc_update(net, state, ScheduleConfig(gamma=0.5, alpha=0.1))
    ref = w + 0.1 / 4 * (y - w @ x) @ x.T
    assert np.allclose(n2.weights[0], ref, rtol=0, atol=1e-14)
    assert np.array_equal(s2.values[0], y) and np.array_equal(s2.values[1], x)


def test_sequential_variant_uses_fresh_errors():
    net, state, _, _ = supervised_problem(8)
    cfg = ScheduleConfig(gamma=0.5, alpha=0.1, sequential=True)
    n_seq, _ = sch.ipc_update(net, state, cfg)
    mid = sch.inference_step(net, state, 0.5)
    ref = sch.weight_step(net, mid, 0.1)
    assert all(np.array_equal(a, b) for a, b in zip(n_seq.weights, ref.weights))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["ipc", "pc"]), st.sampled_from(["supervised", "generative"]))
def test_clamped_layers_never_change(seed, alg, mode):
    net, state, _ = random_problem(seed, mode=mode)
    cfg = ScheduleConfig(algorithm=alg, gamma=0.3, alpha=0.05, T=3)
    fn = sch.ipc_update if alg == "ipc" else sch.pc_update
    _, new = fn(net, state, cfg)
    for l, c in enumerate(state.clamped):
        if c:
            assert np.array_equal(new.values[l], state.values[l])
    assert not np.any(new.errors[-1])


# -- Z-IL and backprop --------------------------------------------------------------

@pytest.mark.parametrize("seed", range(20))
def test_zil_equals_bp(seed):
    L = 1 + seed % 5
    net, state, x, y = supervised_problem(seed, L=L, width=7)
    cfg = ScheduleConfig(algorithm="zil", gamma=1.0, alpha=0.1)
    zil = sch.zil_update(net, state, cfg)
    bp = sch.bp_update(net, x, y, 0.1)
    for a, b in zip(zil.weights, bp.weights):
        assert np.max(np.abs(a - b)) <= 1e-10


def test_zil_L2_manual_unroll():
    rng = np.random.default_rng(3)
    w0, w1 = rng.normal(size=(2, 3)), rng.normal(size=(3, 2))
    net = nw.PCNetwork((2, 3, 2), (w0, w1), "tanh")
    x, y = rng.normal(size=(2, 1)), rng.normal(size=(2, 1))
    state = nw.clamp(net, nw.feedforward_init(net, x), "supervised", x, y)
    alpha = 0.2
    out = sch.zil_update(net, state, ScheduleConfig(algorithm="zil", gamma=1.0, alpha=alpha))
    h = w1 @ np.tanh(x)
    e0 = y - w0 @ np.tanh(h)
    # one inference step moves the hidden layer by the back-projected output error
    e1 = (1 - np.tanh(h) ** 2) * (w0.T @ e0)
    assert np.allclose(out.weights[0], w0 + alpha * e0 @ np.tanh(h).T, rtol=0, atol=1e-14)
    assert np.allclose(out.weights[1], w1 + alpha * e1 @ np.tanh(x).T, rtol=0, atol=1e-14)


def test_zil_zero_output_error_no_change():
    net = nw.PCNetwork.init([2, 3, 2], nm.make_rng(0))
    x = np.ones((2, 1))
    st_ = nw.feedforward_init(net, x)
    state = nw.clamp(net, st_, "supervised", x, st_.values[0])
    out = sch.zil_update(net, state, ScheduleConfig(algorithm="zil", gamma=1.0, alpha=0.3))
    assert all(np.array_equal(a, b) for a, b in zip(out.weights, net.weights))


def test_zil_rejects_bad_setup():
    with pytest.raises(ConfigError):
        ScheduleConfig(algorithm="zil", gamma=0.5)
    net, state, _ = random_problem(2, mode="supervised")
    with pytest.raises(ConfigError):
        sch.zil_update(net, state, ScheduleConfig(algorithm="zil", gamma=1.0))


def test_bp_zero_loss_no_update():
    net = nw.PCNetwork.init([2, 3, 4], nm.make_rng(0))
    x = np.ones((4, 2))
    y = oracle_forward([np.asarray(w) for w in net.weights], x)[0]
    out = sch.bp_update(net, x, nw.forward(net, x), 0.5)
    assert all(np.array_equal(a, b) for a, b in zip(out.weights, net.weights))
    assert np.allclose(y, nw.forward(net, x), atol=1e-13)


def test_bp_linear_lms():
    rng = np.random.default_rng(1)
    w = rng.normal(size=(3, 2))
    net = nw.PCNetwork((3, 2), (w,), "identity")
    x, y = rng.normal(size=(2, 5)), rng.normal(size=(3, 5))
    out = sch.bp_update(net, x, y, 0.1)
    assert np.allclose(out.weights[0], w + 0.1 / 5 * (y - w @ x) @ x.T, rtol=0, atol=1e-14)


@pytest.mark.parametrize("seed", range(4))
def test_bp_matches_fd_of_mse(seed):
    net, _, x, y = supervised_problem(seed, L=4, width=5, batch=3)
    new = sch.bp_update(net, x, y, alpha=1.0)
    for l in range(net.L):
        ws = [np.array(w) for w in net.weights]

        def loss(w, l=l):
            cur = list(ws)
            cur[l] = w
            out = oracle_forward(cur, x)[0]
            return 0.5 * np.sum((y - out) ** 2) / x.shape[1]

        grad = fd_gradient(loss, ws[l].copy(), h=1e-4)
        assert rel_err(np.asarray(new.weights[l]) - ws[l], -grad) <= 1e-8


def test_bp_shape_error():
    net = nw.PCNetwork.init([2, 3], nm.make_rng(0))
    with pytest.raises(ShapeError):
        sch.bp_update(net, np.ones((3, 2)), np.ones((2, 3)), 0.1)


# -- config and driver ----------------------------------------------------------------

@pytest.mark.parametrize("kwargs", [dict(gamma=0.0), dict(gamma=1.5), dict(alpha=-1.0), dict(T=0),
                                    dict(batch_size=0), dict(algorithm="sgd"), dict(weight_decay=-1)])
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ScheduleConfig(**kwargs)


def labelled_toy(n=40, seed=0):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(6, n))
    proj = np.array([[1.0, -1.0, 0, 0, 0, 0], [0, 1.0, -1.0, 0, 0, 0], [-1.0, 0, 1.0, 0, 0, 0]])
    cls = np.argmax(proj @ x, axis=0)
    y = np.zeros((3, n))
    y[cls, np.arange(n)] = 1.0
    return Dataset(x, y, "toy")


def test_train_zero_epochs_returns_initial_network():
    net = nw.PCNetwork.init([3, 5, 6], nm.make_rng(0))
    rep = sch.train(net, labelled_toy(), ScheduleConfig(batch_size=8, epochs=0))
    assert rep.network is net and rep.updates == 0


@pytest.mark.parametrize("alg", ["ipc", "pc", "zil", "bp"])
@pytest.mark.parametrize("batch", ["full", 8])
def test_train_is_deterministic(alg, batch):
    cfg = ScheduleConfig(algorithm=alg, gamma=1.0 if alg == "zil" else 0.3, alpha=0.05, T=3,
                         batch_size=batch, epochs=2, total_steps=5, seed=3)
    net = nw.PCNetwork.init([3, 5, 6], nm.make_rng(0))
    data = labelled_toy()
    a = sch.train(net, data, cfg, eval_set=data)
    b = sch.train(net, data, cfg, eval_set=data)
    assert a.energy_trace == b.energy_trace and a.loss_trace == b.loss_trace
    assert a.test_acc_trace == b.test_acc_trace
    assert all(np.array_equal(x, y) for x, y in zip(a.network.weights, b.network.weights))
    assert a.ledger.counts() == b.ledger.counts()


def test_train_full_batch_trace_lengths():
    net = nw.PCNetwork.init([3, 5, 6], nm.make_rng(0))
    cfg = ScheduleConfig(algorithm="pc", T=4, total_steps=6, plateau_tol=0.0)
    rep = sch.train(net, labelled_toy(), cfg)
    assert rep.updates == 6
    assert len(rep.energy_trace) == 1 + 6 * 4 == len(rep.iteration_smm)
    assert len(rep.loss_trace) == 7


def test_train_stops_on_plateau():
    ds, teacher, _ = synthetic_generative(20, [6, 3], 0, return_teacher=True)
    cfg = ScheduleConfig(gamma=0.2, alpha=0.05, total_steps=5000, plateau_tol=1e-6)
    rep = sch.train(teacher, ds, cfg, mode="generative")
    assert rep.stopped_early and rep.updates < 5000


def test_train_learns_toy_problem():
    net = nw.PCNetwork.init([3, 8, 6], nm.make_rng(1))
    data = labelled_toy(200)
    cfg = ScheduleConfig(algorithm="ipc", gamma=0.5, alpha=0.2, T=4, batch_size=10, epochs=30)
    rep = sch.train(net, data, cfg)
    assert rep.epoch_train_acc[-1] > 0.85
    assert rep.epoch_train_loss[-1] < rep.epoch_train_loss[0]


def test_train_early_stopping_keeps_best():
    net = nw.PCNetwork.init([3, 8, 6], nm.make_rng(1))
    data = labelled_toy(100)
    cfg = ScheduleConfig(algorithm="bp", alpha=0.5, batch_size=10, epochs=40, patience=2)
    rep = sch.train(net, data, cfg, eval_set=labelled_toy(100, seed=1))
    best = max(rep.test_acc_trace)
    assert rep.test_acc_trace[rep.best_epoch] == best
    out = sch.predict(rep.network, labelled_toy(100, seed=1).inputs)
    assert sch._accuracy(out, labelled_toy(100, seed=1).labels) == best


def test_train_warm_start_differs_from_cold():
    net = nw.PCNetwork.init([3, 5, 6], nm.make_rng(0))
    data = labelled_toy()
    cold = sch.train(net, data, ScheduleConfig(batch_size=8, epochs=3, T=2))
    warm = sch.train(net, data, ScheduleConfig(batch_size=8, epochs=3, T=2, warm_start=True))
    assert cold.energy_trace[:5] == warm.energy_trace[:5]
    assert cold.energy_trace != warm.energy_trace


def test_train_divergence_attaches_report():
    net = nw.PCNetwork.init([3, 5, 6], nm.make_rng(0), "identity")
    data = labelled_toy()
    cfg = ScheduleConfig(algorithm="bp", alpha=1e150, total_steps=50)
    with pytest.raises(DivergenceError) as info:
        sch.train(net, data, cfg)
    assert info.value.report.diverged


def test_generative_rejects_supervised_only_algorithms():
    net = nw.PCNetwork.init([6, 3], nm.make_rng(0))
    with pytest.raises(ConfigError):
        sch.train(net, synthetic_generative(5, [6, 3], 0), ScheduleConfig(algorithm="bp"), mode="generative")


def test_alpha_zero_generative_energy_flattens():
    ds = synthetic_generative(30, [8, 4, 3], 0)
    net = nw.PCNetwork.init([8, 4, 3], nm.make_rng(2), "identity")
    cfg = ScheduleConfig(gamma=0.5, alpha=0.0, total_steps=2000, plateau_tol=0.0)
    rep = sch.train(net, ds, cfg, mode="generative")
    tail = rep.energy_trace[-50:]
    assert max(tail) - min(tail) <= 1e-9 * max(tail)
    assert all(np.array_equal(a, b) for a, b in zip(rep.network.weights, net.weights))


def test_engine_ledger_per_update(engine):
    net, state, _, _ = supervised_problem(1, L=4)
    sch.ipc_update(net, state, ScheduleConfig(), engine)
    assert engine.ledger.smm_count == 2 and engine.ledger.weight_updates == 1
    assert isinstance(engine, SerialEngine)
