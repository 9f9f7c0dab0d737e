import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from predcode import numerics as nm
from predcode.errors import DivergenceError, ShapeError


def finite_matrix(rows, cols):
    return arrays(np.float64, (rows, cols), elements=st.floats(-1e3, 1e3, allow_nan=False))


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3) - 4.0
    assert np.array_equal(nm.matmul(np.eye(3), a), a)


def test_matmul_hand_case():
    assert np.array_equal(nm.matmul([[1, 2], [3, 4]], [[0], [1]]), [[2.0], [4.0]])


def test_matmul_scalar():
    assert nm.matmul([[2.0]], [[3.0]]).tolist() == [[6.0]]


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        nm.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_brute_force_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 4))
    ref = np.zeros((5, 4))
    for i in range(5):
        for j in range(4):
            s = 0.0
            for k in range(7):
                s = s + a[i, k] * b[k, j]
            ref[i, j] = s
    # ascending-k accumulation: identical to the scalar loop bit for bit
    assert np.array_equal(nm.matmul(a, b), ref)


def test_matmul_tn_matches_explicit_transpose():
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(6, 4)), rng.normal(size=(6, 3))
    assert np.array_equal(nm.matmul_tn(a, b), nm.matmul(nm.transpose(a), b))


def test_nonfinite_result_is_divergence():
    with pytest.raises(DivergenceError):
        nm.matmul([[1e200]], [[1e200]])


def test_transpose_cases():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(nm.transpose(nm.transpose(a)), a)
    assert nm.transpose([[1, 2, 3]]).tolist() == [[1], [2], [3]]
    assert np.array_equal(nm.transpose(np.eye(4)), np.eye(4))


def test_hadamard_cases():
    a = np.arange(6.0).reshape(2, 3)
    assert np.array_equal(nm.hadamard(a, np.ones_like(a)), a)
    assert np.array_equal(nm.hadamard(a, np.zeros_like(a)), np.zeros_like(a))
    assert nm.hadamard([[2, 3]], [[4, 5]]).tolist() == [[8.0, 15.0]]
    with pytest.raises(ShapeError):
        nm.hadamard(a, a.T)


def test_outer_cases():
    e1 = np.array([[1.0], [0.0]])
    assert nm.outer(e1, e1).tolist() == [[1.0, 0.0], [0.0, 0.0]]
    assert np.array_equal(nm.outer(np.zeros((3, 1)), np.ones((2, 1))), np.zeros((3, 2)))
    assert nm.outer([[1], [2]], [[3], [4]]).tolist() == [[3.0, 4.0], [6.0, 8.0]]
    with pytest.raises(ShapeError):
        nm.outer(np.ones((2, 2)), np.ones((2, 1)))


def test_batch_outer_is_sum_of_outers():
    rng = np.random.default_rng(3)
    u, v = rng.normal(size=(4, 5)), rng.normal(size=(3, 5))
    ref = sum(np.outer(u[:, b], v[:, b]) for b in range(5))
    assert np.allclose(nm.batch_outer(u, v), ref, rtol=0, atol=1e-13)


def test_tally_counts_products():
    mm0, outer0 = nm.tally()
    nm.matmul(np.eye(2), np.eye(2))
    nm.matmul_tn(np.eye(2), np.eye(2))
    nm.batch_outer(np.eye(2), np.eye(2))
    mm1, outer1 = nm.tally()
    assert (mm1 - mm0, outer1 - outer0) == (2, 1)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.data())
def test_identity_associativity_bitwise(n, k, m, data):
    a = data.draw(finite_matrix(n, k))
    b = data.draw(finite_matrix(k, m))
    ab = nm.matmul(a, b)
    assert np.array_equal(nm.matmul(nm.matmul(a, np.eye(k)), b), ab)
    assert np.array_equal(nm.matmul(a, nm.matmul(np.eye(k), b)), ab)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.data())
def test_transpose_of_product(n, k, m, data):
    a = data.draw(arrays(np.float64, (n, k), elements=st.floats(-10, 10)))
    b = data.draw(arrays(np.float64, (k, m), elements=st.floats(-10, 10)))
    lhs = nm.transpose(nm.matmul(a, b))
    rhs = nm.matmul(nm.transpose(b), nm.transpose(a))
    assert np.allclose(lhs, rhs, rtol=0, atol=1e-12 * max(1.0, np.abs(a).max() * np.abs(b).max() * k))


@pytest.mark.parametrize("act", list(nm.Activation))
def test_activation_derivative_matches_fd(act):
    rng = np.random.default_rng(4)
    x = rng.uniform(-3, 3, size=1000)
    if act is nm.Activation.RELU:
        x = x[np.abs(x) >= 1e-4]
    h = 1e-6
    fd = (act.apply(x + h) - act.apply(x - h)) / (2 * h)
    assert np.max(np.abs(fd - act.derivative(x))) <= 1e-6


def test_relu_derivative_at_zero_is_zero():
    assert nm.Activation.RELU.derivative(np.array([0.0]))[0] == 0.0


@pytest.mark.parametrize("act", list(nm.Activation))
def test_activation_shape_preserving(act):
    x = np.linspace(-1, 1, 12).reshape(3, 4)
    assert act.apply(x).shape == x.shape and act.derivative(x).shape == x.shape


def test_init_weights_range_and_determinism():
    w = nm.init_weights(20, 16, nm.make_rng(7))
    assert np.all(np.abs(w) <= 1 / np.sqrt(16))
    assert np.array_equal(w, nm.init_weights(20, 16, nm.make_rng(7)))
    assert not np.array_equal(w, nm.init_weights(20, 16, nm.make_rng(8)))


def test_init_weights_mean_statistical():
    cols = 4
    w = nm.init_weights(250_000, cols, nm.make_rng(0))  # 10^6 draws
    k = 1 / np.sqrt(cols)
    sigma = k / np.sqrt(3)
    assert abs(w.mean()) <= 3 * sigma / 1e3


def test_init_weights_rejects_bad_args():
    with pytest.raises(ShapeError):
        nm.init_weights(0, 3, nm.make_rng(0))
    with pytest.raises(ValueError):
        nm.init_weights(2, 3, nm.make_rng(0), "he_normal")


def test_rng_same_seed_same_stream():
    assert np.array_equal(nm.make_rng(42).random(5), nm.make_rng(42).random(5))
    with pytest.raises(ValueError):
        nm.make_rng(-1)
