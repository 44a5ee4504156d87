import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moka.errors import ContractError, ShapeError
from moka.numkernel import (
    RngStream,
    Tape,
    backward,
    concat_rows,
    cross_entropy,
    fd_gradient,
    kaiming_uniform_init,
    matmul,
    mean_rows,
    param_grads,
    relative_error,
    sigmoid,
    silu,
    slice_rows,
    softmax_rows,
    sum_all,
    transpose,
)


# --- matmul ---------------------------------------------------------------

def test_matmul_identity():
    m = np.array([[1.5, -2.0], [0.25, 4.0]])
    np.testing.assert_array_equal(matmul(np.eye(2), m), m)


def test_matmul_hand_example():
    out = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[1.0], [1.0]]))
    np.testing.assert_array_equal(out, [[3.0], [7.0]])


def test_matmul_zero():
    m = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(matmul(np.zeros((4, 2)), m), np.zeros((4, 3)))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31))
def test_matmul_associative(m, n, p, q, seed):
    g = np.random.default_rng(seed)
    a, b, c = g.normal(size=(m, n)), g.normal(size=(n, p)), g.normal(size=(p, q))
    np.testing.assert_allclose(matmul(matmul(a, b), c), matmul(a, matmul(b, c)), rtol=1e-10, atol=1e-12)


# --- softmax --------------------------------------------------------------

def test_softmax_uniform_row():
    np.testing.assert_allclose(softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3], rtol=0, atol=1e-15)


def test_softmax_large_logit_is_stable():
    np.testing.assert_allclose(softmax_rows(np.array([[1000.0, 0.0]])), [[1.0, 0.0]], atol=1e-12)


def test_softmax_closed_form():
    out = softmax_rows(np.log(np.array([[1.0, 2.0, 3.0]])))
    np.testing.assert_allclose(out, [[1 / 6, 2 / 6, 3 / 6]], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31))
def test_softmax_rows_stochastic(rows, cols, seed):
    x = np.random.default_rng(seed).normal(scale=20, size=(rows, cols))
    s = softmax_rows(x)
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


# --- init -----------------------------------------------------------------

def test_kaiming_bound():
    w = kaiming_uniform_init(64, 10, RngStream(3))
    assert np.abs(w).max() <= math.sqrt(6 / 10)


def test_kaiming_deterministic():
    a = kaiming_uniform_init(2, 3, RngStream(42))
    b = kaiming_uniform_init(2, 3, RngStream(42))
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, kaiming_uniform_init(2, 3, RngStream(43)))


def test_kaiming_mean_monte_carlo():
    n = 100_000
    w = kaiming_uniform_init(1, n, RngStream(7))
    bound = math.sqrt(6 / n)
    sigma_mean = bound / math.sqrt(3) / math.sqrt(n)
    assert abs(w.mean()) < 3 * sigma_mean


def test_kaiming_rejects_empty_shape():
    with pytest.raises(ContractError):
        kaiming_uniform_init(0, 3, RngStream(0))


def test_child_streams_are_named_and_stable():
    root = RngStream(5)
    a = root.child("A.audio").generator().normal(size=4)
    b = root.child("A.audio").generator().normal(size=4)
    c = root.child("A.visual").generator().normal(size=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


# --- backward -------------------------------------------------------------

def test_backward_linear_map():
    # loss = sum(W x): dL/dW[i, j] = x[j] for every row i
    x = np.array([[1.0], [-2.0], [0.5]])
    tape = Tape()
    w = tape.leaf(np.arange(6.0).reshape(2, 3))
    loss = sum_all(matmul(w, tape.const(x)))
    g = backward(tape, loss)[w.id]
    np.testing.assert_array_equal(g, np.tile(x.T, (2, 1)))


def test_backward_constant_loss_gives_zero():
    tape = Tape()
    w = tape.leaf(np.ones((2, 2)))
    c = tape.const(np.full((1, 1), 3.0))
    g = backward(tape, sum_all(c))
    np.testing.assert_array_equal(g[w.id], np.zeros((2, 2)))


def test_backward_requires_scalar_loss():
    tape = Tape()
    w = tape.leaf(np.ones((2, 2)))
    with pytest.raises(ContractError):
        backward(tape, w * 2.0)


def _composite(tape, params, x, labels):
    h = silu(matmul(tape.const(x), transpose(params["W1"])) + params["b1"])
    att = softmax_rows(matmul(h, transpose(h)) * 0.5)
    h2 = concat_rows(slice_rows(matmul(att, h), 0, 2), slice_rows(h, 2, 4))
    g = sigmoid(matmul(h2, params["W2"]))
    pooled = mean_rows(h2 * g - h2)
    return cross_entropy(matmul(pooled, params["W3"]), labels)


@pytest.mark.parametrize("seed", range(20))
def test_backward_matches_finite_differences(seed):
    g = np.random.default_rng(seed)
    values = {
        "W1": g.normal(size=(5, 3)),
        "b1": g.normal(size=(1, 5)),
        "W2": g.normal(size=(5, 5)) * 0.5,
        "W3": g.normal(size=(5, 4)),
    }
    x = g.normal(size=(4, 3))
    labels = [int(g.integers(4))]
    tape = Tape("f64")
    params = {k: tape.param(k, v) for k, v in values.items()}
    grads = param_grads(tape, _composite(tape, params, x, labels))

    def f(p):
        t = Tape("f64")
        return _composite(t, {k: t.param(k, v) for k, v in p.items()}, x, labels).value[0, 0]

    numeric = fd_gradient(f, values, 1e-5)
    for name in values:
        assert relative_error(grads[name], numeric[name]) < 1e-4, name


def test_batched_graph_matches_per_sample():
    g = np.random.default_rng(0)
    x = g.normal(size=(3, 4, 5))
    w = g.normal(size=(2, 5))
    batched = softmax_rows(matmul(x, transpose(w)))
    for i in range(3):
        np.testing.assert_allclose(batched[i], softmax_rows(matmul(x[i], transpose(w))), atol=1e-14)


def test_replay_is_bit_identical():
    g = np.random.default_rng(1)
    tape = Tape("f64")
    a = tape.leaf(g.normal(size=(3, 4)))
    b = tape.leaf(g.normal(size=(4, 2)))
    out = sigmoid(matmul(a, b)) * 3.0
    vals = tape.replay()
    np.testing.assert_array_equal(vals[out.id], out.value)
    new_a = g.normal(size=(3, 4))
    vals = tape.replay({a.id: new_a})
    np.testing.assert_array_equal(vals[out.id], sigmoid(matmul(new_a, b.value)) * 3.0)


def test_flop_counter_matmul_and_softmax():
    tape = Tape()
    a = tape.leaf(np.ones((3, 4)))
    b = tape.leaf(np.ones((4, 5)))
    m = matmul(a, b)
    assert tape.flop_count() == 2 * 3 * 5 * 4
    start = len(tape)
    softmax_rows(m)
    assert tape.flop_count(start) == 4 * 15


def test_cross_entropy_uniform_logits():
    loss = cross_entropy(np.zeros((1, 8)), [3])
    assert loss[0, 0] == pytest.approx(math.log(8), abs=1e-12)


def test_cross_entropy_confident_limit():
    logits = np.array([[60.0, 0.0, 0.0]])
    assert cross_entropy(logits, [0])[0, 0] < 1e-20


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_eager_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        matmul(np.array([[np.inf]]), np.array([[0.0]]))


# --- finite differences ---------------------------------------------------

def test_fd_square():
    g = fd_gradient(lambda p: p["p"][0, 0] ** 2, {"p": np.array([[3.0]])}, 1e-5)
    assert g["p"][0, 0] == pytest.approx(6.0, abs=1e-8)


def test_fd_constant_is_zero():
    g = fd_gradient(lambda p: 4.0, {"p": np.ones((2, 3))})
    np.testing.assert_array_equal(g["p"], np.zeros((2, 3)))


def test_fd_quadratic_form():
    q = np.array([[2.0, 1.0, 0.0], [-1.0, 3.0, 0.5], [0.0, 2.0, 1.0]])
    p = np.array([[0.3], [-1.2], [2.0]])
    g = fd_gradient(lambda d: (d["p"].T @ q @ d["p"])[0, 0], {"p": p})
    np.testing.assert_allclose(g["p"], (q + q.T) @ p, atol=1e-6)


def test_fd_rejects_bad_step():
    with pytest.raises(ContractError):
        fd_gradient(lambda p: 0.0, {"p": np.ones((1, 1))}, 0.0)
