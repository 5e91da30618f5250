import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from tlm.autodiff import (
    ContractError,
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    cross_entropy,
    current_tape,
    embedding,
    gelu,
    layer_norm,
    matmul,
    softmax_lastdim,
)
from tlm.oracle import reference_matmul, reference_softmax

from conftest import grad_error


def T(x, grad=False):
    return Tensor(np.array(x, dtype=float), requires_grad=grad)


# --- matmul -----------------------------------------------------------------

def test_matmul_identity():
    out = matmul(T([[1, 0], [0, 1]]), T([[3, 4], [5, 6]]))
    assert out.data.tolist() == [[3, 4], [5, 6]]


def test_matmul_dot():
    assert matmul(T([[1, 2]]), T([[3], [4]])).data.tolist() == [[11]]


def test_matmul_matches_triple_loop(rng):
    a, b = rng.normal(size=(5, 7)), rng.normal(size=(7, 3))
    np.testing.assert_allclose(matmul(T(a), T(b)).data, reference_matmul(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError) as err:
        matmul(T(np.zeros((2, 3))), T(np.zeros((4, 5))))
    assert "(2, 3)" in str(err.value) and "(4, 5)" in str(err.value)


def test_matmul_batch_broadcast_error():
    with pytest.raises(ShapeError):
        matmul(T(np.zeros((2, 2, 3))), T(np.zeros((3, 3, 4))))


def test_matmul_backward_rule(rng):
    a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5))
    A, B = T(a, True), T(b, True)
    g = rng.normal(size=(2, 3, 5))
    with Tape():
        loss = (matmul(A, B) * g).sum()
    loss.backward()
    np.testing.assert_allclose(A.grad, g @ b.T, atol=1e-12)
    np.testing.assert_allclose(B.grad, sum(a[i].T @ g[i] for i in range(2)), atol=1e-12)


def test_matmul_gradient_finite_difference(rng):
    err = grad_error(lambda a, b: (matmul(a, b) * matmul(a, b)).sum(),
                     rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 2)))
    assert err < 1e-6


# --- softmax ----------------------------------------------------------------

def test_softmax_symmetric():
    assert softmax_lastdim(T([0.0, 0.0])).data.tolist() == [0.5, 0.5]


def test_softmax_large_negative_entry():
    y = softmax_lastdim(T([0.0, -1e9, 0.0])).data
    assert abs(y[0] - 0.5) < 1e-12 and abs(y[2] - 0.5) < 1e-12
    assert y[1] < 1e-12


def test_softmax_matches_naive_oracle(rng):
    x = rng.normal(size=8)
    y = softmax_lastdim(T(x)).data
    assert abs(y.sum() - 1.0) < 1e-12
    np.testing.assert_allclose(y, reference_softmax(x.tolist()), atol=1e-15)


def test_softmax_rejects_nan():
    with pytest.raises(NumericError):
        softmax_lastdim(T([0.0, float("nan")]))


def test_softmax_gradient_with_mask_entries(rng):
    mask = np.where(rng.random((3, 5)) < 0.3, -1e9, 0.0)
    w = rng.normal(size=(3, 5))
    assert grad_error(lambda x: (softmax_lastdim(x + Tensor(mask)) * Tensor(w)).sum(),
                      rng.normal(size=(3, 5))) < 1e-6


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50, allow_nan=False)),
       st.lists(st.booleans(), min_size=6, max_size=6))
def test_softmax_rows_sum_to_one(x, masked_cols):
    cols = np.array(masked_cols[: x.shape[1]])
    cols[0] = False  # keep one live entry per row
    x = x + np.where(cols, -1e9, 0.0)
    y = softmax_lastdim(T(x)).data
    assert (y >= 0).all()
    np.testing.assert_allclose(y.sum(axis=-1), 1.0, atol=1e-9)


# --- layer norm -------------------------------------------------------------

def test_layer_norm_constant_slice():
    out = layer_norm(T([5, 5, 5]), T([1, 1, 1]), T([0, 0, 0]))
    assert out.data.tolist() == [0.0, 0.0, 0.0]


def test_layer_norm_two_values():
    out = layer_norm(T([1, 3]), T([1, 1]), T([0, 0]), eps=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-9)


def test_layer_norm_gradient(rng):
    w = rng.normal(size=(2, 3, 6))
    err = grad_error(lambda x, g, b: (layer_norm(x, g, b) * Tensor(w)).sum(),
                     rng.normal(size=(2, 3, 6)), rng.normal(size=6), rng.normal(size=6))
    assert err < 1e-5


def test_layer_norm_shape_mismatch():
    with pytest.raises(ShapeError):
        layer_norm(T(np.zeros((2, 3))), T([1, 1]), T([0, 0]))


# --- cross entropy ----------------------------------------------------------

def test_cross_entropy_uniform():
    assert math.isclose(cross_entropy(T([[0, 0]]), [0]).item(), math.log(2), rel_tol=1e-12)


def test_cross_entropy_saturated():
    assert cross_entropy(T([[1000, 0]]), [0]).item() < 1e-12


def test_cross_entropy_gradient_rule(rng):
    logits = rng.normal(size=(4, 3))
    targets = np.array([0, 2, 1, 2])
    L = T(logits, True)
    with Tape():
        loss = cross_entropy(L, targets)
    loss.backward()
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = (p - np.eye(3)[targets]) / 4
    np.testing.assert_allclose(L.grad, expected, atol=1e-12)
    assert grad_error(lambda x: cross_entropy(x, targets), logits) < 1e-5


def test_cross_entropy_ignore_index(rng):
    logits = rng.normal(size=(3, 4))
    full = cross_entropy(T(logits), [1, 0, 2], ignore_index=0).item()
    kept = cross_entropy(T(logits[[0, 2]]), [1, 2]).item()
    assert math.isclose(full, kept, rel_tol=1e-12)


def test_cross_entropy_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(T([[0, 0]]), [2])


# --- other ops --------------------------------------------------------------

def test_gelu_gradient(rng):
    assert grad_error(lambda x: (gelu(x) * gelu(x)).sum(), rng.normal(size=(3, 4)) * 2) < 1e-6


def test_embedding_gradient_accumulates_repeats():
    W = T(np.arange(12.0).reshape(4, 3), True)
    with Tape():
        loss = embedding(W, [[1, 1, 3]]).sum()
    loss.backward()
    np.testing.assert_array_equal(W.grad[:, 0], [0, 2, 0, 1])


def test_embedding_out_of_range():
    with pytest.raises(IndexError):
        embedding(T(np.zeros((4, 2))), [4])


def test_reshape_transpose_getitem_gradients(rng):
    w = rng.normal(size=(3, 2))
    f = lambda x: (x.reshape(2, 3).transpose(1, 0)[1:, :] * Tensor(w[1:])).sum()  # noqa: E731
    assert grad_error(f, rng.normal(size=6)) < 1e-8


def test_broadcast_add_mul_gradients(rng):
    f = lambda a, b: ((a + b) * (a * b)).mean()  # noqa: E731
    assert grad_error(f, rng.normal(size=(2, 3, 4)), rng.normal(size=(4,))) < 1e-6


# --- tape semantics ---------------------------------------------------------

def test_backward_sum():
    x = T([1.0, 2.0, 3.0], True)
    with Tape():
        loss = x.sum()
    loss.backward()
    assert x.grad.tolist() == [1, 1, 1]


def test_backward_square():
    x = T([2.0, -1.0], True)
    with Tape():
        loss = (x * x).sum()
    loss.backward()
    assert x.grad.tolist() == [4, -2]


def test_backward_non_scalar_rejected():
    x = T([1.0, 2.0], True)
    with Tape():
        y = x * 2.0
    with pytest.raises(ContractError):
        y.backward()


def test_backward_outside_tape_rejected():
    x = T([1.0], True)
    with pytest.raises(ContractError):
        (x * 2.0).sum().backward()


def test_untracked_tensor_gets_no_grad():
    x = T([1.0, 2.0], True)
    c = T([3.0, 4.0])
    with Tape():
        loss = (x * c).sum()
    loss.backward()
    assert c.grad is None
    assert x.grad.tolist() == [3, 4]


def test_unreachable_leaf_has_no_grad():
    x, y = T([1.0], True), T([2.0], True)
    with Tape():
        loss = (x * 3.0).sum()
        _ = y * 2.0
    loss.backward()
    assert y.grad is None


def test_diamond_graph_visits_each_node_once():
    x = T([3.0], True)
    with Tape() as tape:
        a = x * 2.0
        loss = (a * a + a).sum()
    loss.backward()
    assert x.grad.tolist() == [2 * (2 * 6.0 + 1)]
    ids = [n.index for n in tape.nodes]
    assert ids == sorted(ids)
    for node in tape.nodes:
        for p in node.parents:
            assert p._node is None or p._node.index < node.index


def test_tape_stack_is_thread_local():
    seen = []
    with Tape():
        t = threading.Thread(target=lambda: seen.append(current_tape()))
        t.start()
        t.join()
        assert current_tape() is not None
    assert seen == [None]
    assert current_tape() is None


def test_forward_is_deterministic(rng):
    a, b = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    y1 = softmax_lastdim(matmul(T(a), T(b))).data
    y2 = softmax_lastdim(matmul(T(a), T(b))).data
    assert np.array_equal(y1, y2)
