import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mirnetv2 import tensor as T
from mirnetv2.tensor import DTypeMismatch, ShapeError, Tape, TapeError, Tensor

from oracles import fd_grad, rel_err

F64 = np.float64


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=F64), requires_grad=grad)


def grad_of(f, *leaves):
    with Tape() as tape:
        loss = f(*leaves)
    g = tape.backward(loss)
    return [g.get(x) for x in leaves]


def check_op_gradient(op, *shapes, seed=0, positive=False, tol=1e-6):
    """Reverse-mode vs central differences for sum(op(...) * r), float64."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(0.5, 1.5, s) if positive else rng.standard_normal(s) for s in shapes]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    r = None

    def loss(*xs):
        nonlocal r
        out = op(*xs)
        if r is None:
            r = Tensor(np.random.default_rng(seed + 1).standard_normal(out.shape))
        return T.total(T.mul(out, r))

    analytic = grad_of(loss, *leaves)
    for leaf, a in zip(leaves, analytic):
        num = fd_grad(lambda: loss(*leaves).item(), leaf.data)
        assert rel_err(a, num, floor=1e-8) < tol


# ---------------------------------------------------------------------------
# Tensor invariants

def test_buffer_length_matches_shape():
    t = Tensor(np.zeros((2, 3, 4, 5)))
    assert t.data.size == 2 * 3 * 4 * 5
    assert Tensor([[1, 2], [3, 4]]).dtype == np.float32  # raw data takes the default
    assert t.dtype == np.float64  # float arrays keep their dtype


def test_zero_extent_rejected():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((1, 0, 2, 2)))


def test_mixed_dtypes_are_an_error():
    a = Tensor(np.ones((2, 2), dtype=np.float32))
    b = Tensor(np.ones((2, 2), dtype=np.float64))
    for fn in (T.add, T.sub, T.mul, T.matmul):
        with pytest.raises(DTypeMismatch):
            fn(a, b)


def test_default_dtype_context():
    with T.default_dtype(np.float64):
        assert Tensor([1.0, 2.0]).dtype == np.float64
    assert Tensor([1.0, 2.0]).dtype == np.float32


# ---------------------------------------------------------------------------
# matmul

def test_matmul_identity():
    m = t64(np.arange(6.0).reshape(3, 2))
    assert np.array_equal(T.matmul(t64(np.eye(3)), m).data, m.data)


def test_matmul_hand_example():
    out = T.matmul(t64([[1, 2], [3, 4]]), t64([[5], [6]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_gradient_matches_fd():
    rng = np.random.default_rng(3)
    a, b = t64(rng.standard_normal((3, 4)), True), t64(rng.standard_normal((4, 2)), True)
    ga, gb = grad_of(lambda a, b: T.total(T.matmul(a, b)), a, b)
    f = lambda: T.total(T.matmul(a, b)).item()
    assert rel_err(ga, fd_grad(f, a.data)) < 1e-6
    assert rel_err(gb, fd_grad(f, b.data)) < 1e-6


def test_batched_matmul_gradient():
    check_op_gradient(T.matmul, (2, 3, 5), (2, 5, 1))


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        T.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


# ---------------------------------------------------------------------------
# softmax

def test_softmax_constant_is_uniform():
    out = T.softmax(t64(np.full(5, 3.7)), axis=0)
    assert np.allclose(out.data, 0.2, atol=0, rtol=1e-15)


def test_softmax_two_point():
    out = T.softmax(t64([0.0, math.log(3.0)]), axis=0)
    assert np.allclose(out.data, [0.25, 0.75], rtol=0, atol=1e-15)


@given(hnp.arrays(F64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6),
                  elements=st.floats(-30, 30)),
       st.floats(-50, 50))
def test_softmax_shift_invariance_and_normalization(x, c):
    axis = x.ndim - 1
    a = T.softmax(t64(x), axis).data
    b = T.softmax(t64(x + c), axis).data
    assert np.allclose(a, b, rtol=1e-9, atol=1e-12)
    assert np.all(a > 0)
    assert np.allclose(a.sum(axis=axis), 1.0, atol=1e-6)


def test_softmax_large_logits_stable():
    out = T.softmax(t64([1000.0, 1000.0]), axis=0)
    assert np.allclose(out.data, 0.5)


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        T.softmax(t64([0.0, np.nan]), axis=0)


def test_softmax_gradient():
    check_op_gradient(lambda x: T.softmax(x, axis=1), (3, 7))


# ---------------------------------------------------------------------------
# global average pooling

def test_gap_constant():
    assert np.all(T.global_avg_pool(t64(np.full((2, 3, 4, 5), 1.5))).data == 1.5)


def test_gap_hand_example():
    out = T.global_avg_pool(t64(np.array([1.0, 2, 3, 4]).reshape(1, 1, 2, 2)))
    assert out.shape == (1, 1, 1, 1) and out.data.item() == 2.5


@given(st.floats(-10, 10))
def test_gap_linearity(alpha):
    x = np.random.default_rng(0).standard_normal((2, 3, 4, 4))
    lhs = T.global_avg_pool(t64(alpha * x)).data
    rhs = alpha * T.global_avg_pool(t64(x)).data
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-12)


def test_gap_gradient():
    check_op_gradient(T.global_avg_pool, (2, 3, 3, 4))


def test_gap_needs_4d():
    with pytest.raises(ShapeError):
        T.global_avg_pool(t64(np.ones((3, 4))))


# ---------------------------------------------------------------------------
# elementwise

def test_add_zero_identity():
    x = t64(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    assert np.array_equal(T.elementwise("add", x, 0.0).data, x.data)


def test_broadcast_mul_halves():
    x = t64(np.random.default_rng(0).standard_normal((2, 3, 4, 4)))
    out = T.elementwise("broadcast_mul", x, t64(np.full((2, 3, 1, 1), 0.5)))
    assert np.array_equal(out.data, x.data * 0.5)


def test_add_matches_loop_oracle():
    rng = np.random.default_rng(5)
    a, b = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 4, 4))
    expect = np.empty_like(a)
    for idx in np.ndindex(a.shape):
        expect[idx] = a[idx] + b[idx]
    assert np.array_equal(T.elementwise("add", t64(a), t64(b)).data, expect)


def test_broadcast_add_replicates_over_space():
    x = t64(np.zeros((1, 2, 3, 3)))
    b = t64(np.array([1.0, -2.0]).reshape(1, 2, 1, 1))
    out = T.elementwise("broadcast_add", x, b).data
    assert np.all(out[0, 0] == 1.0) and np.all(out[0, 1] == -2.0)


def test_non_broadcastable_shapes():
    with pytest.raises(ShapeError):
        T.add(t64(np.ones((1, 2, 3, 3))), t64(np.ones((1, 3, 1, 1))))
    with pytest.raises(ShapeError):
        T.elementwise("broadcast_mul", t64(np.ones((1, 2, 3, 3))), t64(np.ones((1, 2, 3, 3))))
    with pytest.raises(ValueError):
        T.elementwise("pow", t64(np.ones(2)), 2.0)


@pytest.mark.parametrize("op,shapes,positive", [
    (T.add, [(2, 3, 4, 4), (2, 3, 4, 4)], False),
    (T.sub, [(2, 3, 4, 4), (2, 3, 1, 1)], False),
    (T.mul, [(2, 3, 4, 4), (2, 3, 1, 1)], False),
    (lambda x: T.scale(x, -1.7), [(3, 4)], False),
    (T.neg, [(3, 4)], False),
    (T.sqrt, [(3, 4)], True),
    (T.mean, [(3, 4)], False),
])
def test_elementwise_gradients(op, shapes, positive):
    check_op_gradient(op, *shapes, positive=positive)


def test_relu_gradient_away_from_kink():
    x = t64(np.array([-2.0, -0.5, 0.3, 1.7]), True)
    (g,) = grad_of(lambda x: T.total(T.relu(x)), x)
    assert g.tolist() == [0.0, 0.0, 1.0, 1.0]


def test_shape_op_gradients():
    check_op_gradient(lambda x: T.reshape(x, (6, 4)), (2, 3, 4))
    check_op_gradient(lambda a, b: T.stack([a, b], axis=1), (2, 3), (2, 3))
    check_op_gradient(lambda x: T.take(x, 1, axis=1), (2, 3, 4))
    check_op_gradient(lambda a, b: T.concat([a, b], axis=1), (1, 2, 3, 3), (1, 4, 3, 3))
    check_op_gradient(lambda x: T.narrow(x, 1, 2, 3), (1, 6, 2, 2))


# ---------------------------------------------------------------------------
# backward

def test_backward_sum_gives_ones():
    x = t64(np.random.default_rng(0).standard_normal((2, 3)), True)
    (g,) = grad_of(T.total, x)
    assert np.array_equal(g, np.ones((2, 3)))


def test_backward_square():
    x = t64(np.random.default_rng(0).standard_normal((4, 5)), True)
    (g,) = grad_of(lambda x: T.total(T.mul(x, x)), x)
    assert np.allclose(g, 2 * x.data, rtol=1e-15, atol=0)


def test_untracked_leaf_gets_nothing():
    x = t64(np.ones(3), True)
    c = t64(np.full(3, 2.0))
    with Tape() as tape:
        loss = T.total(T.mul(x, c))
    g = tape.backward(loss)
    assert x in g and c not in g


def test_shared_parameter_accumulates():
    rng = np.random.default_rng(2)
    w = t64(rng.standard_normal((3, 3)), True)
    u, v = t64(rng.standard_normal((3, 1))), t64(rng.standard_normal((3, 1)))
    (g1,) = grad_of(lambda w: T.total(T.matmul(w, u)), w)
    (g2,) = grad_of(lambda w: T.total(T.matmul(w, v)), w)
    (g12,) = grad_of(lambda w: T.add(T.total(T.matmul(w, u)), T.total(T.matmul(w, v))), w)
    assert np.allclose(g12, g1 + g2, rtol=1e-14, atol=1e-14)


def test_backward_visits_nodes_once_in_reverse():
    order = []
    x = t64(np.ones(2), True)
    with Tape() as tape:
        a = T.make_result(x.data * 2, (x,), lambda g: (order.append("a") or g * 2,))
        b = T.make_result(a.data * 3, (a,), lambda g: (order.append("b") or g * 3,))
        loss = T.total(b)
    assert [n.parents[0] for n in tape.nodes[:2]] == [x, a]  # inputs precede outputs
    g = tape.backward(loss)
    assert order == ["b", "a"]
    assert np.array_equal(g[x], np.full(2, 6.0))


def test_loss_must_be_scalar():
    x = t64(np.ones(3), True)
    with Tape() as tape:
        y = T.mul(x, x)
    with pytest.raises(ShapeError):
        tape.backward(y)


def test_backward_without_tape():
    x = t64(np.ones(3), True)
    with pytest.raises(TapeError):
        T.backward(T.total(x))


def test_tape_freed_after_backward():
    x = t64(np.ones(3), True)
    with Tape() as tape:
        loss = T.total(x)
    tape.backward(loss)
    assert len(tape) == 0
    with pytest.raises(TapeError):
        tape.backward(loss)


def test_forward_is_deterministic():
    rng = np.random.default_rng(9)
    a, b = rng.standard_normal((16, 32)).astype(np.float32), rng.standard_normal((32, 8)).astype(np.float32)
    r1 = T.softmax(T.matmul(Tensor(a), Tensor(b)), axis=1).data
    r2 = T.softmax(T.matmul(Tensor(a), Tensor(b)), axis=1).data
    assert r1.tobytes() == r2.tobytes()


def test_numerical_gradient_requires_f64():
    with pytest.raises(DTypeMismatch):
        T.numerical_gradient(lambda: 0.0, np.zeros(3, dtype=np.float32))


def test_op_counter_counts_flops():
    x = t64(np.ones((2, 3)))
    with T.count_ops() as c:
        T.add(x, x)
        T.matmul(t64(np.ones((4, 5))), t64(np.ones((5, 2))))
    assert c.flops == 6 + 4 * 2 * 5
    assert c.by_kind["add"] == 6
