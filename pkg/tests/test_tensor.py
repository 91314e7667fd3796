import math
import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from hatfusion import tensor as T
from hatfusion.tensor import GraphError, ShapeError, Tensor

from oracles import check_gradients, numerical_grad, rel_error

GRAD_TOL = 1e-4


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- matmul -----------------------------------------------------------------

def test_matmul_identity(rng):
    x = rng.normal(size=(2, 5))
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)


def test_matmul_zero(rng):
    x = rng.normal(size=(3, 4))
    assert not T.matmul(Tensor(np.zeros((2, 3))), Tensor(x)).data.any()


def test_matmul_hand_product():
    out = T.matmul(Tensor([[1, 2], [3, 4]]), Tensor([[5, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[19, 22], [43, 50]])


def test_matmul_shape_mismatch_reports_dims():
    with pytest.raises(ShapeError, match=r"3 != 4"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


# -- softmax ----------------------------------------------------------------

def test_softmax_constant_row():
    np.testing.assert_allclose(T.softmax(Tensor([2.5, 2.5, 2.5])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_closed_form():
    np.testing.assert_allclose(T.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(
    arrays(np.float64, (3, 6), elements=st.floats(-50, 50)),
    st.floats(-100, 100),
)
def test_softmax_shift_invariant_and_normalised(x, c):
    a = T.softmax(Tensor(x), axis=-1).data
    b = T.softmax(Tensor(x + c), axis=-1).data
    np.testing.assert_allclose(a, b, atol=1e-12)
    assert np.all(a >= 0) and np.all(a <= 1)
    np.testing.assert_allclose(a.sum(axis=-1), 1.0, atol=1e-12)


def test_softmax_mask_zeroes_entries():
    y = T.softmax(Tensor([1.0, 2.0, 3.0]), mask=np.array([True, False, True])).data
    assert y[1] == 0.0
    assert abs(y.sum() - 1.0) < 1e-12


# -- layer norm -------------------------------------------------------------

def test_layer_norm_constant_row():
    out = T.layer_norm(Tensor(np.full((1, 4), 7.0)), Tensor(np.ones(4)), Tensor(np.zeros(4)))
    assert not out.data.any()


def test_layer_norm_already_standard():
    out = T.layer_norm(Tensor([[1.0, -1.0]]), Tensor(np.ones(2)), Tensor(np.zeros(2)), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-10)


def test_layer_norm_zero_gain_gives_bias(rng):
    bias = rng.normal(size=5)
    out = T.layer_norm(Tensor(rng.normal(size=(3, 5))), Tensor(np.zeros(5)), Tensor(bias))
    np.testing.assert_array_equal(out.data, np.broadcast_to(bias, (3, 5)))


def test_layer_norm_moments(rng):
    out = T.layer_norm(Tensor(rng.normal(3.0, 2.0, size=(6, 16))), Tensor(np.ones(16)), Tensor(np.zeros(16)))
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-6)
    np.testing.assert_allclose(out.data.var(axis=-1), 1.0, atol=1e-5)


# -- backward basics --------------------------------------------------------

def test_backward_sum_gives_ones(rng):
    x = T.parameter(rng.normal(size=(3, 4)))
    T.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_square():
    x = T.parameter(3.0)
    (x * x).backward()
    assert x.grad == 6.0


def test_backward_rejects_non_scalar(rng):
    x = T.parameter(rng.normal(size=3))
    with pytest.raises(GraphError, match="scalar"):
        (x * 2.0).backward()


def test_backward_twice_rejected(rng):
    x = T.parameter(rng.normal(size=3))
    loss = T.sum_(x * x)
    loss.backward()
    with pytest.raises(GraphError, match="freed"):
        loss.backward()


def test_gradients_accumulate_across_graphs(rng):
    x = T.parameter(rng.normal(size=3))
    T.sum_(x).backward()
    T.sum_(x).backward()
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))


def test_shared_subexpression_visited_once(rng):
    x = T.parameter(rng.normal(size=4))
    y = T.tanh(x)
    loss = T.sum_(y * y + y)
    loss.backward()
    t = np.tanh(x.data)
    np.testing.assert_allclose(x.grad, (2 * t + 1) * (1 - t * t), rtol=1e-13)


def test_composite_matmul_softmax_sum(rng):
    a = T.parameter(rng.normal(size=(3, 4)))
    b = T.parameter(rng.normal(size=(4, 5)))
    w = rng.normal(size=(3, 5))
    errs = check_gradients(lambda: T.sum_(T.softmax(T.matmul(a, b), axis=-1) * w), [("a", a), ("b", b)])
    assert max(errs.values()) < 1e-6


# -- gradient checks for every primitive ------------------------------------

def _p(rng, *shape):
    return T.parameter(rng.normal(size=shape))


PRIMITIVE_CASES = {
    "add_broadcast": lambda r: ([_p(r, 3, 4), _p(r, 4)], lambda a, b: a + b),
    "sub": lambda r: ([_p(r, 2, 3), _p(r, 2, 3)], lambda a, b: a - b),
    "mul_broadcast": lambda r: ([_p(r, 2, 3), _p(r, 1, 3)], lambda a, b: a * b),
    "div": lambda r: ([_p(r, 2, 3), T.parameter(r.uniform(1, 2, size=(2, 3)))], lambda a, b: T.div(a, b)),
    "tanh": lambda r: ([_p(r, 2, 3)], T.tanh),
    "exp": lambda r: ([_p(r, 2, 3)], T.exp),
    "gelu": lambda r: ([_p(r, 2, 5)], T.gelu),
    "matmul_2d": lambda r: ([_p(r, 2, 3), _p(r, 3, 2)], T.matmul),
    "matmul_batched_weight": lambda r: ([_p(r, 2, 3, 4), _p(r, 4, 2)], T.matmul),
    "matmul_batched": lambda r: ([_p(r, 2, 3, 4), _p(r, 2, 4, 2)], T.matmul),
    "reshape": lambda r: ([_p(r, 2, 6)], lambda a: T.reshape(a, (3, 4))),
    "transpose": lambda r: ([_p(r, 2, 3, 4)], lambda a: T.transpose(a, (2, 0, 1))),
    "broadcast_to": lambda r: ([_p(r, 3, 2)], lambda a: T.broadcast_to(a, (4, 3, 2))),
    "concatenate": lambda r: ([_p(r, 2, 3), _p(r, 2, 1)], lambda a, b: T.concatenate([a, b], axis=-1)),
    "sum_axis": lambda r: ([_p(r, 2, 3, 2)], lambda a: T.sum_(a, axis=1)),
    "mean_axis": lambda r: ([_p(r, 2, 3, 2)], lambda a: T.mean(a, axis=-1, keepdims=True)),
    "softmax": lambda r: ([_p(r, 2, 4)], lambda a: T.softmax(a, axis=-1)),
    "softmax_masked": lambda r: ([_p(r, 2, 4)], lambda a: T.softmax(a, axis=-1, mask=np.array([True, False, True, True]))),
    "log_softmax": lambda r: ([_p(r, 2, 4)], lambda a: T.log_softmax(a, axis=-1)),
    "layer_norm": lambda r: ([_p(r, 3, 4), _p(r, 4), _p(r, 4)], T.layer_norm),
    "embedding": lambda r: ([_p(r, 3, 2)], lambda t: T.embedding(t, np.array([[0, 2], [2, 2]]))),
    "rope": lambda r: ([_p(r, 3, 4)], lambda a: T.rope(a, np.array([0.7, 0.1]))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    params, fn = PRIMITIVE_CASES[name](rng)
    out_shape = fn(*params).shape
    weights = rng.normal(size=out_shape)
    errs = check_gradients(lambda: T.sum_(fn(*params) * weights), [(str(i), p) for i, p in enumerate(params)])
    assert max(errs.values()) < GRAD_TOL, errs


@pytest.mark.parametrize("training", [True, False])
def test_batch_norm_gradients(rng, training):
    x = _p(rng, 2, 3, 4)
    gain, bias = _p(rng, 4), _p(rng, 4)
    mask = np.array([[True, True, False], [True, True, True]])
    weights = rng.normal(size=(2, 3, 4))
    rm, rv = rng.normal(size=4), rng.uniform(0.5, 2.0, size=4)

    def loss():
        out = T.batch_norm(x, gain, bias, rm.copy(), rv.copy(), training=training, mask=mask)
        return T.sum_(out * weights)

    errs = check_gradients(loss, [("x", x), ("gain", gain), ("bias", bias)])
    assert max(errs.values()) < GRAD_TOL, errs


def test_dropout_gradient_with_fixed_mask(rng):
    x = _p(rng, 3, 5)
    weights = rng.normal(size=(3, 5))

    def loss():
        return T.sum_(T.dropout(x, 0.3, training=True, rng=np.random.default_rng(7)) * weights)

    errs = check_gradients(loss, [("x", x)])
    assert errs["x"] < GRAD_TOL


# -- dropout and batch norm semantics ---------------------------------------

def test_dropout_identity_at_eval_and_p_zero(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    assert T.dropout(x, 0.5, training=False) is x
    np.testing.assert_array_equal(T.dropout(x, 0.0, training=True, rng=rng).data, x.data)


def test_dropout_unbiased():
    x = np.linspace(-1.0, 2.0, 6)
    n, p = 20000, 0.3
    gen = np.random.default_rng(0)
    draws = np.stack([T.dropout(Tensor(x), p, training=True, rng=gen).data for _ in range(n)])
    se = np.abs(x) * math.sqrt(p / (1 - p)) / math.sqrt(n)
    assert np.all(np.abs(draws.mean(axis=0) - x) <= 3 * se + 1e-15)


def test_batch_norm_eval_is_fixed_affine(rng):
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2.0, size=3)
    gain, bias = Tensor(rng.normal(size=3)), Tensor(rng.normal(size=3))
    x = rng.normal(size=(5, 3))
    out1 = T.batch_norm(Tensor(x), gain, bias, rm, rv, training=False).data
    out2 = T.batch_norm(Tensor(x), gain, bias, rm, rv, training=False).data
    np.testing.assert_array_equal(out1, out2)
    expected = (x - rm) / np.sqrt(rv + 1e-5) * gain.data + bias.data
    np.testing.assert_allclose(out1, expected, rtol=1e-14)


def test_batch_norm_train_updates_running_stats(rng):
    rm, rv = np.zeros(2), np.ones(2)
    x = rng.normal(2.0, 3.0, size=(50, 2))
    T.batch_norm(Tensor(x), Tensor(np.ones(2)), Tensor(np.zeros(2)), rm, rv, training=True)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=0, ddof=1), rtol=1e-12)


def test_batch_norm_mask_excludes_rows(rng):
    x = rng.normal(size=(2, 4, 3))
    mask = np.array([[True, True, False, False], [True, True, True, True]])
    x_changed = x.copy()
    x_changed[0, 2:] = 1e6
    args = (Tensor(np.ones(3)), Tensor(np.zeros(3)))
    a = T.batch_norm(Tensor(x), *args, np.zeros(3), np.ones(3), training=True, mask=mask).data
    b = T.batch_norm(Tensor(x_changed), *args, np.zeros(3), np.ones(3), training=True, mask=mask).data
    np.testing.assert_array_equal(a, b)


def test_numerical_grad_oracle_on_known_function():
    x = np.array([0.3, -1.2])
    g = numerical_grad(lambda: float(np.sum(np.sin(x))), x)
    assert rel_error(g, np.cos(x)) < 1e-9
