import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from batchformer import tensor as T
from batchformer.harness.gradcheck import check_tensors
from batchformer.tensor import Tensor

pytestmark = pytest.mark.usefixtures("f64")

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def _proj(fn, rng, shape):
    r = rng.uniform(-1, 1, size=shape)
    return lambda: (fn() * r).sum()


# -- matmul ---------------------------------------------------------------------

def test_matmul_identity():
    a = Tensor(np.eye(2))
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal((a @ b).data, [[1, 2], [3, 4]])


def test_matmul_hand_arithmetic():
    assert (Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_gradcheck(rng):
    a = Tensor(rng.uniform(-1, 1, (3, 4)))
    b = Tensor(rng.uniform(-1, 1, (4, 5)))
    assert check_tensors(_proj(lambda: a @ b, rng, (3, 5)), [a, b], rng) <= 1e-6


def test_matmul_backward_rules(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    g = rng.normal(size=(3, 2))
    (a @ b).backward(g)
    np.testing.assert_allclose(a.grad, g @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ g)


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(T.DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 5)))


def test_matmul_leading_extents_must_be_equal():
    with pytest.raises(T.DimensionError):
        Tensor(np.zeros((2, 3, 4))) @ Tensor(np.zeros((3, 4, 5)))


# -- softmax --------------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_array_equal(T.softmax_lastaxis(Tensor([0.0, 0.0])).data, [0.5, 0.5])
    assert T.softmax_lastaxis(Tensor([7.3])).data.tolist() == [1.0]


def test_softmax_gradcheck(rng):
    x = Tensor(rng.uniform(-1, 1, 5))
    assert check_tensors(_proj(lambda: T.softmax_lastaxis(x), rng, (5,)), [x], rng) <= 1e-6


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=6), elements=finite))
def test_softmax_rows_are_distributions(x):
    with T.precision("float64"):
        p = T.softmax_lastaxis(Tensor(x)).data
    assert np.all(p >= 0) and np.all(p <= 1)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)


def test_softmax_stable_for_large_logits():
    p = T.softmax_lastaxis(Tensor([1000.0, 1000.0, 0.0])).data
    np.testing.assert_allclose(p, [0.5, 0.5, 0.0], atol=1e-12)


# -- layernorm --------------------------------------------------------------------

def test_layernorm_constant_row():
    one, zero = Tensor(np.ones(3)), Tensor(np.zeros(3))
    out = T.layernorm(Tensor([5.0, 5.0, 5.0]), one, zero, 1e-5).data
    np.testing.assert_array_equal(out, [0.0, 0.0, 0.0])


def test_layernorm_normalized_input():
    one, zero = Tensor(np.ones(2)), Tensor(np.zeros(2))
    out = T.layernorm(Tensor([1.0, -1.0]), one, zero, 1e-12).data
    np.testing.assert_allclose(out, [1.0, -1.0], rtol=1e-10)


def test_layernorm_gradcheck(rng):
    x, g, b = (Tensor(rng.uniform(-1, 1, 8)) for _ in range(3))
    obj = _proj(lambda: T.layernorm(x, g, b, 1e-5), rng, (8,))
    assert check_tensors(obj, [x, g, b], rng) <= 1e-6


# -- dropout --------------------------------------------------------------------

def test_dropout_identities(rng):
    x = Tensor(rng.normal(size=(4, 4)))
    assert T.dropout(x, 0.5, rng, training=False) is x
    assert T.dropout(x, 0.0, rng, training=True) is x


def test_dropout_kept_fraction():
    x = Tensor(np.ones(10_000))
    out = T.dropout(x, 0.5, np.random.default_rng(0), training=True).data
    kept = (out != 0).mean()
    assert abs(kept - 0.5) <= 0.02
    np.testing.assert_array_equal(np.unique(out), [0.0, 2.0])


@pytest.mark.parametrize("rate", [1.0, 1.5, -0.1])
def test_dropout_rejects_bad_rate(rate, rng):
    with pytest.raises(T.ConfigError):
        T.dropout(Tensor(np.ones(3)), rate, rng, training=True)


def test_dropout_mask_reproducible_from_stream():
    x = Tensor(np.ones((8, 8)))
    a = T.dropout(x, 0.3, np.random.default_rng(5), True).data
    b = T.dropout(x, 0.3, np.random.default_rng(5), True).data
    np.testing.assert_array_equal(a, b)


# -- cross entropy --------------------------------------------------------------------

def test_cross_entropy_uniform():
    loss = T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 3]).item()
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    assert loss == pytest.approx(1.3863, abs=1e-4)


def test_cross_entropy_decreases_with_margin():
    losses = [T.cross_entropy(Tensor([[m, 0.0, 0.0]]), [0]).item() for m in (0.0, 0.5, 1.0, 2.0, 4.0)]
    assert all(a > b for a, b in zip(losses, losses[1:]))


def test_cross_entropy_gradcheck(rng):
    z = Tensor(rng.uniform(-1, 1, (3, 5)))
    y = np.array([0, 4, 2])
    assert check_tensors(lambda: T.cross_entropy(z, y), [z], rng) <= 1e-6


def test_cross_entropy_bad_label_names_index():
    with pytest.raises(T.DataError, match="batch index 2"):
        T.cross_entropy(Tensor(np.zeros((3, 4))), [0, 1, 4])


# -- shape ops --------------------------------------------------------------------

def test_split_concat_round_trip(rng):
    x = Tensor(rng.normal(size=(4, 3, 5)))
    a, b = T.split_axis0(x, 2)
    assert a.shape == b.shape == (2, 3, 5)
    np.testing.assert_array_equal(T.concat_axis0([a, b]).data, x.data)


def test_permute_round_trip(rng):
    x = Tensor(rng.normal(size=(2, 3, 4)))
    y = x.permute(1, 0, 2)
    assert y.shape == (3, 2, 4)
    np.testing.assert_array_equal(y.permute(1, 0, 2).data, x.data)


@pytest.mark.parametrize("at", [0, 4, 5, -1])
def test_split_rejects_bad_point(at):
    with pytest.raises(T.DimensionError):
        T.split_axis0(Tensor(np.zeros((4, 2))), at)


def test_concat_gradient_routes_to_parts(rng):
    a = Tensor(rng.normal(size=(2, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(1, 3)), requires_grad=True)
    g = rng.normal(size=(3, 3))
    T.concat_axis0([a, b]).backward(g)
    np.testing.assert_array_equal(a.grad, g[:2])
    np.testing.assert_array_equal(b.grad, g[2:])
    assert check_tensors(_proj(lambda: T.concat_axis0([a, b]), rng, (3, 3)), [a, b], rng) <= 1e-6


def test_reshape_size_mismatch():
    with pytest.raises(T.DimensionError):
        T.reshape(Tensor(np.zeros(6)), (4, 2))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.permutations([0, 1, 2]))
def test_permute_inverse_is_identity(b, n, c, axes):
    x = Tensor(np.arange(b * n * c, dtype=np.float64).reshape(b, n, c))
    inv = list(np.argsort(axes))
    np.testing.assert_array_equal(T.permute_axes(T.permute_axes(x, axes), inv).data, x.data)


# -- tape, dtype, finiteness --------------------------------------------------------

def test_backward_accumulates_shared_inputs():
    x = Tensor([2.0], requires_grad=True)
    (x * x + x).sum().backward()
    np.testing.assert_array_equal(x.grad, [5.0])


def test_backward_populates_each_leaf_once_per_call():
    x = Tensor([1.0, 2.0], requires_grad=True)
    y = (x * 3.0).sum()
    y.backward()
    first = x.grad.copy()
    x.zero_grad()
    y.backward()
    np.testing.assert_array_equal(x.grad, first)


def test_broadcast_gradient_is_reduced(rng):
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4,)), requires_grad=True)
    (a + b).sum().backward()
    np.testing.assert_array_equal(b.grad, np.full(4, 3.0))


def test_non_finite_names_op():
    with pytest.raises(T.NonFiniteError, match="log"):
        T.log(Tensor([0.0]))
    with pytest.raises(T.NonFiniteError, match="exp"):
        T.exp(Tensor([1000.0]))


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_precision_modes():
    with T.precision("float32"):
        x = Tensor([1.0, 2.0])
        assert x.dtype == np.float32
        assert (x * 0.5).dtype == np.float32
    assert Tensor([1.0]).dtype == np.float64


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 4)), elements=finite))
def test_forward_deterministic(x):
    with T.precision("float64"):
        w = Tensor(np.linspace(-1, 1, x.shape[1] * 3).reshape(x.shape[1], 3))
        a = T.softmax_lastaxis(T.relu(Tensor(x) @ w)).data
        b = T.softmax_lastaxis(T.relu(Tensor(x) @ w)).data
    np.testing.assert_array_equal(a, b)


def test_ordered_sum_ignores_order(rng, f64):
    x = rng.normal(size=(4, 7)) * 10.0 ** rng.integers(-8, 8, size=(4, 7))
    perm = rng.permutation(7)
    a = T.ordered_sum(Tensor(x), axis=1).data
    np.testing.assert_array_equal(a, T.ordered_sum(Tensor(x[:, perm]), axis=1).data)
    assert np.all(np.abs(a - x.sum(axis=1)) <= 1e-14 * np.abs(x).sum(axis=1))
    t = Tensor(x, requires_grad=True)
    T.ordered_sum(t, axis=0, keepdims=True).sum().backward()
    np.testing.assert_array_equal(t.grad, np.ones_like(x))


def test_ordered_softmax(rng, f64):
    x = rng.normal(size=(3, 6))
    np.testing.assert_allclose(T.softmax_lastaxis(Tensor(x), ordered=True).data,
                               T.softmax_lastaxis(Tensor(x)).data, atol=1e-15)
