import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from mscnmt import autograd as ag
from mscnmt.autograd import Switch, Tensor

from conftest import numeric_grad


def leaf(x):
    return Tensor(np.array(x, dtype=float), requires_grad=True)


def test_add_mul_scalar_grads():
    a, b = leaf(3.0), leaf(-2.0)
    (a * b + a).backward()
    assert a.grad == pytest.approx(-2.0 + 1.0)
    assert b.grad == pytest.approx(3.0)


def test_grads_accumulate_until_zeroed():
    a = leaf([1.0, 2.0])
    ag.tsum(a * a).backward()
    ag.tsum(a * a).backward()
    np.testing.assert_allclose(a.grad, 4 * a.data)
    ag.zero_grad([a])
    assert a.grad is None


def test_broadcast_grad_is_summed_back():
    a = leaf(np.ones((3, 4)))
    b = leaf(np.arange(4.0))
    ag.tsum(a * b).backward()
    np.testing.assert_allclose(b.grad, np.full(4, 3.0))
    np.testing.assert_allclose(a.grad, np.broadcast_to(np.arange(4.0), (3, 4)))


def test_shared_subexpression_accumulates():
    # y = x*x used twice: d/dx (y + y) = 4x
    x = leaf(1.5)
    y = x * x
    (y + y).backward()
    assert x.grad == pytest.approx(6.0)


def test_intermediate_grad_needs_retain():
    x = leaf([1.0, -1.0])
    h = ag.scale(x, 3.0)
    k = ag.scale(x, 3.0).retain_grad()
    ag.tsum(h * h + k).backward()
    assert h.grad is None
    np.testing.assert_allclose(k.grad, [1.0, 1.0])


def test_no_grad_records_nothing():
    x = leaf([1.0])
    with ag.no_grad():
        y = x * x
    assert not y.requires_grad
    with pytest.raises(ValueError):
        y.backward()


def test_backward_needs_scalar():
    with pytest.raises(ValueError, match="scalar"):
        (leaf([1.0, 2.0]) * 2.0).backward()


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 5\)"):
        ag.matmul(leaf(np.ones((2, 3))), leaf(np.ones((4, 5))))


def test_take_rows_out_of_range_names_position():
    with pytest.raises(IndexError, match="position"):
        ag.take_rows(leaf(np.ones((3, 2))), np.array([[0, 5]]))


def test_take_rows_repeated_ids_accumulate():
    t = leaf(np.zeros((4, 2)))
    ag.tsum(ag.take_rows(t, np.array([1, 1, 3]))).backward()
    np.testing.assert_allclose(t.grad[:, 0], [0, 2, 0, 1])


def test_path_switch_forward_identity_and_gradient_stop():
    sw = Switch(True)
    x = leaf([2.0, 3.0])
    y = ag.path_switch(x, sw)
    np.testing.assert_array_equal(y.data, x.data)
    ag.tsum(y * y).backward()
    np.testing.assert_allclose(x.grad, [4.0, 6.0])
    x.grad = None
    sw.open = False
    ag.tsum(ag.path_switch(x, sw) * 1.0 + x).backward()
    np.testing.assert_allclose(x.grad, [1.0, 1.0])


def test_softmax_rows_sum_to_one_and_masked_rows_are_zero():
    x = leaf(np.random.default_rng(0).normal(size=(2, 3, 4)))
    mask = np.array([[True, False, True, True], [False, False, False, False], [True, True, True, True]])
    y = ag.softmax(x, mask=mask)
    np.testing.assert_allclose(y.data[:, 0].sum(-1), 1.0)
    assert np.all(y.data[:, 0, 1] == 0)
    assert np.all(y.data[:, 1] == 0)


def test_softmax_matches_scipy_reference():
    from scipy.special import softmax as sp_softmax
    x = np.random.default_rng(1).normal(size=(3, 5))
    np.testing.assert_allclose(ag.softmax(Tensor(x)).data, sp_softmax(x, axis=-1), atol=1e-15)
    np.testing.assert_allclose(ag.log_softmax(Tensor(x)).data, np.log(sp_softmax(x, axis=-1)), atol=1e-14)


def test_layer_norm_matches_numpy_oracle():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 6))
    g, b = rng.normal(size=6), rng.normal(size=6)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-6) * g + b
    np.testing.assert_allclose(ag.layer_norm(Tensor(x), Tensor(g), Tensor(b)).data, ref, atol=1e-12)


def test_dropout_identity_without_rng_and_inverted_scaling():
    x = leaf(np.ones((200, 50)))
    assert ag.dropout(x, 0.5, None) is x
    y = ag.dropout(x, 0.5, np.random.default_rng(0))
    assert set(np.unique(y.data)) <= {0.0, 2.0}
    assert abs(y.data.mean() - 1.0) < 0.05


def test_elementwise_dispatch():
    x = leaf([-1.0, 0.5])
    np.testing.assert_allclose(ag.elementwise("relu", x).data, [0.0, 0.5])
    with pytest.raises(ValueError, match="unknown"):
        ag.elementwise("gelu", x)


def test_linear_grad_matches_finite_difference():
    rng = np.random.default_rng(3)
    x, w, b = (leaf(rng.normal(size=s)) for s in [(2, 3, 4), (4, 5), (5,)])
    r = rng.normal(size=(2, 3, 5))
    ag.tsum(ag.linear(x, w, b) * Tensor(r)).backward()
    f = lambda: float(np.sum((x.data @ w.data + b.data) * r))  # noqa: E731
    for t in (x, w, b):
        np.testing.assert_allclose(t.grad, numeric_grad(f, t.data), rtol=1e-6, atol=1e-8)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-3, 3)))
def test_unbroadcast_inverts_broadcast_sum(arr):
    target = (1,) * arr.ndim
    out = ag.unbroadcast(arr, target)
    assert out.shape == target
    assert out.item() == pytest.approx(arr.sum())


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)), elements=st.floats(-5, 5)))
def test_log_softmax_gradient_property(x):
    # d/dx sum(w * log_softmax(x)) = w - softmax(x) * sum(w)
    t = leaf(x.copy())
    w = np.arange(x.size, dtype=float).reshape(x.shape) / x.size
    ag.tsum(ag.log_softmax(t) * Tensor(w)).backward()
    p = np.exp(x - x.max(-1, keepdims=True))
    p /= p.sum(-1, keepdims=True)
    np.testing.assert_allclose(t.grad, w - p * w.sum(-1, keepdims=True), atol=1e-12)


def test_tape_ids_are_monotone():
    a = leaf(1.0)
    b = a * 2.0
    c = b + a
    assert a.tape_id < b.tape_id < c.tape_id
