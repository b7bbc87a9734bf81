import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import gelu_scalar, gradcheck, triple_loop_matmul
from stimswin.tensor import (
    Rng,
    Tensor,
    concat,
    finite_diff_grad,
    gelu,
    layer_norm,
    linear,
    log_softmax_lastdim,
    make_tensor,
    matmul,
    max_relative_error,
    no_grad,
    roll,
    softmax_lastdim,
)


def t64(a, grad=False):
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=grad)


# -- construction ----------------------------------------------------------------

def test_make_tensor_fills():
    assert np.array_equal(make_tensor((2, 2)).data, np.zeros((2, 2)))
    assert np.array_equal(make_tensor((3,), "constant", value=1).data, np.ones(3))


def test_uniform_fill_deterministic():
    a = make_tensor((4,), "uniform", rng=Rng(7))
    b = make_tensor((4,), "uniform", rng=Rng(7))
    assert np.array_equal(a.data, b.data)
    assert ((a.data >= 0) & (a.data < 1)).all()


def test_truncated_normal_bounds():
    x = make_tensor((2000,), "truncated_normal", std=0.02, rng=Rng(3), dtype="f64").data
    assert np.abs(x).max() <= 0.04
    assert abs(x.std() - 0.0176) < 0.002  # std of N(0,1) truncated at 2 sigma is 0.8796


@pytest.mark.parametrize("shape", [(0,), (2, 0), (-1, 3), ()])
def test_make_tensor_rejects_bad_shape(shape):
    with pytest.raises(ValueError):
        make_tensor(shape)


def test_rng_substreams_independent_and_stable():
    r = Rng(5)
    a = r.split("init").normal(4)
    b = r.split("augment").normal(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, Rng(5).split("init").normal(4))
    # splitting does not advance the parent
    assert np.array_equal(Rng(5).normal(3), r.normal(3))


# -- matmul / linear -----------------------------------------------------------------

def test_matmul_small_cases():
    assert np.array_equal(matmul(t64(np.eye(2)), t64([[5, 6], [7, 8]])).data, [[5, 6], [7, 8]])
    assert np.array_equal(matmul(t64([[1, 2], [3, 4]]), t64([[1], [1]])).data, [[3], [7]])


def test_matmul_vs_triple_loop():
    g = np.random.default_rng(11)
    a, b = g.standard_normal((3, 4)), g.standard_normal((4, 2))
    np.testing.assert_allclose(matmul(t64(a), t64(b)).data, triple_loop_matmul(a, b), rtol=1e-13, atol=1e-13)


def test_matmul_broadcasts_batch():
    g = np.random.default_rng(2)
    a, b = g.standard_normal((3, 1, 2, 4)), g.standard_normal((5, 4, 3))
    assert matmul(t64(a), t64(b)).shape == (3, 5, 2, 3)


def test_matmul_inner_mismatch():
    with pytest.raises(ValueError, match="inner"):
        matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))


def test_linear_cases():
    assert np.array_equal(linear(t64([1, 0]), t64(np.eye(2)), t64([0, 0])).data, [1, 0])
    assert np.array_equal(linear(t64([1, 1]), t64([[2], [3]]), t64([1])).data, [6])


def test_linear_vs_rowwise_loop(randn):
    x, w, b = randn(5, 3), randn(3, 4), randn(4)
    out = linear(x, w, b).data
    for i in range(5):
        np.testing.assert_allclose(out[i], x.data[i] @ w.data + b.data, rtol=1e-14)


def test_linear_shape_errors(randn):
    with pytest.raises(ValueError):
        linear(randn(2, 3), randn(4, 2))
    with pytest.raises(ValueError):
        linear(randn(2, 3), randn(3, 2), randn(3))


# -- nonlinearities ------------------------------------------------------------------------

@pytest.mark.parametrize("x, want", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([math.log(1), math.log(3)], [0.25, 0.75]),
    ([1000.0, 1000.0], [0.5, 0.5]),
])
def test_softmax_values(x, want):
    np.testing.assert_allclose(softmax_lastdim(t64(x)).data, want, atol=1e-15)


def test_softmax_rows(randn):
    p = softmax_lastdim(randn(6, 9, scale=5.0)).data
    np.testing.assert_allclose(p.sum(-1), 1.0, atol=1e-6)
    assert ((p > 0) & (p < 1)).all()


def test_log_softmax_matches_log_of_softmax(randn):
    x = randn(4, 7)
    np.testing.assert_allclose(log_softmax_lastdim(x).data, np.log(softmax_lastdim(x).data), atol=1e-12)


def test_layer_norm_examples():
    one, zero = t64(np.ones(3)), t64(np.zeros(3))
    assert np.array_equal(layer_norm(t64([5, 5, 5]), one, zero).data, np.zeros(3))
    out = layer_norm(t64([1, -1]), t64([1, 1]), t64([0, 0]), eps=1e-12).data
    np.testing.assert_allclose(out, [1, -1], atol=1e-9)


def test_layer_norm_moments(randn):
    x = randn(7, 32, scale=3.0)
    y = layer_norm(x, t64(np.ones(32)), t64(np.zeros(32))).data
    np.testing.assert_allclose(y.mean(-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(y.var(-1), x.data.var(-1) / (x.data.var(-1) + 1e-5), rtol=1e-12)


def test_layer_norm_shape_mismatch(randn):
    with pytest.raises(ValueError):
        layer_norm(randn(2, 4), randn(3), randn(3))


def test_gelu_values():
    assert gelu(t64([0.0])).data[0] == 0.0
    big = gelu(t64([30.0, -30.0])).data
    assert big[0] == pytest.approx(30.0) and abs(big[1]) < 1e-12
    assert gelu(t64([1.0])).data[0] == pytest.approx(gelu_scalar(1.0), abs=1e-15)


# -- data movement ----------------------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(-7, 7), st.integers(0, 2), st.integers(0, 1000))
def test_roll_roundtrip(offset, axis, seed):
    x = t64(np.random.default_rng(seed).standard_normal((3, 4, 5)))
    back = roll(roll(x, offset, axis), -offset, axis)
    assert np.array_equal(back.data, x.data)


def test_reshape_permute_roundtrip(randn):
    x = randn(2, 3)
    assert np.array_equal(x.reshape(3, 2).reshape(2, 3).data, x.data)
    y = randn(2, 3, 4)
    assert np.array_equal(y.permute(2, 0, 1).permute(1, 2, 0).data, y.data)


def test_movement_errors(randn):
    with pytest.raises(ValueError):
        randn(2, 3).reshape(4, 2)
    with pytest.raises(IndexError):
        randn(2, 3).permute(0, 2)
    with pytest.raises(IndexError):
        randn(2, 3).mean(axis=5)


def test_mean_of_ones():
    assert np.array_equal(t64(np.ones((3, 4))).mean(axis=1).data, np.ones(3))


def test_slice_and_concat_gradients(randn):
    x = randn(4, 3)
    assert gradcheck(lambda t: (t[1:3] * t[1:3]).sum() + concat([t, t * 2.0], axis=1).sum(), x) < 1e-8


# -- autodiff ---------------------------------------------------------------------------------

def test_backward_sum_and_square():
    x = t64([1.0, 2.0], grad=True)
    x.sum().backward()
    assert np.array_equal(x.grad, [1, 1])
    y = t64([1.0, 2.0], grad=True)
    (y * y).sum().backward()
    assert np.array_equal(y.grad, [2, 4])


def test_gradients_accumulate():
    x = t64([3.0], grad=True)
    (x * 2.0).sum().backward()
    (x * 5.0).sum().backward()
    assert x.grad[0] == 7.0


def test_backward_twice_raises():
    x = t64([1.0, 2.0], grad=True)
    loss = (x * x).sum()
    loss.backward()
    with pytest.raises(RuntimeError, match="consumed"):
        loss.backward()


def test_backward_needs_scalar(randn):
    with pytest.raises(ValueError):
        (randn(3) * 2.0).backward()


def test_no_grad_records_nothing(randn):
    x = randn(3)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_overflow_surfaces():
    with pytest.raises(FloatingPointError):
        t64([1000.0]).exp()
    with pytest.raises(FloatingPointError):
        t64([1e200]) * t64([1e200])


@pytest.mark.parametrize("name, fn", [
    ("softmax", lambda t: (softmax_lastdim(t) * np.arange(t.shape[-1])).sum()),
    ("log_softmax", lambda t: (log_softmax_lastdim(t) * np.arange(t.shape[-1])).sum()),
    ("gelu", lambda t: (gelu(t) * gelu(t)).sum()),
    ("layer_norm", lambda t: (layer_norm(t, t64(np.linspace(0.5, 2, 5)), t64(np.zeros(5))) ** 3).sum()),
    ("div_sqrt_log", lambda t: ((t * t + 1.0).sqrt().log() / (t * t + 2.0)).sum()),
    ("tanh_mean", lambda t: t.tanh().mean(axis=0).sum()),
])
@pytest.mark.parametrize("seed", range(3))
def test_gradcheck_f64(name, fn, seed):
    x = Tensor(np.random.default_rng(seed).standard_normal((3, 5)), requires_grad=True, dtype=np.float64)
    assert gradcheck(fn, x) <= 1e-5, name


def test_gradcheck_f32_linear():
    g = np.random.default_rng(0)
    w = Tensor(g.standard_normal((5, 3)), requires_grad=True, dtype=np.float32)
    x = Tensor(g.standard_normal((4, 5)), dtype=np.float32)
    assert gradcheck(lambda p: (linear(x, p) ** 2).sum(), w, h=1e-2) <= 1e-3


def test_finite_diff_examples():
    x = t64(np.random.default_rng(0).standard_normal(6))
    np.testing.assert_allclose(finite_diff_grad(lambda t: t.sum(), x), 1.0, atol=1e-9)
    g = finite_diff_grad(lambda t: (t * t).sum(), t64([3.0]), h=1e-4)
    assert abs(g[0] - 6.0) < 1e-6


def test_finite_diff_subset_marks_rest_nan():
    g = finite_diff_grad(lambda t: t.sum(), t64(np.zeros(4)), indices=[1])
    assert g[1] == pytest.approx(1.0) and np.isnan(g[[0, 2, 3]]).all()


def test_max_relative_error_ignores_nan():
    assert max_relative_error([1.0, 5.0], [1.1, np.nan]) == pytest.approx(0.1 / 1.1)
