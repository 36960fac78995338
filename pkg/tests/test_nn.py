from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from paretodistill.nn import functional as F
from paretodistill.nn import (
    AdamState,
    Concat,
    Conv2d,
    Dense,
    DotProductScore,
    LayerSpec,
    MaskedTemperatureSoftmax,
    MultiHeadAttention,
    ReLU,
    SetMaxPool,
    adam_step,
    finite_diff_check,
)


# -- oracles ---------------------------------------------------------------------

def softmax_oracle(logits, mask, tau):
    """Scalar math-module evaluation."""
    support = [i for i, m in enumerate(mask) if m]
    top = max(logits[i] / tau for i in support)
    e = {i: math.exp(logits[i] / tau - top) for i in support}
    s = sum(e.values())
    return [e[i] / s if i in e else 0.0 for i in range(len(logits))]


def conv_oracle(x, k, b, stride, pad):
    """Loop-nest cross-correlation, no vectorisation."""
    n, c, h, w = x.shape
    co, _, kk, _ = k.shape
    xp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    ho = (h + 2 * pad - kk) // stride + 1
    wo = (w + 2 * pad - kk) // stride + 1
    y = np.zeros((n, co, ho, wo))
    for a in range(n):
        for o in range(co):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ci in range(c):
                        for u in range(kk):
                            for v in range(kk):
                                acc += xp[a, ci, i * stride + u, j * stride + v] * k[o, ci, u, v]
                    y[a, o, i, j] = acc + (b[o] if b is not None else 0.0)
    return y


def lstm_oracle(x, h, c, W, b):
    hid = len(h)
    z = list(x) + list(h)
    gates = [sum(z[r] * W[r][col] for r in range(len(z))) + b[col] for col in range(4 * hid)]
    sig = lambda v: 1.0 / (1.0 + math.exp(-v))  # noqa: E731
    c_new, h_new = [], []
    for j in range(hid):
        i_g = sig(gates[j])
        f_g = sig(gates[hid + j])
        g_g = math.tanh(gates[2 * hid + j])
        o_g = sig(gates[3 * hid + j])
        cj = f_g * c[j] + i_g * g_g
        c_new.append(cj)
        h_new.append(o_g * math.tanh(cj))
    return h_new, c_new


# -- masked softmax ----------------------------------------------------------------

def test_softmax_uniform():
    p = F.masked_temperature_softmax([0.0, 0.0, 0.0], [1, 1, 1], 1.0)
    np.testing.assert_allclose(p, [1 / 3] * 3, atol=1e-12)


def test_softmax_masked_example():
    p = F.masked_temperature_softmax([1.0, 2.0, 3.0], [1, 1, 0], 1.0)
    np.testing.assert_allclose(p, [0.26894, 0.73106, 0.0], atol=1e-5)
    assert p[2] == 0.0
    np.testing.assert_allclose(p, softmax_oracle([1, 2, 3], [1, 1, 0], 1.0), atol=1e-12)


def test_softmax_temperature_example():
    p = F.masked_temperature_softmax([2.0, 0.0], [1, 1], 4.0)
    np.testing.assert_allclose(p, [0.62246, 0.37754], atol=1e-5)


def test_softmax_errors():
    with pytest.raises(F.NoLegalActionError):
        F.masked_temperature_softmax([1.0, 2.0], [0, 0], 1.0)
    with pytest.raises(ValueError):
        F.masked_temperature_softmax([1.0, 2.0], [1, 1], 0.0)
    with pytest.raises(ValueError):
        F.masked_temperature_softmax([1.0, 2.0], [1, 1, 1], 1.0)


masked_logits = st.integers(2, 12).flatmap(
    lambda n: st.tuples(
        st.lists(st.floats(-30, 30), min_size=n, max_size=n),
        st.lists(st.booleans(), min_size=n, max_size=n).filter(any),
        st.floats(0.05, 50),
    )
)


@given(masked_logits)
def test_softmax_properties(case):
    logits, mask, tau = case
    p = F.masked_temperature_softmax(np.array(logits), np.array(mask), tau)
    assert abs(p.sum() - 1) <= 1e-6
    assert np.all(p[~np.array(mask)] == 0)
    assert np.all((p >= 0) & (p <= 1))
    np.testing.assert_allclose(p, softmax_oracle(logits, mask, tau), atol=1e-9)


@given(masked_logits, st.floats(-100, 100))
def test_softmax_shift_invariance(case, shift):
    logits, mask, tau = case
    z = np.array(logits)
    m = np.array(mask)
    p = F.masked_temperature_softmax(z, m, tau)
    q = F.masked_temperature_softmax(np.where(m, z + shift, z), m, tau)
    np.testing.assert_allclose(p, q, atol=1e-6)


def test_softmax_temperature_monotone():
    z = np.array([3.0, 1.0, 0.5, -1.0])
    m = np.array([1, 1, 0, 1])
    tops = [F.masked_temperature_softmax(z, m, t).max() for t in (0.5, 1, 4, 100)]
    assert all(a > b for a, b in zip(tops, tops[1:]))
    assert tops[-1] > 1 / 3


# -- KL ---------------------------------------------------------------------------

def test_kl_examples():
    assert F.kl_divergence([0.5, 0.5], [0.5, 0.5]) == 0.0
    assert F.kl_divergence([1.0, 0.0], [0.5, 0.5]) == pytest.approx(0.693147, abs=1e-6)
    assert F.kl_divergence([0.75, 0.25], [0.5, 0.5]) == pytest.approx(0.130812, abs=1e-6)
    assert F.kl_divergence([0.75, 0.25], [0.5, 0.5]) == pytest.approx(
        0.75 * math.log(1.5) + 0.25 * math.log(0.5), abs=1e-15)


def test_kl_infinite_error():
    with pytest.raises(F.DivergenceInfiniteError):
        F.kl_divergence([0.5, 0.5], [1.0, 0.0])


@given(masked_logits, st.lists(st.floats(-30, 30), min_size=12, max_size=12))
def test_kl_nonnegative_and_self_zero(case, other):
    logits, mask, tau = case
    m = np.array(mask)
    p = F.masked_temperature_softmax(np.array(logits), m, tau)
    q = F.masked_temperature_softmax(np.array(other[: len(logits)]), m, tau)
    assume(np.all(q[m] > 0))  # float underflow would break the shared-support precondition
    assert F.kl_divergence(p, p) == 0.0
    assert F.kl_divergence(p, q) >= 0.0


# -- dense / conv ----------------------------------------------------------------

def test_dense_examples():
    np.testing.assert_array_equal(F.dense_forward([3.0, 4.0], np.eye(2), np.zeros(2)), [3, 4])
    W = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(F.dense_forward([1.0, 1.0], W, np.ones(2)), [5, 7])
    b = np.array([0.5, -2.0])
    np.testing.assert_array_equal(F.dense_forward(np.zeros(2), W, b), b)
    with pytest.raises(ValueError):
        F.dense_forward(np.ones(3), W, b)


def test_conv_identity_kernel(rng):
    x = rng.normal(size=(3, 5, 5))
    k = np.zeros((3, 3, 1, 1))
    for i in range(3):
        k[i, i] = 1.0
    np.testing.assert_array_equal(F.conv2d_forward(x, k), x)


def test_conv_constant_interior():
    x = np.full((1, 6, 6), 2.5)
    y = F.conv2d_forward(x, np.ones((1, 1, 3, 3)))
    np.testing.assert_array_equal(y, np.full((1, 4, 4), 9 * 2.5))


def test_conv_impulse_cross_correlation(rng):
    x = np.zeros((1, 7, 7))
    x[0, 3, 3] = 1.0
    k = rng.normal(size=(1, 1, 3, 3))
    y = F.conv2d_forward(x, k, padding=1)
    # cross-correlation: output around the impulse is the kernel flipped in both axes
    np.testing.assert_array_equal(y[0, 2:5, 2:5], k[0, 0, ::-1, ::-1])
    np.testing.assert_array_equal(y, conv_oracle(x[None], k, None, 1, 1)[0])


def test_conv_non_integral_extent():
    with pytest.raises(ValueError):
        F.conv2d_forward(np.zeros((1, 6, 6)), np.zeros((1, 1, 3, 3)), stride=2)


@pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 3), (1, 2, 5)])
def test_conv_matches_loop_nest_bitwise(rng, stride, pad, k):
    # integer-valued operands make every float64 sum exact, so order cannot matter
    x = rng.integers(-4, 5, size=(2, 3, 7, 7)).astype(np.float64)
    kern = rng.integers(-3, 4, size=(4, 3, k, k)).astype(np.float64)
    b = rng.integers(-2, 3, size=4).astype(np.float64)
    np.testing.assert_array_equal(F.conv2d_forward(x, kern, b, stride, pad),
                                  conv_oracle(x, kern, b, stride, pad))


def test_conv_matches_loop_nest_real(rng):
    x = rng.normal(size=(2, 2, 9, 9))
    kern = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    np.testing.assert_allclose(F.conv2d_forward(x, kern, b, 2, 1), conv_oracle(x, kern, b, 2, 1),
                               rtol=0, atol=1e-12)


# -- LSTM / attention -----------------------------------------------------------

def test_lstm_zero_params():
    h, c = F.lstm_cell_forward(np.ones(3), np.zeros(2), np.zeros(2), np.zeros((5, 8)), np.zeros(8))
    assert np.all(h == 0) and np.all(c == 0)


def test_lstm_forget_bias_example():
    b = np.zeros(4)
    b[1] = 10.0
    h, c = F.lstm_cell_forward(np.zeros(1), np.zeros(1), np.ones(1), np.zeros((2, 4)), b)
    assert c[0] == pytest.approx(1 / (1 + math.exp(-10)), abs=1e-12)
    assert c[0] == pytest.approx(0.99995, abs=1e-5)
    assert h[0] == pytest.approx(0.5 * math.tanh(c[0]), abs=1e-12)
    assert h[0] == pytest.approx(0.38078, abs=1e-5)


def test_lstm_random_matches_scalar_oracle(rng):
    x, h, c = rng.normal(size=3), rng.normal(size=4), rng.normal(size=4)
    W, b = rng.normal(size=(7, 16)) * 0.5, rng.normal(size=16) * 0.5
    h1, c1 = F.lstm_cell_forward(x, h, c, W, b)
    h2, c2 = lstm_oracle(x, h, c, W.tolist(), b.tolist())
    np.testing.assert_allclose(h1, h2, atol=1e-6)
    np.testing.assert_allclose(c1, c2, atol=1e-6)


def _mha(rng, d=8, heads=2):
    return MultiHeadAttention(d, heads, rng, dtype=np.float64)


def test_mha_single_token(rng):
    layer = _mha(rng)
    for key in ("bq", "bk", "bv", "bo"):
        layer.params[key] = rng.normal(size=8)
    tok = rng.normal(size=(1, 8))
    p = layer.params
    expected = (tok @ p["Wv"] + p["bv"]) @ p["Wo"] + p["bo"]
    np.testing.assert_allclose(layer.forward(tok), expected, atol=1e-12)


def test_mha_identical_tokens(rng):
    out = _mha(rng).forward(np.tile(rng.normal(size=8), (5, 1)))
    np.testing.assert_allclose(out, np.tile(out[0], (5, 1)), atol=1e-12)


def test_mha_permutation_equivariant(rng):
    layer = _mha(rng)
    tok = rng.normal(size=(6, 8))
    perm = rng.permutation(6)
    np.testing.assert_allclose(layer.forward(tok)[perm], layer.forward(tok[perm]), atol=1e-12)


def test_mha_bad_heads(rng):
    with pytest.raises(ValueError):
        MultiHeadAttention(10, 4, rng)


# -- set max pool ---------------------------------------------------------------

def test_set_max_pool_examples():
    np.testing.assert_array_equal(F.set_max_pool([[1.0, 2.0]]), [1, 2])
    np.testing.assert_array_equal(F.set_max_pool([[1, 5], [3, 2], [2, 2]]), [3, 5])
    v = np.array([[2.0, 2.0]] * 3)
    np.testing.assert_array_equal(F.set_max_pool(v), [2, 2])
    g = F.set_max_pool_backward(v, np.array([1.0, 1.0]))
    np.testing.assert_array_equal(g, [[1, 1], [0, 0], [0, 0]])
    with pytest.raises(ValueError):
        F.set_max_pool(np.zeros((0, 3)))


# -- Adam -------------------------------------------------------------------------

def test_adam_zero_gradient():
    p = [np.array([1.0, -2.0])]
    state = AdamState.for_params(p)
    state.m[0][:] = [0.1, 0.2]
    state.v[0][:] = [0.01, 0.04]
    adam_step(p, [np.zeros(2)], state)
    # moments decay; a non-zero m still moves the parameter
    np.testing.assert_allclose(state.m[0], [0.09, 0.18])
    np.testing.assert_allclose(state.v[0], [0.01 * 0.999, 0.04 * 0.999])
    fresh = [np.array([1.0, -2.0])]
    adam_step(fresh, [np.zeros(2)], AdamState.for_params(fresh))
    np.testing.assert_array_equal(fresh[0], [1.0, -2.0])


def test_adam_first_step():
    p = [np.array([0.0])]
    state = AdamState.for_params(p, lr=2e-4)
    adam_step(p, [np.array([1.0])], state)
    assert p[0][0] == pytest.approx(-2e-4 / (1 + 1e-8), rel=1e-12)
    assert state.step == 1


def test_adam_constant_gradient_steps():
    p = [np.array([0.0])]
    state = AdamState.for_params(p, lr=1e-3)
    adam_step(p, [np.array([0.5])], state)
    first = p[0][0]
    adam_step(p, [np.array([0.5])], state)
    assert first == pytest.approx(-1e-3, rel=1e-6)
    assert p[0][0] - first == pytest.approx(-1e-3, rel=1e-6)


def test_adam_shape_mismatch():
    p = [np.zeros(2)]
    with pytest.raises(ValueError):
        adam_step(p, [np.zeros(3)], AdamState.for_params(p))


# -- finite differences -----------------------------------------------------------

def test_fd_linear():
    a = np.array([1.5, -2.0, 3.0])
    err = finite_diff_check(lambda t: float(a @ t), np.zeros(3), a)
    assert err < 1e-9


def test_fd_cubic():
    theta = np.array([1.0])
    err = finite_diff_check(lambda t: float(t[0] ** 3), theta, np.array([3.0]), h=1e-3)
    assert err == pytest.approx(1e-6 / 3, rel=1e-3)


def test_fd_detects_scaled_gradient():
    a = np.array([1.0, 2.0])
    err = finite_diff_check(lambda t: float(a @ t), np.zeros(2), a * 1.01)
    assert err == pytest.approx(0.01 / 1.01, rel=1e-4)


def test_fd_non_finite():
    with pytest.raises(FloatingPointError):
        finite_diff_check(lambda t: float("nan"), np.zeros(1), np.zeros(1))


# -- layer gradients (float64) -----------------------------------------------------

def _check_layer(forward, backward, rng, tol=1e-4):
    """Finite-difference check of d<w, f(x)>/dx for each input and parameter array."""
    out = forward()
    w = rng.normal(size=np.shape(out))
    analytic = backward(w)
    for arr, grad in analytic:
        err = finite_diff_check(lambda _: float(np.sum(w * forward())), arr, grad, h=1e-6)
        assert err <= tol


def test_grad_dense(rng):
    layer = Dense(4, 3, rng, dtype=np.float64)
    layer.params["b"] = rng.normal(size=3)
    x = rng.normal(size=(5, 4))

    def backward(w):
        layer.forward(x)
        layer.zero_grad()
        dx = layer.backward(w)
        return [(x, dx), (layer.params["W"], layer.grads["W"]), (layer.params["b"], layer.grads["b"])]

    _check_layer(lambda: layer.forward(x), backward, rng)


@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 1), (1, 0)])
def test_grad_conv(rng, stride, pad):
    layer = Conv2d(2, 3, 3, stride, pad, rng, dtype=np.float64)
    layer.params["b"] = rng.normal(size=3)
    x = rng.normal(size=(2, 2, 5, 5))

    def backward(w):
        layer.forward(x)
        layer.zero_grad()
        dx = layer.backward(w)
        return [(x, dx), (layer.params["W"], layer.grads["W"]), (layer.params["b"], layer.grads["b"])]

    _check_layer(lambda: layer.forward(x), backward, rng)


def test_grad_relu(rng):
    layer = ReLU()
    x = rng.normal(size=(4, 6))
    x[np.abs(x) < 1e-3] = 0.5  # stay away from the kink
    _check_layer(lambda: layer.forward(x),
                 lambda w: (layer.forward(x), [(x, layer.backward(w))])[1], rng)


def test_grad_masked_softmax(rng):
    layer = MaskedTemperatureSoftmax(tau=2.5)
    z = rng.normal(size=(3, 7))
    mask = rng.random((3, 7)) < 0.6
    mask[:, 0] = True
    _check_layer(lambda: layer.forward(z, mask),
                 lambda w: (layer.forward(z, mask), [(z, layer.backward(w))])[1], rng)


def test_grad_set_max_pool(rng):
    layer = SetMaxPool(axis=1)
    x = rng.normal(size=(2, 3, 5))
    _check_layer(lambda: layer.forward(x),
                 lambda w: (layer.forward(x), [(x, layer.backward(w))])[1], rng)


def test_grad_concat(rng):
    layer = Concat(axis=-1)
    a, b = rng.normal(size=(3, 2)), rng.normal(size=(3, 4))

    def backward(w):
        layer.forward([a, b])
        da, db = layer.backward(w)
        return [(a, da), (b, db)]

    _check_layer(lambda: layer.forward([a, b]), backward, rng)


def test_grad_dot_product(rng):
    layer = DotProductScore()
    q, k = rng.normal(size=(4, 3)), rng.normal(size=(4, 6, 3))

    def backward(w):
        layer.forward(q, k)
        dq, dk = layer.backward(w)
        return [(q, dq), (k, dk)]

    _check_layer(lambda: layer.forward(q, k), backward, rng)


def test_forward_only_kinds(rng):
    assert not LayerSpec("x", "lstm-cell").differentiable
    assert not LayerSpec("x", "multi-head-attention").differentiable
    assert LayerSpec("x", "dense").differentiable
    with pytest.raises(NotImplementedError):
        MultiHeadAttention(8, 2, rng).backward(np.zeros((1, 8)))


def test_layer_spec_validation():
    with pytest.raises(ValueError):
        LayerSpec("x", "dense", {"in": 0, "out": 3})
    with pytest.raises(ValueError):
        LayerSpec("x", "conv2d", {"cin": 1, "cout": 1, "kernel": 4, "padding": 2, "same": 1})
    with pytest.raises(ValueError):
        LayerSpec("x", "pooling")


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_glorot_init_bounds(n_in, n_out, batch, seed):
    layer = Dense(n_in, n_out, np.random.default_rng(seed))
    bound = math.sqrt(6 / (n_in + n_out))
    assert np.all(np.abs(layer.params["W"]) <= bound)
    assert np.all(layer.params["b"] == 0)
