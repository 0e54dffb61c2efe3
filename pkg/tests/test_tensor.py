import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cqd import tensor as T
from cqd.errors import BackwardStateError, ContractError, NumericDomainError
from cqd.optim import SgdState, clip_grad_norm, lr_at, sgd_step
from helpers import gradcheck, simplex


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

def softmax_oracle(z):
    mpmath.mp.dps = 40
    e = [mpmath.exp(mpmath.mpf(v)) for v in z]
    s = sum(e)
    return [float(v / s) for v in e]


def ce_oracle(p, q):
    mpmath.mp.dps = 40
    return float(-sum(mpmath.mpf(qi) * mpmath.log(mpmath.mpf(pi)) for pi, qi in zip(p, q)))


def conv_loop(x, w, stride, pad):
    """Naive NCHW cross-correlation."""
    B, C, H, W = x.shape
    F, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((B, F, Ho, Wo))
    for b in range(B):
        for f in range(F):
            for i in range(Ho):
                for j in range(Wo):
                    s = 0.0
                    for c in range(C):
                        for u in range(k):
                            for v in range(k):
                                s += xp[b, c, i * stride + u, j * stride + v] * w[f, c, u, v]
                    out[b, f, i, j] = s
    return out


def maxpool_loop(x, k):
    B, C, H, W = x.shape
    out = np.zeros((B, C, H // k, W // k))
    for b in range(B):
        for c in range(C):
            for i in range(H // k):
                for j in range(W // k):
                    out[b, c, i, j] = x[b, c, i * k:(i + 1) * k, j * k:(j + 1) * k].max()
    return out


# ---------------------------------------------------------------------------
# softmax
# ---------------------------------------------------------------------------

def test_softmax_uniform():
    p = T.softmax(T.Tensor(np.zeros((1, 3)))).data
    np.testing.assert_allclose(p, [[1 / 3] * 3], atol=1e-7)


def test_softmax_large_logits_do_not_overflow():
    p = T.softmax(T.Tensor(np.array([[1000.0, 0.0]], np.float32))).data
    assert np.isfinite(p).all()
    np.testing.assert_allclose(p, [[1.0, 0.0]], atol=1e-6)


def test_softmax_matches_extended_precision():
    p = T.softmax(T.Tensor(np.array([[1.0, 2.0, 3.0]]))).data[0]
    np.testing.assert_allclose(p, softmax_oracle([1, 2, 3]), atol=1e-12)
    np.testing.assert_allclose(p, [0.09003, 0.24473, 0.66524], atol=1e-4)


def test_softmax_rejects_non_finite():
    with pytest.raises(NumericDomainError):
        T.softmax(T.Tensor(np.array([[np.nan, 0.0]])))
    with pytest.raises(NumericDomainError):
        T.log_softmax(T.Tensor(np.array([[np.inf, 0.0]])))


def test_softmax_needs_two_classes():
    with pytest.raises(ContractError):
        T.softmax(T.Tensor(np.zeros((2, 1))))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 6)),
              elements=st.floats(-1e4, 1e4)))
def test_softmax_rows_sum_to_one(z):
    p = T.softmax(T.Tensor(z)).data
    assert (p >= 0).all()
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_log_softmax_is_log_of_softmax(z):
    np.testing.assert_allclose(T.log_softmax(T.Tensor(z)).data,
                               np.log(T.softmax(T.Tensor(z)).data), atol=1e-9)


# ---------------------------------------------------------------------------
# cross-entropy
# ---------------------------------------------------------------------------

def test_ce_one_hot_match_is_zero():
    q = T.one_hot([2], 4)
    assert float(T.cross_entropy(T.Tensor(q), q).data) == 0.0


def test_ce_half_half_is_ln2():
    v = float(T.cross_entropy(T.Tensor(np.array([[0.5, 0.5]])), np.array([[1.0, 0.0]])).data)
    assert abs(v - math.log(2)) < 1e-4


def test_ce_matches_extended_precision_oracle():
    # -(0.6 ln 0.7 + 0.4 ln 0.3)
    v = float(T.cross_entropy(T.Tensor(np.array([[0.7, 0.3]])), np.array([[0.6, 0.4]])).data)
    expected = ce_oracle([0.7, 0.3], [0.6, 0.4])
    assert abs(v - expected) < 1e-12
    assert abs(v - 0.695628) < 1e-3


def test_ce_shape_mismatch():
    with pytest.raises(ContractError):
        T.cross_entropy(T.Tensor(np.full((1, 3), 1 / 3)), np.full((1, 2), 0.5))


def test_ce_clamps_zero_probabilities():
    v = float(T.cross_entropy(T.Tensor(np.array([[1.0, 0.0]])), np.array([[0.0, 1.0]])).data)
    assert v == pytest.approx(-math.log(T.PROB_EPS))


def test_ce_zero_only_for_matching_one_hot():
    q = np.array([[0.5, 0.5]])
    assert float(T.cross_entropy(T.Tensor(q), q).data) > 0


@settings(max_examples=80, deadline=None)
@given(st.integers(2, 6), st.integers(0, 2**31 - 1))
def test_gibbs_inequality(k, seed):
    rng = np.random.default_rng(seed)
    p, q = simplex(rng, (3, k)), simplex(rng, (3, k))
    assert float(T.cross_entropy(T.Tensor(p), q).data) >= float(T.cross_entropy(T.Tensor(q), q).data) - 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_logit_form_agrees_with_probability_form(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(0, 3, (4, 5))
    q = simplex(rng, (4, 5))
    a = float(T.cross_entropy_logits(T.Tensor(z), q).data)
    b = float(T.cross_entropy(T.softmax(T.Tensor(z)), q).data)
    assert a == pytest.approx(b, abs=1e-10)


# ---------------------------------------------------------------------------
# conv / pool / linear / relu against loop oracles
# ---------------------------------------------------------------------------

def test_conv_ones():
    y = T.conv2d(T.Tensor(np.ones((1, 1, 3, 3))), T.Tensor(np.ones((1, 1, 2, 2)))).data
    np.testing.assert_array_equal(y, np.full((1, 1, 2, 2), 4.0))


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.random((2, 3, 5, 5)).astype(np.float32)
    w = np.zeros((3, 3, 3, 3), np.float32)
    for c in range(3):
        w[c, c, 1, 1] = 1.0
    np.testing.assert_array_equal(T.conv2d(T.Tensor(x), T.Tensor(w), pad=1).data, x)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 0), (2, 1), (3, 2)])
def test_conv_matches_loop_oracle(stride, pad):
    rng = np.random.default_rng(stride * 10 + pad)
    x = rng.standard_normal((1, 2, 4, 4))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    y = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, pad=pad).data
    np.testing.assert_allclose(y, conv_loop(x, w, stride, pad) + b[None, :, None, None], atol=1e-12)


def test_conv_output_size_formula():
    for H, k, s, p in [(64, 4, 2, 1), (7, 3, 2, 0), (5, 5, 1, 0), (9, 3, 3, 1)]:
        y = T.conv2d(T.Tensor(np.zeros((1, 1, H, H))), T.Tensor(np.zeros((1, 1, k, k))), stride=s, pad=p)
        assert y.shape[2] == (H + 2 * p - k) // s + 1 == T.conv_output_size(H, k, s, p)


def test_conv_dimension_mismatch():
    with pytest.raises(ContractError):
        T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))))
    with pytest.raises(ContractError):
        T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 3, 3))))
    with pytest.raises(ContractError):
        T.conv2d(T.Tensor(np.zeros((1, 4, 4))), T.Tensor(np.zeros((1, 1, 3, 3))))


def test_maxpool_matches_loop_oracle():
    x = np.random.default_rng(1).standard_normal((2, 3, 6, 7))
    np.testing.assert_array_equal(T.maxpool2d(T.Tensor(x), 2).data, maxpool_loop(x, 2))


def test_maxpool_tie_gradient_goes_to_first_max():
    x = T.Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    T.backward(T.tsum(T.maxpool2d(x, 2)))
    np.testing.assert_array_equal(x.grad, [[[[1, 0], [0, 0]]]])


def test_linear_and_relu_match_loops():
    rng = np.random.default_rng(2)
    x, W, b = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5)
    y = T.linear(T.Tensor(x), T.Tensor(W), T.Tensor(b)).data
    loop = np.array([[sum(x[i, k] * W[j, k] for k in range(4)) + b[j] for j in range(5)] for i in range(3)])
    np.testing.assert_allclose(y, loop, atol=1e-12)
    r = T.relu(T.Tensor(x)).data
    np.testing.assert_array_equal(r, [[max(v, 0.0) for v in row] for row in x])


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def test_backward_sum():
    x = T.Tensor(np.zeros(3), requires_grad=True)
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_sum_of_squares():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.backward(T.tsum(x * x))
    np.testing.assert_array_equal(x.grad, [2, 4])


def test_double_backward_is_an_error():
    x = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = T.tsum(x * x)
    T.backward(loss)
    with pytest.raises(BackwardStateError):
        T.backward(loss)


def test_backward_needs_scalar_and_grad():
    with pytest.raises(ContractError):
        T.backward(T.Tensor(np.ones(2), requires_grad=True) * 2.0)
    with pytest.raises(ContractError):
        T.backward(T.tsum(T.Tensor(np.ones(2))))


def test_log_of_non_positive_is_a_domain_error():
    with pytest.raises(NumericDomainError):
        T.log(T.Tensor(np.array([1.0, 0.0])))


def test_graph_is_topological_and_reaches_every_leaf():
    a = T.Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = T.Tensor(np.array([3.0, 4.0]), requires_grad=True)
    c = T.Tensor(np.array([5.0, 6.0]))  # constant
    h = a * b
    loss = T.tsum(T.relu(h + a) * c)
    g = T.Graph(loss)
    pos = g.index
    assert pos[id(loss)] == len(g) - 1
    assert pos[id(a)] < pos[id(h)] and pos[id(b)] < pos[id(h)]
    assert id(c) not in pos
    T.backward(loss, g)
    np.testing.assert_allclose(a.grad, c.data * (b.data + 1))
    np.testing.assert_allclose(b.grad, c.data * a.data)
    assert c.grad is None


def test_gradients_accumulate_for_reused_tensor():
    x = T.Tensor(np.array([3.0]), requires_grad=True)
    T.backward(T.tsum(x * x * x))
    np.testing.assert_allclose(x.grad, [27.0])


def test_no_grad_records_nothing():
    x = T.Tensor(np.ones(2), requires_grad=True)
    with T.no_grad():
        y = T.tsum(x * 2.0)
    assert not y.requires_grad


UNARY = {
    "exp": lambda a: T.exp(a),
    "log": lambda a: T.log(T.clamp_min(a, 0.05)),
    "relu": T.relu,
    "neg": T.neg,
    "power3": lambda a: T.power(a, 3.0),
    "sum_axis": lambda a: T.tsum(a, axis=1),
    "mean": lambda a: T.mean(a, axis=0, keepdims=True),
    "reshape": lambda a: T.reshape(a, (a.shape[1], a.shape[0])),
    "transpose": lambda a: T.transpose(a, (1, 0)),
    "softmax": T.softmax,
    "log_softmax": T.log_softmax,
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    for _ in range(3):
        x = rng.uniform(0.2, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4))
        if name == "log":
            x = np.abs(x)
        assert gradcheck(UNARY[name], [x], rng) < 1e-6


def test_binary_gradients_with_broadcasting():
    rng = np.random.default_rng(3)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
    assert gradcheck(lambda x, y: x * y + y, [a, b], rng) < 1e-6
    assert gradcheck(lambda x, y: T.matmul(x, y), [a, rng.standard_normal((4, 2))], rng) < 1e-6


def test_layer_gradients():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 2, 6, 6))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    assert gradcheck(lambda x, w, b: T.conv2d(x, w, b, stride=2, pad=1), [x, w, b], rng) < 1e-6
    assert gradcheck(lambda x: T.maxpool2d(x, 2), [x], rng) < 1e-6
    W, bb = rng.standard_normal((5, 7)), rng.standard_normal(5)
    assert gradcheck(T.linear, [rng.standard_normal((3, 7)), W, bb], rng) < 1e-6


def test_cross_entropy_gradients():
    rng = np.random.default_rng(5)
    p, q = simplex(rng, (3, 4)), simplex(rng, (3, 4))
    assert gradcheck(lambda a: T.cross_entropy(a, q), [p], rng) < 1e-6
    assert gradcheck(lambda z: T.cross_entropy_logits(z, q), [rng.standard_normal((3, 4))], rng) < 1e-6


def test_composite_graph_float32_finite_differences():
    """A small network in f32 against central differences with step 1e-3."""
    rng = np.random.default_rng(6)
    x = rng.random((2, 2, 6, 6)).astype(np.float32)
    w = (rng.standard_normal((3, 2, 3, 3)) * 0.5).astype(np.float32)
    W = (rng.standard_normal((4, 27)) * 0.3).astype(np.float32)
    q = T.one_hot([1, 3], 4)

    def loss_fn(wt):
        h = T.maxpool2d(T.relu(T.conv2d(T.Tensor(x), wt, pad=1)), 2)
        z = T.linear(T.flatten(h), T.Tensor(W)).astype(np.float64)
        return T.cross_entropy_logits(z, q)

    wt = T.Tensor(w.copy(), requires_grad=True)
    T.backward(loss_fn(wt))
    num = np.zeros_like(w, dtype=np.float64)
    h = 1e-3
    for idx in np.ndindex(w.shape):
        wp, wm = w.copy(), w.copy()
        wp[idx] += h
        wm[idx] -= h
        with T.no_grad():
            num[idx] = (float(loss_fn(T.Tensor(wp)).data) - float(loss_fn(T.Tensor(wm)).data)) / (2 * h)
    err = np.linalg.norm(wt.grad - num) / max(np.linalg.norm(num), 1e-12)
    assert err < 1e-3


def test_float32_parameters_and_float64_loss():
    w = T.Tensor(np.ones((2, 3), np.float32), requires_grad=True)
    z = T.linear(T.Tensor(np.ones((1, 3), np.float32)), w).astype(np.float64)
    loss = T.cross_entropy_logits(z, T.one_hot([0], 2))
    assert loss.dtype == np.float64
    T.backward(loss)
    assert w.grad.dtype == np.float32


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

def test_sgd_single_plain_step():
    p = {"t": T.Tensor(np.zeros(1))}
    sgd_step(p, SgdState(lr=1.0, momentum=0.0, weight_decay=0.0), {"t": np.ones(1)})
    np.testing.assert_array_equal(p["t"].data, [-1.0])


def test_sgd_zero_gradient_leaves_parameters():
    p = {"t": T.Tensor(np.array([0.3, -2.0]))}
    st_ = SgdState(lr=0.5, momentum=0.9, weight_decay=0.0)
    for _ in range(5):
        sgd_step(p, st_, {"t": np.zeros(2)})
    np.testing.assert_array_equal(p["t"].data, [0.3, -2.0])


def test_sgd_quadratic_matches_scalar_recurrence():
    theta, v = 1.0, 0.0
    p = {"t": T.Tensor(np.array([1.0]))}
    st_ = SgdState(lr=0.1, momentum=0.9, weight_decay=0.0)
    for _ in range(10):
        sgd_step(p, st_, {"t": p["t"].data.copy()})  # d/dθ ½θ² = θ
        v = 0.9 * v - 0.1 * theta
        theta += v
    assert abs(p["t"].data[0] - theta) < 1e-6


def test_sgd_weight_decay_folds_into_gradient():
    p = {"t": T.Tensor(np.array([2.0]))}
    sgd_step(p, SgdState(lr=0.1, momentum=0.0, weight_decay=0.5), {"t": np.array([1.0])})
    assert p["t"].data[0] == pytest.approx(2.0 - 0.1 * (1.0 + 0.5 * 2.0))


def test_sgd_contracts():
    with pytest.raises(ContractError):
        SgdState(lr=0.0)
    p = {"t": T.Tensor(np.zeros(2))}
    with pytest.raises(ContractError):
        sgd_step(p, SgdState(lr=0.1), {"t": np.zeros(3)})


def test_clip_grad_norm_rescales_jointly():
    a, b = T.Tensor(np.zeros(1)), T.Tensor(np.zeros(1))
    a.grad, b.grad = np.array([3.0]), np.array([4.0])
    assert clip_grad_norm({"a": a, "b": b}, 1.0) == pytest.approx(5.0)
    np.testing.assert_allclose([a.grad[0], b.grad[0]], [0.6, 0.8])
    assert clip_grad_norm({"a": a, "b": b}, None) == pytest.approx(1.0)


class _Sched:
    lr_start, lr_end, schedule_epochs = 0.0005, 0.00005, 30


def test_lr_schedule_endpoints_and_midpoint():
    assert lr_at(0, _Sched) == 0.0005
    assert lr_at(30, _Sched) == 0.00005
    assert lr_at(100, _Sched) == 0.00005
    assert lr_at(15, _Sched) == pytest.approx(0.000275)
    with pytest.raises(ContractError):
        lr_at(-1, _Sched)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 29))
def test_lr_schedule_is_monotone_between_endpoints(e):
    assert 0.00005 <= lr_at(e + 1, _Sched) <= lr_at(e, _Sched) <= 0.0005
