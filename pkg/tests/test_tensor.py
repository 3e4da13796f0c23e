import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posekit import tensor as T
from posekit.tensor import Parameter, ShapeError, Tensor

from oracles import conv2d_loops, deconv2d_scatter


def test_conv_all_ones_window_sum(backend):
    out = T.conv2d(np.ones((1, 1, 3, 3)), np.ones((1, 1, 2, 2)))
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


def test_conv_identity_kernel(backend, rng):
    x = rng.normal(size=(2, 1, 5, 4))
    np.testing.assert_array_equal(T.conv2d(x, np.ones((1, 1, 1, 1))).data, x)


def test_depthwise_shape(backend, rng):
    out = T.conv2d(rng.normal(size=(1, 4, 8, 8)), rng.normal(size=(4, 1, 3, 3)), padding=1, groups=4)
    assert out.shape == (1, 4, 8, 8)


@pytest.mark.parametrize("stride,padding,groups,k", [(1, 0, 1, 3), (2, 1, 1, 3), (1, 1, 2, 3), (2, 1, 4, 4), (1, 0, 1, 1)])
def test_conv_matches_loops(backend, rng, stride, padding, groups, k):
    x = rng.normal(size=(2, 4, 7, 6))
    w = rng.normal(size=(4, 4 // groups, k, k))
    b = rng.normal(size=4)
    got = T.conv2d(x, w, b, stride, padding, groups).data
    np.testing.assert_allclose(got, conv2d_loops(x, w, b, stride, padding, groups), rtol=0, atol=1e-12)


@pytest.mark.parametrize("stride,padding,groups,k", [(2, 1, 1, 4), (2, 1, 4, 4), (1, 0, 1, 3), (3, 1, 2, 3), (2, 0, 1, 2)])
def test_deconv_matches_scatter(backend, rng, stride, padding, groups, k):
    x = rng.normal(size=(2, 4, 3, 5))
    w = rng.normal(size=(4, 2, k, k))
    cout = w.shape[1] * groups
    b = rng.normal(size=cout)
    got = T.deconv2d(x, w, b, stride, padding, groups).data
    np.testing.assert_allclose(got, deconv2d_scatter(x, w, b, stride, padding, groups), rtol=0, atol=1e-12)


def test_deconv_shapes(backend, rng):
    x = rng.normal(size=(1, 256, 8, 6))
    w = rng.normal(size=(256, 1, 4, 4))
    out = T.deconv2d(x, w, stride=2, padding=1, groups=256)
    assert out.shape == (1, 256, 16, 12)
    for _ in range(2):
        out = T.deconv2d(out, w, stride=2, padding=1, groups=256)
    assert out.shape[2:] == (64, 48)


@settings(max_examples=25, deadline=None)
@given(
    cin_g=st.integers(1, 3), cout_g=st.integers(1, 3), groups=st.integers(1, 3),
    h=st.integers(1, 5), w=st.integers(1, 5), k=st.integers(1, 4),
    stride=st.integers(1, 3), padding=st.integers(0, 2), seed=st.integers(0, 2**16),
)
def test_deconv_adjoint_identity(cin_g, cout_g, groups, h, w, k, stride, padding, seed):
    # <deconv(x, K), y> == <x, conv(y, K)>
    r = np.random.default_rng(seed)
    cin, cout = cin_g * groups, cout_g * groups
    ho = (h - 1) * stride - 2 * padding + k
    wo = (w - 1) * stride - 2 * padding + k
    if ho < 1 or wo < 1 or (ho + 2 * padding - k) // stride + 1 != h or (wo + 2 * padding - k) // stride + 1 != w:
        return
    x = r.normal(size=(2, cin, h, w))
    kern = r.normal(size=(cin, cout_g, k, k))
    y = r.normal(size=(2, cout, ho, wo))
    lhs = float(np.sum(T.deconv2d(x, kern, stride=stride, padding=padding, groups=groups).data * y))
    # conv kernel layout is (C_out_conv = cin, C_in_conv / groups = cout_g): the same array
    rhs = float(np.sum(x * T.conv2d(y, kern, stride=stride, padding=padding, groups=groups).data))
    assert abs(lhs - rhs) <= 1e-10 * max(1.0, abs(lhs))


def test_grouped_equals_block_diagonal(backend, rng):
    c = 4
    x = rng.normal(size=(1, c, 6, 5))
    dw = rng.normal(size=(c, 1, 3, 3))
    dense = np.zeros((c, c, 3, 3))
    for i in range(c):
        dense[i, i] = dw[i, 0]
    np.testing.assert_array_equal(T.conv2d(x, dw, padding=1, groups=c).data, T.conv2d(x, dense, padding=1).data)


def test_conv_shape_errors_name_axis(rng):
    with pytest.raises(ShapeError) as e:
        T.conv2d(rng.normal(size=(1, 3, 4, 4)), rng.normal(size=(2, 2, 3, 3)))
    assert e.value.axis == "channel"
    with pytest.raises(ShapeError) as e:
        T.conv2d(rng.normal(size=(1, 1, 2, 8)), rng.normal(size=(1, 1, 3, 3)))
    assert e.value.axis == "height"
    with pytest.raises(ShapeError) as e:
        T.conv2d(rng.normal(size=(1, 4, 4)), rng.normal(size=(1, 1, 3, 3)))
    assert e.value.axis == "rank"
    with pytest.raises(ShapeError) as e:
        T.conv2d(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(2, 2, 1, 1)), stride=0)
    assert e.value.axis == "stride"
    with pytest.raises(ShapeError) as e:
        T.deconv2d(rng.normal(size=(1, 2, 4, 4)), rng.normal(size=(3, 1, 4, 4)))
    assert e.value.axis == "channel"


def test_gap_values_and_grad():
    x = Tensor(np.arange(1.0, 5.0).reshape(1, 1, 2, 2), requires_grad=True)
    out = T.global_avg_pool(x)
    assert out.shape == (1, 1, 1, 1) and out.item() == 2.5
    np.testing.assert_array_equal(T.global_avg_pool(np.full((2, 3, 4, 5), 1.75)).data, np.full((2, 3, 1, 1), 1.75))
    x = Tensor(np.random.default_rng(0).normal(size=(2, 3, 4, 5)), requires_grad=True)
    T.sum(T.global_avg_pool(x)).backward()
    np.testing.assert_allclose(x.grad, np.full(x.shape, 1 / 20), rtol=0, atol=1e-15)


def test_hard_sigmoid_values():
    x = np.array([0.0, 3.0, -3.0, 1.5, 10.0, -10.0]).reshape(1, 1, 1, 6)
    np.testing.assert_array_equal(T.hard_sigmoid(x).data.ravel(), [0.5, 1.0, 0.0, 0.75, 1.0, 0.0])


@given(st.lists(st.floats(-1e300, 1e300), min_size=1, max_size=20))
def test_hard_sigmoid_range(values):
    out = T.hard_sigmoid(np.array(values)).data
    assert np.all((out >= 0.0) & (out <= 1.0))


def test_elementwise_identities_and_broadcast(rng):
    f = rng.normal(size=(1, 2, 2, 2))
    np.testing.assert_array_equal(T.mul(f, np.ones_like(f)).data, f)
    np.testing.assert_array_equal(T.add(f, np.zeros_like(f)).data, f)
    out = T.mul(f, np.array([2.0, 3.0]).reshape(1, 2, 1, 1)).data
    np.testing.assert_array_equal(out[0, 0], 2 * f[0, 0])
    np.testing.assert_array_equal(out[0, 1], 3 * f[0, 1])
    with pytest.raises(ShapeError):
        T.mul(f, np.ones((1, 3, 1, 1)))


def test_broadcast_gradients_reduce(rng):
    a = Tensor(rng.normal(size=(2, 3, 4, 5)), requires_grad=True)
    c = Tensor(rng.normal(size=(2, 3, 1, 1)), requires_grad=True)
    s = Tensor(rng.normal(size=(2, 1, 4, 5)), requires_grad=True)
    T.sum(T.add(T.mul(a, c), s)).backward()
    np.testing.assert_allclose(c.grad, a.data.sum(axis=(2, 3), keepdims=True), atol=1e-12)
    np.testing.assert_allclose(s.grad, np.ones((2, 3, 4, 5)).sum(axis=1, keepdims=True), atol=1e-12)
    np.testing.assert_allclose(a.grad, np.broadcast_to(c.data, a.shape), atol=1e-15)


def test_backward_sum_gives_ones_and_accumulates(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones(x.shape))
    T.sum(x).backward()
    np.testing.assert_array_equal(x.grad, 2 * np.ones(x.shape))
    T.zero_grad([x])
    assert x.grad is None


def test_backward_mse_at_minimum_is_zero(rng):
    from posekit.losses import mse_loss

    pred = Tensor(rng.random((1, 2, 4, 4)), requires_grad=True)
    mse_loss(pred, pred.data.copy()).backward()
    np.testing.assert_array_equal(pred.grad, np.zeros(pred.shape))


def test_backward_requires_scalar(rng):
    x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        T.relu(x).backward()


def test_no_grad_builds_no_graph(rng):
    x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    with T.no_grad():
        y = T.relu(x)
    assert not y.requires_grad and y.is_leaf


def test_shared_subexpression_gradient(rng):
    # y = x*x + x: each use of x contributes
    x = Tensor(rng.normal(size=(1, 1, 2, 2)), requires_grad=True)
    T.sum(T.add(T.mul(x, x), x)).backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1, atol=1e-15)


def test_batch_norm_train_and_eval(rng):
    x = rng.normal(2.0, 3.0, size=(4, 3, 5, 5))
    rm, rv = np.zeros(3), np.ones(3)
    out = T.batch_norm(x, np.ones(3), np.zeros(3), rm, rv, training=True).data
    np.testing.assert_allclose(out.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(out.var(axis=(0, 2, 3)), 1, atol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    ev = T.batch_norm(x, np.ones(3), np.zeros(3), rm, rv, training=False).data
    np.testing.assert_allclose(ev, (x - rm.reshape(1, 3, 1, 1)) / np.sqrt(rv.reshape(1, 3, 1, 1) + 1e-5))


# ---------------------------------------------------------------------------
# Adam


def test_adam_zero_grad_is_identity():
    p = Parameter(np.array([1.5, -2.0]))
    p.grad = np.zeros(2)
    before = p.data.copy()
    T.adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, before)
    assert p.step_count == 1


def test_adam_first_step_hand_value():
    p = Parameter(np.array(1.0))
    p.grad = np.array(1.0)
    T.adam_step([p], lr=0.1)
    # m_hat = 1, v_hat = 1 -> step = 0.1 / (1 + 1e-8)
    assert abs((1.0 - p.data) - 0.1 / (1 + 1e-8)) < 1e-15
    assert p.grad == 1.0  # caller resets


def test_adam_two_steps_monotone():
    p = Parameter(np.array([0.0, 0.0]))
    vals = [p.data.copy()]
    for _ in range(2):
        p.grad = np.array([1.0, -2.0])
        T.adam_step([p], lr=0.01)
        vals.append(p.data.copy())
    assert vals[0][0] > vals[1][0] > vals[2][0]
    assert vals[0][1] < vals[1][1] < vals[2][1]
    assert p.step_count == 2


def test_adam_missing_grad_names_parameter():
    p = Parameter(np.zeros(2), name="head.0.bn.weight")
    with pytest.raises(ValueError, match="head.0.bn.weight"):
        T.adam_step([p], lr=0.1)


# ---------------------------------------------------------------------------
# finite differences


def test_fd_sum_of_squares(rng):
    x = Tensor(rng.normal(size=(1, 2, 3, 3)))
    assert T.finite_diff_check(lambda t: T.sum(T.mul(t, t)), x) <= 1e-6


def test_fd_hard_sigmoid_away_from_kinks():
    x = Tensor(np.full((1, 1, 2, 2), 0.5))
    assert T.finite_diff_check(lambda t: T.sum(T.hard_sigmoid(t)), x) <= 1e-6


def test_fd_reports_wrong_gradient(rng):
    # an op with a deliberately wrong backward must be caught
    def bad(t):
        return T.sum(T._make(t.data**2, (t,), lambda g: (g * t.data,)))

    assert T.finite_diff_check(bad, Tensor(rng.normal(size=(1, 1, 2, 2)) + 3.0)) > 0.1


def test_fd_nan_is_failure():
    x = Tensor(np.ones((1, 1, 1, 1)))
    assert T.finite_diff_check(lambda t: T.sum(T.scale(t, math.nan)), x) == math.inf
