import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from centeruda import tensor as T
from centeruda.errors import ConfigError, GradientError, ShapeError


def _grad(fn, *arrays):
    params = [T.parameter(a.copy()) for a in arrays]
    with T.GradientTape():
        loss = fn(*params)
    T.backward(loss)
    return [p.grad for p in params]


def test_broadcast_gradients_are_reduced_to_input_shape():
    a = np.arange(6, dtype=np.float64).reshape(2, 3)
    b = np.array([1.0, -2.0, 0.5])
    ga, gb = _grad(lambda x, y: T.sum(x * y), a, b)
    np.testing.assert_allclose(ga, np.broadcast_to(b, (2, 3)))
    np.testing.assert_allclose(gb, a.sum(axis=0))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients_match_finite_differences(stride, padding):
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 2, 6, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    direction = rng.normal(size=T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride, padding).shape)

    def loss(xa, wa, ba):
        return T.sum(T.conv2d(xa, wa, ba, stride=stride, padding=padding) * direction)

    gx, gw, gb = _grad(loss, x, w, b)

    def value(xa=x, wa=w, ba=b):
        return loss(T.Tensor(xa), T.Tensor(wa), T.Tensor(ba)).item()

    assert T.relative_error(gx, T.numerical_gradient(lambda a: value(xa=a), x.copy())) < 1e-6
    assert T.relative_error(gw, T.numerical_gradient(lambda a: value(wa=a), w.copy())) < 1e-6
    assert T.relative_error(gb, T.numerical_gradient(lambda a: value(ba=a), b.copy())) < 1e-6


def test_conv2d_matches_direct_loop():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(2, 2, 3, 3))
    out = T.conv2d(T.Tensor(x), T.Tensor(w), padding=1).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    expected = np.zeros((1, 2, 5, 5))
    for o in range(2):
        for i in range(5):
            for j in range(5):
                expected[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3] * w[o])
    np.testing.assert_allclose(out, expected, atol=1e-12)


def test_softmax_and_sigmoid_gradients():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 2, 2))
    direction = rng.normal(size=x.shape)

    for op in (lambda t: T.channel_softmax(t, axis=1), T.sigmoid, lambda t: T.log_clamped(T.sigmoid(t))):
        (g,) = _grad(lambda t: T.sum(op(t) * direction), x)
        numeric = T.numerical_gradient(lambda a: T.sum(op(T.Tensor(a)) * direction).item(), x.copy())
        assert T.relative_error(g, numeric) < 1e-6


def test_softmax_is_stable_for_large_logits():
    x = T.Tensor(np.array([[[[1000.0]], [[1000.0]], [[-1000.0]]]]))
    p = T.channel_softmax(x).data
    assert np.all(np.isfinite(p))
    np.testing.assert_allclose(p[0, :, 0, 0], [0.5, 0.5, 0.0], atol=1e-12)


def test_max_pool_routes_ties_to_first_index():
    x = T.parameter(np.ones((1, 1, 2, 2)))
    with T.GradientTape():
        loss = T.sum(T.max_pool3x3(x))
    T.backward(loss)
    np.testing.assert_array_equal(x.grad[0, 0], [[4.0, 0.0], [0.0, 0.0]])


def test_upsample_gradient_sums_each_block():
    (g,) = _grad(lambda t: T.sum(T.upsample2x(t)), np.zeros((1, 1, 2, 3)))
    np.testing.assert_array_equal(g, np.full((1, 1, 2, 3), 4.0))


def test_backward_twice_is_rejected():
    x = T.parameter(np.array([1.0, 2.0]))
    with T.GradientTape():
        loss = T.sum(x * x)
    T.backward(loss)
    with pytest.raises(GradientError):
        T.backward(loss)


def test_backward_requires_scalar_loss():
    x = T.parameter(np.array([1.0, 2.0]))
    with T.GradientTape():
        y = x * 2.0
    with pytest.raises(GradientError):
        T.backward(y)


def test_ops_outside_a_tape_are_not_recorded():
    x = T.parameter(np.array([1.0, 2.0]))
    y = T.sum(x * 3.0)
    assert not y.requires_grad
    with pytest.raises(GradientError):
        T.backward(y)


def test_retain_grad_keeps_intermediate_gradient():
    x = T.parameter(np.array([1.0, -2.0]))
    with T.GradientTape():
        h = (x * 3.0).retain_grad()
        loss = T.sum(h * h)
    T.backward(loss)
    np.testing.assert_allclose(h.grad, 2 * h.data)
    np.testing.assert_allclose(x.grad, 18 * x.data)


def test_log_clamped_rejects_nonpositive_eps():
    with pytest.raises(ConfigError):
        T.log_clamped(T.Tensor([0.5]), eps=0.0)


def test_log_clamped_is_finite_at_zero():
    (g,) = _grad(lambda t: T.sum(T.log_clamped(t)), np.array([0.0, 0.5]))
    assert np.all(np.isfinite(g))
    assert g[0] == 0.0


def test_conv2d_reports_channel_mismatch():
    with pytest.raises(ShapeError) as info:
        T.conv2d(T.Tensor(np.zeros((1, 3, 5, 5))), T.Tensor(np.zeros((4, 2, 3, 3))))
    assert info.value.dim == 1


def test_conv2d_rejects_even_kernel():
    with pytest.raises(ShapeError):
        T.conv2d(T.Tensor(np.zeros((1, 1, 5, 5))), T.Tensor(np.zeros((1, 1, 2, 2))))


def test_item_requires_single_element():
    assert T.Tensor([3.5]).item() == 3.5
    with pytest.raises(ShapeError):
        T.Tensor([1.0, 2.0]).item()


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 3), elements=st.floats(-1e4, 1e4)))
def test_sigmoid_stays_in_unit_interval(values):
    s = T.sigmoid(T.Tensor(values)).data
    assert np.all(np.isfinite(s))
    assert np.all((s >= 0.0) & (s <= 1.0))


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-3, 3)), arrays(np.float64, (3, 2), elements=st.floats(-3, 3)))
def test_elementwise_gradients_match_finite_differences(a, b):
    def loss(x, y):
        return T.sum(T.square(x - y) + x * y + T.relu(x) * 0.5)

    ga, gb = _grad(loss, a, b)
    na = T.numerical_gradient(lambda v: loss(T.Tensor(v), T.Tensor(b)).item(), a.copy())
    nb = T.numerical_gradient(lambda v: loss(T.Tensor(a), T.Tensor(v)).item(), b.copy())
    np.testing.assert_allclose(gb, nb, atol=1e-6)
    # relu has a kink at 0; compare away from it
    smooth = np.abs(a) > 1e-3
    np.testing.assert_allclose(ga[smooth], na[smooth], atol=1e-6)
