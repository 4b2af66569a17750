import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vigor.neural import (AdamState, BatchNorm, Linear, NonFiniteError, Parameter, ReLU, ShapeError,
                          Sigmoid, StateError, adam_step, flatten, sigmoid, unflatten)


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def numeric_grad(f, arr, h=1e-5):
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = arr[idx]
        arr[idx] = old + h
        up = f()
        arr[idx] = old - h
        down = f()
        arr[idx] = old
        g[idx] = (up - down) / (2 * h)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), 1e-8))


def test_linear_identity():
    layer = Linear(2, 2)
    layer.weight.value[...] = np.eye(2)
    layer.bias.value[...] = 0
    np.testing.assert_array_equal(layer.forward([[1, 2], [3, 4]]), [[1, 2], [3, 4]])


def test_linear_analytic():
    layer = Linear(2, 2)
    layer.weight.value[...] = [[2, 0], [0, 3]]
    layer.bias.value[...] = [1, 1]
    np.testing.assert_array_equal(layer.forward([[1, 1]]), [[3, 4]])


def test_linear_matches_naive_multiply():
    rng = np.random.default_rng(3)
    layer = Linear(5, 3, rng)
    layer.bias.value[...] = rng.normal(size=3)
    x = rng.normal(size=(4, 5))
    expected = naive_matmul(x, layer.weight.value.T) + layer.bias.value
    np.testing.assert_allclose(layer.forward(x), expected, rtol=0, atol=1e-12)


def test_linear_shape_error_names_both_shapes():
    layer = Linear(3, 2)
    with pytest.raises(ShapeError, match=r"\(4, 5\).*\(2, 3\)"):
        layer.forward(np.zeros((4, 5)))


def test_linear_backward_before_forward():
    with pytest.raises(StateError):
        Linear(2, 2).backward(np.zeros((1, 2)))


def test_linear_zero_grad_out():
    layer = Linear(3, 2, np.random.default_rng(0))
    layer.forward(np.ones((4, 3)))
    g = layer.backward(np.zeros((4, 2)))
    assert not g.any() and not layer.weight.grad.any() and not layer.bias.grad.any()


def test_linear_scalar_chain_rule():
    layer = Linear(1, 1)
    layer.forward([[2.5]])
    layer.backward([[-1.5]])
    assert layer.weight.grad[0, 0] == -1.5 * 2.5
    assert layer.bias.grad[0] == -1.5


def test_linear_gradients_match_finite_differences():
    rng = np.random.default_rng(1)
    layer = Linear(4, 3, rng)
    x = rng.normal(size=(5, 4))
    upstream = rng.normal(size=(5, 3))
    loss = lambda: float(np.sum(layer.forward(x) * upstream))
    layer.forward(x)
    g_in = layer.backward(upstream)
    assert rel_err(numeric_grad(loss, layer.weight.value), layer.weight.grad) < 1e-4
    assert rel_err(numeric_grad(loss, layer.bias.value), layer.bias.grad) < 1e-4
    assert rel_err(numeric_grad(loss, x), g_in) < 1e-4


def test_relu_and_sigmoid_units():
    np.testing.assert_array_equal(ReLU().forward(np.array([-1.0, 0.0, 2.0])), [0, 0, 2])
    assert sigmoid(np.array([0.0]))[0] == 0.5
    s = Sigmoid()
    s.forward(np.array([[0.0]]))
    assert s.backward(np.array([[2.0]]))[0, 0] == 0.25 * 2.0


def test_sigmoid_extreme_inputs_are_finite():
    out = sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(out)) and out[0] == 0.0 and out[1] == 1.0


def test_sigmoid_and_relu_gradients():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 3))
    x[np.abs(x) < 1e-3] = 0.5  # keep away from the ReLU kink
    up = rng.normal(size=(6, 3))
    for layer in (ReLU(), Sigmoid()):
        loss = lambda: float(np.sum(layer.forward(x) * up))
        layer.forward(x)
        assert rel_err(numeric_grad(loss, x), layer.backward(up)) < 1e-4


def test_batchnorm_identity_on_standardized_batch():
    bn = BatchNorm(3)
    x = np.array([[1.0, -1.0, 1.0], [-1.0, 1.0, -1.0]])
    np.testing.assert_allclose(bn.forward(x, training=True), x, atol=1e-5)


def test_batchnorm_eval_identity():
    bn = BatchNorm(2)
    x = np.array([[0.3, -2.0]])
    np.testing.assert_allclose(bn.forward(x, training=False), x, atol=1e-5)


def test_batchnorm_rejects_single_row_in_training():
    with pytest.raises(ValueError, match="at least 2"):
        BatchNorm(2).forward(np.zeros((1, 2)), training=True)


def test_batchnorm_gradients_match_finite_differences():
    rng = np.random.default_rng(4)
    bn = BatchNorm(4)
    bn.gamma.value[...] = rng.normal(size=4)
    bn.beta.value[...] = rng.normal(size=4)
    x = rng.normal(size=(8, 4))
    up = rng.normal(size=(8, 4))
    loss = lambda: float(np.sum(bn.forward(x, training=True) * up))
    bn.forward(x, training=True)
    g_in = bn.backward(up)
    assert rel_err(numeric_grad(loss, x), g_in) < 1e-3
    assert rel_err(numeric_grad(loss, bn.gamma.value), bn.gamma.grad) < 1e-3
    assert rel_err(numeric_grad(loss, bn.beta.value), bn.beta.grad) < 1e-3


def test_batchnorm_eval_is_row_wise():
    rng = np.random.default_rng(5)
    bn = BatchNorm(3)
    for _ in range(5):
        bn.forward(rng.normal(size=(16, 3)), training=True)
    batch = rng.normal(size=(10, 3))
    whole = bn.forward(batch, training=False)
    for i in range(10):
        np.testing.assert_array_equal(bn.forward(batch[i:i + 1], training=False)[0], whole[i])
    assert np.all(bn.running_var > 0)


def test_adam_zero_grads_and_zero_lr():
    p = Parameter("w", np.array([1.0, -2.0]))
    adam_step(AdamState(), [p])
    np.testing.assert_array_equal(p.value, [1.0, -2.0])
    p.grad[...] = [5.0, -3.0]
    adam_step(AdamState(learning_rate=0.0), [p])
    np.testing.assert_array_equal(p.value, [1.0, -2.0])


def test_adam_scalar_recurrence():
    g, lr, b1, b2, eps = 0.7, 0.01, 0.9, 0.999, 1e-8
    p = Parameter("w", np.array([0.5]))
    state = AdamState(learning_rate=lr)
    theta, m, v = 0.5, 0.0, 0.0
    for t in range(1, 21):
        p.grad[...] = g
        adam_step(state, [p])
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta -= lr * (m / (1 - b1 ** t)) / ((v / (1 - b2 ** t)) ** 0.5 + eps)
        assert state.t == t
    assert p.value[0] == pytest.approx(theta, abs=1e-14)


def test_adam_rejects_nonfinite_gradients():
    p = Parameter("decoder.weight", np.zeros(2))
    p.grad[0] = np.nan
    with pytest.raises(NonFiniteError, match="decoder.weight"):
        adam_step(AdamState(), [p])


def test_adam_is_bitwise_reproducible():
    rng = np.random.default_rng(6)
    grads = rng.normal(size=(5, 3))
    runs = []
    for _ in range(2):
        p = Parameter("w", np.ones(3))
        state = AdamState()
        for g in grads:
            p.grad[...] = g
            adam_step(state, [p])
        runs.append(p.value.tobytes())
    assert runs[0] == runs[1]


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(2, 5), st.integers(0, 10_000))
def test_linear_gradient_property(in_dim, out_dim, n, seed):
    rng = np.random.default_rng(seed)
    layer = Linear(in_dim, out_dim, rng)
    x = rng.normal(size=(n, in_dim))
    up = rng.normal(size=(n, out_dim))
    loss = lambda: float(np.sum(layer.forward(x) * up))
    layer.forward(x)
    layer.backward(up)
    assert rel_err(numeric_grad(loss, layer.weight.value), layer.weight.grad) < 1e-4


def test_flatten_roundtrip():
    params = [Parameter("a", np.arange(6.0).reshape(2, 3)), Parameter("b", np.array([7.0]))]
    vec = flatten(params)
    unflatten(params, vec * 2)
    np.testing.assert_array_equal(flatten(params), vec * 2)
    with pytest.raises(ShapeError):
        unflatten(params, np.zeros(3))
