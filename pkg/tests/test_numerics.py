import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from cadet.numerics import (
    AdamState,
    DegenerateRowError,
    DimensionError,
    NonFiniteError,
    Parameter,
    adam_step,
    check_finite,
    finite_diff_check,
    gelu,
    gelu_backward,
    layer_norm,
    layer_norm_backward,
    matmul,
    sigmoid,
    softmax_rows,
    softmax_rows_backward,
)


def triple_loop(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def test_matmul_identity():
    m = np.array([[1.5, -2.0], [3.0, 4.25]])
    assert np.array_equal(matmul(np.eye(2), m), m)


def test_matmul_row_times_column():
    assert matmul(np.array([[1.0, 2.0]]), np.array([[3.0], [4.0]])).tolist() == [[11.0]]


def test_matmul_matches_triple_loop(rng):
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((4, 2))
    np.testing.assert_allclose(matmul(a, b), triple_loop(a, b), atol=1e-12, rtol=0)


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_sigmoid_values():
    assert sigmoid(np.array(0.0)) == 0.5
    assert sigmoid(np.array(2.0)) == pytest.approx(0.8807970779778823, abs=1e-15)
    with np.errstate(over="raise", invalid="raise"):
        low = sigmoid(np.array([-1000.0, 1000.0]))
    assert low[0] == 0.0 and low[1] == 1.0


@given(st.floats(-700, 700))
def test_sigmoid_symmetry(x):
    s = sigmoid(np.array([x, -x]))
    assert s[0] + s[1] == pytest.approx(1.0, abs=1e-12)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows(np.zeros((1, 3))), [[1 / 3] * 3], atol=1e-15)
    np.testing.assert_array_equal(softmax_rows(np.array([[5.0, -np.inf, -np.inf]])), [[1.0, 0.0, 0.0]])
    np.testing.assert_allclose(
        softmax_rows(np.array([[1.0, 2.0, 3.0]])), [[0.09003, 0.24473, 0.66524]], atol=1e-5
    )


def test_softmax_all_masked_row_is_an_error():
    with pytest.raises(DegenerateRowError):
        softmax_rows(np.array([[0.0, 1.0], [-np.inf, -np.inf]]))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(row, c):
    x = np.array([row])
    p = softmax_rows(x)
    assert p.sum() == pytest.approx(1.0, abs=1e-12)
    np.testing.assert_allclose(softmax_rows(x + c), p, atol=1e-12)


def test_check_finite():
    check_finite(np.ones(3))
    with pytest.raises(NonFiniteError):
        check_finite(np.array([1.0, np.nan]))


def _scalar_param(value):
    return Parameter("w", np.array([float(value)]))


def test_adam_zero_grad_leaves_value():
    p = _scalar_param(1.25)
    adam_step([p], AdamState(lr=0.1))
    assert p.value[0] == 1.25


def test_adam_first_step_magnitude():
    p = _scalar_param(0.0)
    p.grad[:] = 3.7
    adam_step([p], AdamState(lr=0.01))
    assert p.value[0] == pytest.approx(-0.01, rel=1e-6)


def test_adam_minimises_quadratic():
    p = _scalar_param(0.0)
    state = AdamState(lr=0.1)
    for _ in range(100):
        p.grad[:] = 2.0 * (p.value - 3.0)
        adam_step([p], state)
    assert abs(p.value[0] - 3.0) < 0.1


def test_finite_diff_square():
    p = _scalar_param(3.0)
    p.grad[:] = 6.0
    assert finite_diff_check(lambda: float(p.value[0] ** 2), [p]) < 1e-6


def test_finite_diff_constant():
    p = _scalar_param(3.0)
    assert finite_diff_check(lambda: 4.0, [p]) == 0.0


def test_finite_diff_rejects_f32():
    p = Parameter("w", np.zeros(2, np.float32))
    with pytest.raises(TypeError):
        finite_diff_check(lambda: 0.0, [p])


def test_finite_diff_propagates_non_finite():
    p = _scalar_param(0.0)
    with pytest.raises(NonFiniteError):
        finite_diff_check(lambda: float("nan"), [p])


def test_layer_norm_gradients(rng):
    x = rng.standard_normal((5, 6))
    g = Parameter("g", rng.standard_normal(6))
    b = Parameter("b", rng.standard_normal(6))
    w = rng.standard_normal((5, 6))
    xp = Parameter("x", x.copy())

    def loss():
        return float((layer_norm(xp.value, g, b)[0] * w).sum())

    y, cache = layer_norm(xp.value, g, b)
    xp.grad[:] = layer_norm_backward(cache, g, b, w)
    assert finite_diff_check(loss, [xp, g, b]) < 1e-7


def test_gelu_backward_matches_differences(rng):
    x = rng.standard_normal(20)
    y, t = gelu(x)
    d = gelu_backward(x, t, np.ones_like(x))
    h = 1e-6
    numeric = (gelu(x + h)[0] - gelu(x - h)[0]) / (2 * h)
    np.testing.assert_allclose(d, numeric, atol=1e-8)


def test_softmax_backward_matches_differences(rng):
    s = rng.standard_normal((3, 4))
    up = rng.standard_normal((3, 4))
    p = softmax_rows(s)
    d = softmax_rows_backward(p, up)
    h = 1e-6
    numeric = np.zeros_like(s)
    for idx in np.ndindex(s.shape):
        e = np.zeros_like(s)
        e[idx] = h
        numeric[idx] = ((softmax_rows(s + e) * up).sum() - (softmax_rows(s - e) * up).sum()) / (2 * h)
    np.testing.assert_allclose(d, numeric, atol=1e-8)
    assert math.isfinite(d.sum())
