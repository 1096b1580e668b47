import numpy as np
import pytest

from laserseg.errors import DimensionError, NumericError
from laserseg.optim import Adam, AdamState, adam_step


def reference_adam(p, grads, lr, b1=0.9, b2=0.99, eps=1e-8):
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1 ** t)
        v_hat = v / (1 - b2 ** t)
        p = p - lr * m_hat / (np.sqrt(v_hat) + eps)
    return p


def test_matches_textbook_update(rng):
    p0 = rng.standard_normal((3, 4))
    grads = [rng.standard_normal((3, 4)) for _ in range(7)]
    params = {"w": p0.copy()}
    state = AdamState(learning_rate=0.05)
    for g in grads:
        adam_step(params, {"w": g}, state)
    np.testing.assert_allclose(params["w"], reference_adam(p0, grads, 0.05), rtol=1e-12, atol=1e-14)


def test_first_step_moves_by_learning_rate():
    params = {"w": np.zeros(3)}
    adam_step(params, {"w": np.array([2.0, -0.5, 1e-3])}, AdamState(learning_rate=0.1))
    np.testing.assert_allclose(params["w"], [-0.1, 0.1, -0.1], rtol=1e-4)


def test_missing_gradient_decays_moments_only():
    params = {"w": np.ones(2)}
    state = AdamState(learning_rate=0.1)
    adam_step(params, {"w": np.ones(2)}, state)
    m_before = state.first_moment["w"].copy()
    adam_step(params, {"w": None}, state)
    np.testing.assert_allclose(state.first_moment["w"], 0.9 * m_before)


def test_non_finite_gradient_names_parameter():
    with pytest.raises(NumericError, match="'bias'"):
        adam_step({"bias": np.zeros(2)}, {"bias": np.array([np.nan, 0.0])}, AdamState())


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_wrapper_minimizes_quadratic():
    params = {"x": np.array([3.0, -2.0])}
    opt = Adam(params, lr=0.1)
    for _ in range(300):
        opt.step({"x": 2 * params["x"]})
    assert np.abs(params["x"]).max() < 1e-2
