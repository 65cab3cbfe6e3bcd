# tests/test_lbfgs.py
import numpy as np
import pytest
from scipy.optimize import rosen, rosen_der

from app.core.config import TrainConfig
from app.core.errors import NumericalError
from app.services.utils.lbfgs import check_gradient, lbfgs_minimize


def quadratic(A, b):
    def objective(x):
        return 0.5 * float(x @ A @ x) - float(b @ x), A @ x - b
    return objective


def test_quadratic_converges():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(6, 6))
    A = M @ M.T + 6 * np.eye(6)
    b = rng.normal(size=6)
    result = lbfgs_minimize(quadratic(A, b), np.zeros(6), TrainConfig(gtol=1e-8, ftol=1e-14))
    assert result.converged
    assert result.params == pytest.approx(np.linalg.solve(A, b), abs=1e-6)


def test_rosenbrock_reaches_minimum():
    cfg = TrainConfig(max_iters=500, gtol=1e-9, ftol=1e-16)
    result = lbfgs_minimize(lambda x: (rosen(x), rosen_der(x)), np.array([-1.2, 1.0]), cfg)
    assert result.params == pytest.approx([1.0, 1.0], abs=1e-5)


def test_trace_is_monotone():
    cfg = TrainConfig(max_iters=200)
    result = lbfgs_minimize(lambda x: (rosen(x), rosen_der(x)), np.array([-1.2, 1.0, 0.5]), cfg)
    values = [t.value for t in result.trace]
    assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))
    # the sufficient-decrease condition holds at every accepted step
    for t in result.trace:
        assert t.value <= t.value_before + cfg.wolfe_c1 * t.step * t.slope_before + 1e-12


def test_already_optimal_start_stops_immediately():
    result = lbfgs_minimize(lambda x: (float(x @ x), 2 * x), np.zeros(3))
    assert result.reason == "gtol"
    assert result.trace == []


def test_empty_parameter_vector():
    result = lbfgs_minimize(lambda x: (1.5, x.copy()), np.zeros(0))
    assert result.value == 1.5
    assert result.converged


def test_non_finite_start_raises():
    with pytest.raises(NumericalError):
        lbfgs_minimize(lambda x: (float("nan"), np.zeros_like(x)), np.ones(2))


def test_wrong_gradient_fails_line_search():
    # the "gradient" points uphill, so no step can satisfy the Wolfe conditions
    objective = lambda x: (float(x @ x), -2 * x)  # noqa: E731
    result = lbfgs_minimize(objective, np.ones(2))
    assert result.reason == "line_search_failed"
    with pytest.raises(NumericalError):
        lbfgs_minimize(objective, np.ones(2), raise_on_failure=True)


def test_check_gradient_detects_corruption():
    A = np.diag([1.0, 2.0, 3.0])
    b = np.ones(3)
    good = quadratic(A, b)
    x = np.array([0.3, -0.2, 0.5])
    assert check_gradient(good, x) < 1e-6

    def corrupted(v):
        value, grad = good(v)
        return value, grad * np.array([1.0, 1.5, 1.0])

    assert check_gradient(corrupted, x) > 0.1
