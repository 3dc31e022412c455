import numpy as np
import pytest
from hypothesis import given, strategies as st

from hjblearn.errors import ConfigurationError
from hjblearn.ode import (IntegrationGrid, integrate_adaptive, integrate_kernel_rk4,
                          integrate_rk4, integrate_rk4_batch)
from hjblearn.problems import _hyper_rates


def growth(t, y):
    return y


def rk4_error(steps):
    out = integrate_rk4(growth, [1.0], IntegrationGrid(0.0, 1.0, step_count=steps))
    return abs(out.final_state[0] - np.e)


def test_rk4_is_fourth_order():
    ratio = rk4_error(100) / rk4_error(200)
    assert 14.0 <= ratio <= 18.0


def test_rk4_frozen_value():
    out = integrate_rk4(growth, [1.0], IntegrationGrid(0.0, 1.0, step_count=10))
    # (1 + h + h^2/2 + h^3/6 + h^4/24)^10 with h = 0.1
    assert out.final_state[0] == pytest.approx(2.7182797441, abs=1e-10)
    assert out.times.shape == (11,)


def test_adaptive_meets_tolerance():
    out = integrate_adaptive(growth, [1.0], IntegrationGrid(0.0, 1.0, tolerance=1e-10))
    assert out.completed
    assert abs(out.final_state[0] - np.e) < 1e-8


def test_divergence_is_reported():
    # y' = y^2 blows up at t = 1
    out = integrate_rk4(lambda t, y: y * y, [1.0], IntegrationGrid(0.0, 2.0, step_count=400),
                        divergence_bound=1e6)
    assert out.status == "diverged"
    assert out.times[-1] < 1.05


def test_adaptive_divergence_is_reported():
    out = integrate_adaptive(lambda t, y: y * y, [1.0], IntegrationGrid(0.0, 2.0, tolerance=1e-8))
    assert not out.completed


@pytest.mark.parametrize("kwargs", [
    {"t_start": 0.0, "t_end": 0.0, "step_count": 10},
    {"t_start": 0.0, "t_end": 1.0},
    {"t_start": 0.0, "t_end": 1.0, "step_count": 0},
    {"t_start": 0.0, "t_end": np.inf, "step_count": 5},
    {"t_start": 0.0, "t_end": 1.0, "tolerance": -1.0},
])
def test_grid_validation(kwargs):
    with pytest.raises(ConfigurationError):
        IntegrationGrid(**kwargs)


def test_batch_rows_are_independent():
    grid = IntegrationGrid(0.0, 1.0, step_count=50)
    y0 = np.array([[1.0], [2.0], [-0.5]])
    batch = integrate_rk4_batch(growth, y0, grid)
    for b in range(3):
        single = integrate_rk4(growth, y0[b], grid)
        np.testing.assert_array_equal(batch.states[:, b], single.states)


@given(st.floats(-3, 3), st.floats(0.1, 2.0))
def test_linear_field_scales(y0, tf):
    # linear ODE: solution is linear in the initial state
    grid = IntegrationGrid(0.0, tf, step_count=40)
    a = integrate_rk4(growth, [y0], grid).final_state[0]
    b = integrate_rk4(growth, [1.0], grid).final_state[0]
    assert a == pytest.approx(y0 * b, rel=1e-12, abs=1e-12)


def test_kernel_matches_python_rk4():
    z0 = np.array([[1.0, 0.8, 0.0]])
    res = integrate_kernel_rk4(_hyper_rates, z0, 2.0, 200)

    def field(t, z):
        x, lam = z[:, 0], z[:, 1]
        u = -0.5 * lam
        return np.stack([-x ** 3 + u, -2 * x + 3 * x * x * lam, x * x + u * u], axis=1)

    ref = integrate_rk4(field, z0[0], IntegrationGrid(0.0, 2.0, step_count=200))
    np.testing.assert_allclose(res.states[-1, 0], ref.final_state, rtol=1e-12, atol=1e-13)
