import numpy as np
import pytest

from hjblearn.errors import ConfigurationError, UsageError
from hjblearn.problems import BoundaryConditionSet
from hjblearn.shooting import (CostateGuess, SegmentPlan, boundary_residual, central_jacobian,
                               refine_newton, rollout, rollout_batch, rollout_segmented,
                               shooting_residuals, unstable_lift)

LAM_BRACH = -2.247741383452209
BC_BRACH = BoundaryConditionSet([0.0], [1.0], 1.0)


def test_rollout_reaches_target(brach):
    traj = rollout(brach, BC_BRACH, CostateGuess([LAM_BRACH]))
    assert traj.completed
    assert boundary_residual(traj, BC_BRACH) < 1e-10
    assert traj.times[0] == 0.0 and traj.times[-1] == pytest.approx(1.0)


def test_compiled_and_python_paths_agree(hyper):
    a = rollout_batch(hyper, [1.0], [0.8], 3.0, 300)
    b = rollout_batch(hyper, [1.0], [0.8], 3.0, 300, compiled=False)
    np.testing.assert_allclose(a.final_states, b.final_states, rtol=1e-12)
    np.testing.assert_allclose(a.objectives, b.objectives, rtol=1e-12)


def test_diverged_rollout_has_infinite_residual(hyper):
    bc = BoundaryConditionSet([1.0], [1.5], 2.0)
    traj = rollout(hyper, bc, CostateGuess([0.0]))
    assert not traj.completed
    assert boundary_residual(traj, bc) == np.inf


def test_rollout_dimension_check(hyper):
    with pytest.raises(UsageError):
        rollout(hyper, BoundaryConditionSet([1.0], [1.5], 2.0), CostateGuess([0.0, 1.0]))


def test_newton_recovers_perturbed_label(brach):
    res = refine_newton(brach, BC_BRACH, CostateGuess([LAM_BRACH + 1e-3]), tol=1e-10)
    assert res.converged
    assert res.guess.lambda0[0] == pytest.approx(LAM_BRACH, abs=1e-9)
    assert res.iterations <= 5


def test_central_jacobian_on_linear_map():
    a = np.array([[2.0, -1.0], [0.5, 3.0]])
    base, jac = central_jacobian(lambda pts, rows: pts @ a.T, np.array([[0.3, -0.2]]),
                                 np.zeros(1, dtype=int))
    np.testing.assert_allclose(jac[0], a, rtol=1e-8)
    np.testing.assert_allclose(base[0], a @ [0.3, -0.2])


def test_shooting_residuals_mark_divergence(hyper):
    bc = BoundaryConditionSet([1.0], [1.5], 2.0)
    miss = shooting_residuals(hyper, bc, np.array([[0.0], [0.5344169472157719]]))
    assert np.isnan(miss[0, 0])
    assert abs(miss[1, 0]) < 1e-6


def test_unstable_lift_direction(hyper):
    # unstable eigenvector of the origin is (1, -2): lam = -2 x
    x = unstable_lift(hyper, np.zeros(2), np.array([-0.02]))
    assert x[0] == pytest.approx(0.01, rel=1e-6)


def test_segmented_rollout_single_segment_matches_plain(hyper):
    bc = BoundaryConditionSet([1.0], [1.5], 3.0)
    plan = SegmentPlan(np.array([0.0]), np.array([[0.8]]))
    seg = rollout_segmented(hyper, bc, plan, 500)
    plain = rollout(hyper, bc, CostateGuess([0.8]), 500)
    np.testing.assert_allclose(seg.final_state, plain.final_state, rtol=1e-12)


def test_segmented_rollout_restarts_costate(hyper):
    bc = BoundaryConditionSet([1.0], [1.5], 3.0)
    plan = SegmentPlan(np.array([0.0, 1.0]), np.array([[0.8], [0.1]]))
    traj = rollout_segmented(hyper, bc, plan, 200)
    k = traj.segment_starts[1]
    assert traj.costates[k, 0] == 0.1
    # state is continuous across the cut
    assert traj.states[k, 0] == traj.states[k - 1, 0]


def test_pinned_segment_holds_equilibrium(hyper):
    bc = BoundaryConditionSet([1.0], [1.5], 3.0)
    plan = SegmentPlan(np.array([0.0, 1.0, 2.0]), np.array([[0.8], [0.0], [-0.1]]), pinned=1,
                       equilibrium=np.zeros(2))
    traj = rollout_segmented(hyper, bc, plan, 200)
    k = traj.segment_starts[1]
    assert traj.states[k, 0] == 0.0 and traj.states[k + 1, 0] == 0.0
    assert traj.states[traj.segment_starts[2], 0] == pytest.approx(0.05, rel=1e-6)


@pytest.mark.parametrize("bounds,guesses", [
    ([0.5, 1.0], [[0.0], [0.0]]),
    ([0.0, 0.0], [[0.0], [0.0]]),
    ([0.0, 1.0], [[0.0]]),
])
def test_segment_plan_validation(bounds, guesses):
    with pytest.raises(ConfigurationError):
        SegmentPlan(np.array(bounds), np.array(guesses))


def test_pinned_plan_needs_equilibrium():
    with pytest.raises(ConfigurationError):
        SegmentPlan(np.array([0.0, 1.0]), np.zeros((2, 1)), pinned=0)
