"""Costate shooting: rollouts, boundary residuals and Newton refinement.

A rollout integrates the augmented system ``(x, lam, J)`` with RK4, so the
objective is accumulated with the same stages as the state (Simpson's rule
on each step).  Problems with ``grid_power != 1`` are integrated in the warped
variable ``s`` with ``t = tf * s**grid_power``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .errors import ConfigurationError, LabelingError, UsageError
from .ode import (COMPLETED, DEFAULT_DIVERGENCE_BOUND, DIVERGED, IntegrationGrid,
                  integrate_kernel_rk4, integrate_rk4_batch)
from .problems import BoundaryConditionSet, OcpDefinition, coupled_field

log = logging.getLogger(__name__)

DEFAULT_STEPS = 2000
DIVERGED_RESIDUAL = np.inf


@dataclass
class CostateGuess:
    lambda0: np.ndarray

    def __post_init__(self):
        self.lambda0 = np.atleast_1d(np.asarray(self.lambda0, dtype=float))


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray
    costates: np.ndarray
    controls: np.ndarray
    objective: float
    status: str
    segment_starts: List[int] = field(default_factory=list)

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED


@dataclass
class SegmentPlan:
    """Segment start times with the costate each segment restarts from.

    ``pinned`` marks a segment held at the equilibrium ``p_e`` instead of
    integrated.  ``start_states`` optionally fixes the state a segment starts
    from; ``None`` entries mean "continue from the previous segment".
    """

    boundaries: np.ndarray
    guesses: np.ndarray
    start_states: Optional[List[Optional[np.ndarray]]] = None
    pinned: Optional[int] = None
    equilibrium: Optional[np.ndarray] = None

    def __post_init__(self):
        self.boundaries = np.asarray(self.boundaries, dtype=float)
        self.guesses = np.atleast_2d(np.asarray(self.guesses, dtype=float))
        b = self.boundaries
        if b.ndim != 1 or b.size == 0 or b[0] != 0.0 or np.any(np.diff(b) <= 0):
            raise ConfigurationError("segment boundaries must start at 0 and increase")
        if self.guesses.shape[0] != b.size:
            raise ConfigurationError("one costate guess per segment is required")
        if self.pinned is not None and self.equilibrium is None:
            raise ConfigurationError("a pinned segment needs the equilibrium point")

    @property
    def n_segments(self) -> int:
        return int(self.boundaries.size)


def _warped_field(problem: OcpDefinition, tf: np.ndarray):
    """Augmented (x, lam, J) field in the warped variable for per-row horizons."""
    n = problem.state_dim
    base = coupled_field(problem)
    power = problem.grid_power
    tf = np.asarray(tf, dtype=float).reshape(-1, 1)

    def f(s, z):
        p = z[..., :2 * n]
        if power == 1.0:
            t = tf * s
            scale = tf
        else:
            t = tf * s ** power
            scale = tf * power * s ** (power - 1.0)
        x = p[..., :n]
        lam = p[..., n:]
        u = problem.optimal_control(x, lam, t)
        rates = base(t, p)
        cost = problem.running_cost(x, u, t).reshape(-1, 1)
        return scale * np.concatenate([rates, cost], axis=-1)

    return f


@dataclass
class BatchRollout:
    final_states: np.ndarray
    objectives: np.ndarray
    completed: np.ndarray
    raw: object = None
    final_costates: Optional[np.ndarray] = None


def rollout_batch(problem: OcpDefinition, x_start: np.ndarray, lambda0: np.ndarray,
                  tf, steps: int = DEFAULT_STEPS,
                  divergence_bound: float = DEFAULT_DIVERGENCE_BOUND,
                  keep_samples: bool = False, compiled: bool = True) -> BatchRollout:
    """Integrate many ``(x_start, lambda0)`` pairs over ``[0, tf]`` at once.

    ``x_start`` is the state the integration begins from (already
    regularised).  ``tf`` is a scalar or one value per row.  Problems that
    ship a compiled kernel use it unless ``compiled=False``; both paths give
    the same samples up to rounding.
    """
    x_start = np.atleast_2d(np.asarray(x_start, dtype=float))
    lambda0 = np.atleast_2d(np.asarray(lambda0, dtype=float))
    batch = max(x_start.shape[0], lambda0.shape[0])
    x_start = np.broadcast_to(x_start, (batch, problem.state_dim))
    lambda0 = np.broadcast_to(lambda0, (batch, problem.state_dim))
    tf = np.broadcast_to(np.asarray(tf, dtype=float), (batch,))
    z0 = np.concatenate([x_start, lambda0, np.zeros((batch, 1))], axis=1)
    if compiled and problem.kernel is not None:
        out = integrate_kernel_rk4(problem.kernel, z0, tf, int(steps), problem.grid_power,
                                   problem.kernel_params or (0.0,), divergence_bound,
                                   keep=keep_samples)
    else:
        grid = IntegrationGrid(0.0, 1.0, step_count=int(steps))
        out = integrate_rk4_batch(_warped_field(problem, tf), z0, grid, divergence_bound)
    final = out.states[-1]
    n = problem.state_dim
    return BatchRollout(final[:, :n].copy(), final[:, -1].copy(), out.completed,
                        out if keep_samples else None, final[:, n:2 * n].copy())


def _trajectory_from_samples(problem, s, z, tf, status, t_offset=0.0) -> Trajectory:
    n = problem.state_dim
    if problem.grid_power == 1.0:
        times = tf * s
    else:
        times = tf * s ** problem.grid_power
    x = z[:, :n]
    lam = z[:, n:2 * n]
    with np.errstate(all="ignore"):
        u = problem.optimal_control(x, lam, times[:, None])
    u = np.broadcast_to(u, (len(s), problem.control_dim)).copy()
    return Trajectory(times + t_offset, x.copy(), lam.copy(), u, float(z[-1, -1]), status)


def rollout(problem: OcpDefinition, bc: BoundaryConditionSet, guess, steps: int = DEFAULT_STEPS,
            divergence_bound: float = DEFAULT_DIVERGENCE_BOUND) -> Trajectory:
    """Integrate the coupled field from ``(x0, lambda0)`` over ``[0, tf]``."""
    if int(steps) < 1:
        raise ConfigurationError("steps must be >= 1")
    lam0 = guess.lambda0 if isinstance(guess, CostateGuess) else np.atleast_1d(guess)
    lam0 = np.asarray(lam0, dtype=float)
    if bc.x0.shape != (problem.state_dim,) or lam0.shape != (problem.state_dim,):
        raise UsageError("boundary/costate dimension does not match the problem")
    x_start = problem.initial_state(bc)
    res = rollout_batch(problem, x_start, lam0, bc.tf, steps, divergence_bound, keep_samples=True)
    row = res.raw.row(0)
    traj = _trajectory_from_samples(problem, row.times, row.states, bc.tf, row.status)
    if problem.entry_cost is not None and traj.completed:
        traj.objective += float(problem.entry_cost(bc.x0, x_start, lam0))
    traj.segment_starts = [0]
    return traj


def boundary_residual(traj: Trajectory, bc: BoundaryConditionSet) -> float:
    """Max-norm terminal miss distance; ``inf`` for a diverged trajectory."""
    if not traj.completed:
        return DIVERGED_RESIDUAL
    return float(np.max(np.abs(traj.final_state - bc.xf)))


def unstable_lift(problem: OcpDefinition, equilibrium: np.ndarray, lam: np.ndarray,
                  h: float = 1e-6) -> np.ndarray:
    """State on the linearised unstable subspace of ``equilibrium`` matching ``lam``.

    Used to leave a pinned equilibrium segment: the costate label fixes the
    unstable-mode amplitude, which in turn fixes the state.
    """
    n = problem.state_dim
    pe = np.asarray(equilibrium, dtype=float)
    jac = numerical_jacobian(coupled_field(problem), pe, h)
    vals, vecs = np.linalg.eig(jac)
    unstable = np.real(vals) > 0
    if unstable.sum() != n:
        raise ConfigurationError("equilibrium is not a hyperbolic saddle")
    v = np.real(vecs[:, unstable])
    coeff = np.linalg.solve(v[n:], np.asarray(lam, dtype=float) - pe[n:])
    return pe[:n] + v[:n] @ coeff


def numerical_jacobian(field_fn, p: np.ndarray, h: float = 1e-6) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    m = p.size
    pts = np.concatenate([p + h * np.eye(m), p - h * np.eye(m)])
    vals = field_fn(0.0, pts)
    return ((vals[:m] - vals[m:]) / (2 * h)).T


def rollout_segmented(problem: OcpDefinition, bc: BoundaryConditionSet, plan: SegmentPlan,
                      steps_per_segment: int = 500,
                      divergence_bound: float = DEFAULT_DIVERGENCE_BOUND) -> Trajectory:
    """Chain per-segment rollouts; the state is continuous, the costate restarts.

    A pinned segment holds ``plan.equilibrium`` for its whole interval.  The
    segment after it starts from the unstable-subspace lift of its costate
    unless ``plan.start_states`` supplies the state.
    """
    if plan.boundaries[-1] >= bc.tf:
        raise ConfigurationError("last segment boundary must lie before tf")
    n = problem.state_dim
    ends = np.append(plan.boundaries[1:], bc.tf)
    pieces_t, pieces_x, pieces_l, pieces_u = [], [], [], []
    starts = []
    objective = 0.0
    x_cur = problem.initial_state(bc)
    status = COMPLETED
    count = 0
    for k, (t0, t1) in enumerate(zip(plan.boundaries, ends)):
        lam = plan.guesses[k]
        given = plan.start_states[k] if plan.start_states is not None else None
        if given is not None:
            x_cur = np.asarray(given, dtype=float)
        elif k > 0 and plan.pinned == k - 1:
            x_cur = unstable_lift(problem, plan.equilibrium, lam)
        starts.append(count)
        if plan.pinned == k:
            pe = np.asarray(plan.equilibrium, dtype=float)
            times = np.array([t0, t1])
            xs = np.tile(pe[:n], (2, 1))
            ls = np.tile(pe[n:], (2, 1))
            us = problem.optimal_control(xs, ls, times[:, None])
            g = problem.running_cost(xs, us, times[:, None])
            objective += float(np.mean(g) * (t1 - t0))
            pieces_t.append(times); pieces_x.append(xs); pieces_l.append(ls)
            pieces_u.append(np.broadcast_to(us, (2, problem.control_dim)))
            count += 2
            x_cur = pe[:n].copy()
            continue
        sub_bc = BoundaryConditionSet(x_cur, bc.xf, t1 - t0)
        if k == 0:
            seg = rollout(problem, BoundaryConditionSet(bc.x0, bc.xf, t1 - t0), lam,
                          steps_per_segment, divergence_bound)
        else:
            seg = _rollout_from_state(problem, x_cur, lam, sub_bc.tf, steps_per_segment,
                                      divergence_bound)
        pieces_t.append(seg.times + t0); pieces_x.append(seg.states)
        pieces_l.append(seg.costates); pieces_u.append(seg.controls)
        count += len(seg.times)
        objective += seg.objective
        if not seg.completed:
            status = DIVERGED
            break
        x_cur = seg.final_state.copy()
    traj = Trajectory(np.concatenate(pieces_t), np.concatenate(pieces_x),
                      np.concatenate(pieces_l), np.concatenate(pieces_u), objective, status)
    traj.segment_starts = starts
    return traj


def _rollout_from_state(problem, x_start, lam0, tf, steps, bound) -> Trajectory:
    res = rollout_batch(problem, x_start, lam0, tf, steps, bound, keep_samples=True)
    row = res.raw.row(0)
    return _trajectory_from_samples(problem, row.times, row.states, tf, row.status)


@dataclass
class NewtonResult:
    guess: CostateGuess
    residual: float
    converged: bool
    iterations: int


def shooting_residuals(problem: OcpDefinition, bc: BoundaryConditionSet, lambdas: np.ndarray,
                       steps: int = DEFAULT_STEPS,
                       divergence_bound: float = DEFAULT_DIVERGENCE_BOUND) -> np.ndarray:
    """Signed terminal misses ``x(tf) - xf`` for a batch of costate guesses; NaN rows diverged."""
    x_start = problem.initial_state(bc)
    res = rollout_batch(problem, x_start, lambdas, bc.tf, steps, divergence_bound)
    miss = res.final_states - bc.xf
    miss[~res.completed] = np.nan
    return miss


FD_MISS = 1e-4


def central_jacobian(miss_fn, lam: np.ndarray, rows: np.ndarray, fd_step: float = 1e-7,
                     max_move: float = FD_MISS):
    """Terminal miss and its central-difference Jacobian for a batch of costates.

    ``miss_fn(points, rows)`` returns misses of shape ``(m, n)`` (NaN when
    diverged) for costates ``points`` belonging to boundary sets ``rows``.
    The step starts at ``fd_step * max(1, |lam|)`` and shrinks until one
    perturbation moves the miss by at most ``max_move``: hypersensitive
    rollouts leave the linear regime long before rounding noise dominates.
    """
    lam = np.atleast_2d(lam)
    k, n = lam.shape
    eye = np.eye(n)
    scale = np.maximum(1.0, np.abs(lam))
    lo = 16.0 * np.finfo(float).eps * scale

    def central(h):
        pts = np.concatenate([lam] + [lam + h[:, [j]] * eye[j] for j in range(n)]
                             + [lam - h[:, [j]] * eye[j] for j in range(n)])
        m = miss_fn(pts, np.tile(rows, 2 * n + 1))
        jac = np.empty((k, n, n))
        for j in range(n):
            jac[:, :, j] = (m[(1 + j) * k:(2 + j) * k] - m[(1 + n + j) * k:(2 + n + j) * k]) \
                / (2 * h[:, [j]])
        return m[:k], jac

    h = fd_step * scale
    base, jac = central(h)
    for _ in range(3):
        col = np.max(np.abs(np.nan_to_num(jac, nan=np.inf)), axis=1)
        too_big = col * h > max_move
        if not too_big.any():
            break
        with np.errstate(divide="ignore"):
            h = np.where(too_big, np.maximum(lo, max_move / col), h)
        base, jac = central(h)
    return base, jac


def refine_newton(problem: OcpDefinition, bc: BoundaryConditionSet, guess, max_iters: int = 20,
                  tol: float = 1e-10, steps: int = DEFAULT_STEPS, fd_step: float = 1e-7,
                  divergence_bound: float = DEFAULT_DIVERGENCE_BOUND,
                  raise_on_failure: bool = False) -> NewtonResult:
    """Damped Newton on the terminal miss with a finite-difference Jacobian.

    Returns the best iterate with ``converged=False`` when the tolerance is not
    met.  With ``raise_on_failure`` a start whose every iterate diverges raises
    :class:`LabelingError`.
    """
    lam = CostateGuess(guess.lambda0 if isinstance(guess, CostateGuess) else guess).lambda0.copy()
    rows = np.zeros(1, dtype=int)

    def miss_and_jac(l0):
        base, jac = central_jacobian(
            lambda pts, _: shooting_residuals(problem, bc, pts, steps, divergence_bound),
            l0[None], rows, fd_step)
        return base[0], jac[0]

    miss, jac = miss_and_jac(lam)
    best = (np.inf if np.any(np.isnan(miss)) else float(np.max(np.abs(miss))), lam.copy())
    it = 0
    while it < max_iters and best[0] > tol:
        if np.any(np.isnan(miss)) or np.any(~np.isfinite(jac)):
            break
        try:
            delta = np.linalg.solve(jac, -miss)
        except np.linalg.LinAlgError:
            break
        it += 1
        step = 1.0
        cur = float(np.max(np.abs(miss)))
        accepted = False
        # backtrack until the miss shrinks; hypersensitive rollouts may diverge on a full step
        for _ in range(30):
            trial = lam + step * delta
            m_trial = shooting_residuals(problem, bc, trial[None], steps, divergence_bound)[0]
            if not np.any(np.isnan(m_trial)) and np.max(np.abs(m_trial)) < cur:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            break
        lam = trial
        miss, jac = miss_and_jac(lam)
        r = float(np.max(np.abs(miss))) if not np.any(np.isnan(miss)) else np.inf
        if r < best[0]:
            best = (r, lam.copy())
    if raise_on_failure and not np.isfinite(best[0]):
        raise LabelingError("every Newton iterate diverged")
    return NewtonResult(CostateGuess(best[1]), best[0], best[0] <= tol, it)


def segment_plan_from_trajectory(traj: Trajectory, boundaries: Sequence[float]) -> SegmentPlan:
    """Costates read off a trajectory at the requested segment start times."""
    boundaries = np.asarray(boundaries, dtype=float)
    idx = [int(np.argmin(np.abs(traj.times - b))) for b in boundaries]
    return SegmentPlan(traj.times[idx] - traj.times[0], traj.costates[idx])
