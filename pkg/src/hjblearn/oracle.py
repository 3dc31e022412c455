"""Ground-truth initial costates.

Brachistochrone labels come from the cycloid through the regularised start
point.  Hypersensitive labels come from Newton shooting continued in the
horizon length, followed by a three-phase split (stable approach, dwell at the
equilibrium, unstable departure) and per-segment costate read-off.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import brentq, root

from .errors import (InfeasibleGeometryError, LabelingError, NotHypersensitiveError,
                     UsageError)
from .problems import BoundaryConditionSet, OcpDefinition, coupled_field
from .shooting import (DEFAULT_STEPS, CostateGuess, central_jacobian, SegmentPlan, Trajectory,
                       refine_newton, rollout_batch, unstable_lift)

log = logging.getLogger(__name__)

MACHINE_EPS = np.finfo(float).eps
STAGE_LENGTH = 0.5


@dataclass(frozen=True)
class CycloidSolution:
    radius: float
    theta_f: float
    transit_time: float
    gravity: float = 9.81

    def point(self, theta):
        """Cycloid point ``(x, y)`` at roll angle ``theta`` (cusp at the origin)."""
        return (self.radius * (theta - np.sin(theta)), self.radius * (1.0 - np.cos(theta)))


def _one_minus_cos(theta):
    return 2.0 * np.sin(0.5 * theta) ** 2


def _theta_minus_sin(theta):
    if theta < 1e-2:
        t2 = theta * theta
        return theta * t2 / 6.0 * (1.0 - t2 / 20.0 * (1.0 - t2 / 42.0 * (1.0 - t2 / 72.0)))
    return theta - np.sin(theta)


def _cycloid_ratio(theta):
    # cancellation-free forms keep the ratio accurate near the cusp
    return _one_minus_cos(theta) / _theta_minus_sin(theta)


def solve_cycloid(dx: float, dy: float, gravity: float = 9.81) -> CycloidSolution:
    """Cycloid from rest at the origin through ``(dx, dy)`` (``y`` downward).

    The end angle solves ``(1 - cos t) / (t - sin t) = dy / dx`` by bisection;
    the ratio decreases monotonically from infinity to zero on ``(0, 2 pi)``.
    """
    if not (dx > 0 and dy > 0):
        raise InfeasibleGeometryError(
            f"need a target right of and below the start, got dx={dx}, dy={dy}")
    ratio = dy / dx
    lo, hi = 1e-8, 2.0 * np.pi - 1e-12
    if not (_cycloid_ratio(hi) < ratio < _cycloid_ratio(lo)):
        raise InfeasibleGeometryError(f"slope ratio {ratio} has no cycloid in (0, 2pi)")
    theta = brentq(lambda t: _cycloid_ratio(t) - ratio, lo, hi, xtol=1e-15, rtol=4 * MACHINE_EPS,
                   maxiter=500)
    radius = float(dy / _one_minus_cos(theta))
    return CycloidSolution(radius, theta, theta * math.sqrt(radius / gravity), gravity)


def solve_cycloid_bc(bc: BoundaryConditionSet, gravity: float = 9.81) -> CycloidSolution:
    """Cycloid for a Brachistochrone boundary set: start ``(0, y0)``, end ``(tf, yf)``."""
    return solve_cycloid(bc.tf, float(bc.xf[0] - bc.x0[0]), gravity)


def _shifted_cycloid(y_start: float, dx: float, yf: float, guess: CycloidSolution):
    """Cycloid with cusp left of x=0 passing through ``(0, y_start)`` and ``(dx, yf)``.

    Returns ``(radius, theta_start, theta_end)`` or ``None`` when the bracket
    fails (the caller then keeps the unshifted cycloid).
    """

    def geometry(theta_end):
        radius = yf / (1.0 - math.cos(theta_end))
        c = 1.0 - y_start / radius
        if c < -1.0:
            return None
        theta_start = math.acos(c)
        span = radius * (theta_end - math.sin(theta_end) - theta_start + math.sin(theta_start))
        return radius, theta_start, span

    def miss(theta_end):
        g = geometry(theta_end)
        return np.nan if g is None else g[2] - dx

    t0 = guess.theta_f
    lo, hi = max(1e-6, t0 - 0.5), min(2.0 * np.pi - 1e-9, t0 + 0.5)
    f_lo, f_hi = miss(lo), miss(hi)
    if not (np.isfinite(f_lo) and np.isfinite(f_hi)) or f_lo * f_hi > 0:
        return None
    theta_end = brentq(miss, lo, hi, xtol=1e-15, rtol=4 * MACHINE_EPS, maxiter=500)
    radius, theta_start, _ = geometry(theta_end)
    return radius, theta_start, theta_end


def cycloid_initial_costate(sol: CycloidSolution, bc: BoundaryConditionSet,
                            problem: Optional[OcpDefinition] = None,
                            refine: bool = True, steps: int = DEFAULT_STEPS) -> CostateGuess:
    """Costate at the regularised start depth along the optimal cycloid.

    Along a cycloid of radius ``R`` the costate is ``-cot(theta/2)/sqrt(4 g R)``.
    The start depth shifts the cusp slightly left of ``x = 0``; that shifted
    cycloid is solved exactly.  With ``refine`` a few Newton steps on the
    discrete rollout remove the remaining integrator truncation error.
    """
    g = sol.gravity
    y_start = float(problem.initial_state(bc)[0]) if problem is not None else float(bc.x0[0])
    yf = float(bc.xf[0])
    theta_s = None
    shifted = _shifted_cycloid(y_start, bc.tf, yf, sol) if y_start > 0 else None
    if shifted is not None:
        radius, theta_s, _ = shifted
    else:
        radius = sol.radius
        if y_start > 0:
            theta_s = 2.0 * math.asin(min(1.0, math.sqrt(y_start / (2.0 * radius))))
    if theta_s is None or theta_s == 0.0:
        # start exactly at the cusp: the costate is unbounded there
        return CostateGuess([-np.inf])
    lam = -1.0 / math.tan(0.5 * theta_s) / math.sqrt(4.0 * g * radius)
    guess = CostateGuess([lam])
    if refine and problem is not None:
        res = refine_newton(problem, bc, guess, max_iters=10, tol=1e-12, steps=steps)
        if np.isfinite(res.residual):
            guess = res.guess
    return guess


# ---------------------------------------------------------------------------
# Hypersensitive labeling by continuation in the horizon


def _attainable(jac: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Residual floor set by rounding in ``lambda0`` times the shooting sensitivity."""
    scale = np.maximum(1.0, np.max(np.abs(lam), axis=-1))
    return 64.0 * MACHINE_EPS * np.max(np.abs(jac), axis=(-2, -1)) * scale


def _accept(resid, floor, tol):
    limit = np.maximum(tol, np.where(np.isfinite(floor), floor, tol))
    return np.isfinite(resid) & (resid <= limit)


def linear_costate_guess(x0, xf, tf) -> np.ndarray:
    """Initial costate of the problem linearised about the origin.

    With ``xdot = -lam/2`` and ``lamdot = -2x`` the solution is
    ``x = A e^t + B e^-t`` and ``lam = -2 xdot``.
    """
    x0 = np.asarray(x0, dtype=float)
    xf = np.asarray(xf, dtype=float)
    tf = np.asarray(tf, dtype=float)
    if x0.ndim > tf.ndim:
        tf = tf[..., None]
    e = np.exp(-tf)
    a = (xf - x0 * e) * e / (1.0 - e * e)
    b = x0 - a
    return -2.0 * (a - b)


def newton_batch(problem: OcpDefinition, x_start: np.ndarray, xf: np.ndarray, tf: np.ndarray,
                 lam: np.ndarray, steps: int = DEFAULT_STEPS, tol: float = 1e-8,
                 max_iters: int = 30, fd_step: float = 1e-7):
    """Damped Newton shooting for many boundary sets at once.

    Returns ``(lam, residual, accepted)``.  A row is accepted when its
    residual reaches ``max(tol, floor)`` where ``floor`` is the rounding
    limit of a float64 costate pushed through the shooting Jacobian.
    """
    x_start = np.atleast_2d(x_start).astype(float)
    xf = np.atleast_2d(xf).astype(float)
    lam = np.atleast_2d(lam).astype(float).copy()
    batch, n = lam.shape
    x_start = np.broadcast_to(x_start, (batch, n))
    xf = np.broadcast_to(xf, (batch, n))
    tf = np.broadcast_to(np.asarray(tf, dtype=float), (batch,))

    def misses(l, rows):
        out = rollout_batch(problem, x_start[rows], l, tf[rows], steps)
        m = out.final_states - xf[rows]
        m[~out.completed] = np.nan
        return m

    def miss_jac(l, rows):
        return central_jacobian(misses, l, rows, fd_step)

    rows = np.arange(batch)
    miss, jac = miss_jac(lam, rows)
    resid = np.where(np.any(np.isnan(miss), axis=1), np.inf, np.max(np.abs(miss), axis=1))
    floor = np.where(np.all(np.isfinite(jac), axis=(1, 2)), _attainable(jac, lam), np.inf)
    active = ~_accept(resid, floor, tol) & np.isfinite(resid)
    for _ in range(max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        j_a = jac[idx]
        ok = np.all(np.isfinite(j_a), axis=(1, 2)) & (np.abs(np.linalg.det(j_a)) > 0)
        delta = np.zeros((idx.size, n))
        if ok.any():
            delta[ok] = np.linalg.solve(j_a[ok], -miss[idx[ok]][..., None])[..., 0]
        step = np.ones(idx.size)
        accepted = np.zeros(idx.size, dtype=bool)
        pending = ok.copy()
        trial = lam[idx].copy()
        for _ in range(40):
            p = np.flatnonzero(pending)
            if p.size == 0:
                break
            cand = lam[idx[p]] + step[p, None] * delta[p]
            m = misses(cand, idx[p])
            r = np.where(np.any(np.isnan(m), axis=1), np.inf, np.max(np.abs(m), axis=1))
            good = r < resid[idx[p]]
            trial[p[good]] = cand[good]
            accepted[p[good]] = True
            pending[p[good]] = False
            step[p[~good]] *= 0.5
        stalled = idx[~accepted]
        active[stalled] = False
        moved = idx[accepted]
        if moved.size:
            lam[moved] = trial[accepted]
            m, jc = miss_jac(lam[moved], moved)
            miss[moved] = m
            jac[moved] = jc
            resid[moved] = np.where(np.any(np.isnan(m), axis=1), np.inf,
                                    np.max(np.abs(m), axis=1))
            floor[moved] = np.where(np.all(np.isfinite(jc), axis=(1, 2)),
                                    _attainable(jc, lam[moved]), np.inf)
            active[moved] = ~_accept(resid[moved], floor[moved], tol)
    accepted_rows = _accept(resid, floor, tol)
    return lam, resid, accepted_rows


def continuation_schedule(target: float, first: float = STAGE_LENGTH, step: float = STAGE_LENGTH) -> np.ndarray:
    """Horizons ``first, first + step, ..., target`` (target always included)."""
    if target <= first:
        return np.array([float(target)])
    sched = np.arange(first, target, step)
    return np.append(sched, float(target))


def _ramp(x_start, xf, frac):
    """Intermediate target used at a fraction of the final horizon."""
    return x_start + (np.asarray(xf) - x_start) * frac


def _predict(history, tf):
    """Secant extrapolation of the costate from the last two accepted horizons."""
    (t0, l0), (t1, l1) = history
    return l1 + (l1 - l0) * ((tf - t1) / (t1 - t0))


def _continue(problem, bc, sched, steps, tol, min_step, ramp):
    x_start = problem.initial_state(bc)

    def target_at(tf):
        return _ramp(x_start, bc.xf, tf / bc.tf) if ramp else bc.xf

    lam = linear_costate_guess(x_start, target_at(sched[0]), sched[0])[None, :]
    prev_tf = None
    history = []
    queue = list(sched)
    while queue:
        tf = queue.pop(0)
        steps_k = max(50, int(round(steps * tf / bc.tf)))
        target = target_at(tf)
        start = _predict(history, tf) if len(history) == 2 else lam
        cand, resid, ok = newton_batch(problem, x_start, target, np.array([tf]), start, steps_k, tol)
        if not ok[0] and len(history) == 2:
            cand, resid, ok = newton_batch(problem, x_start, target, np.array([tf]), lam,
                                           steps_k, tol)
        if ok[0]:
            lam = cand
            prev_tf = tf
            history = (history + [(tf, cand)])[-2:]
            continue
        if prev_tf is None or tf - prev_tf < min_step:
            raise LabelingError(
                f"continuation stalled at tf={tf:.4g} (residual {resid[0]:.3g})")
        queue = [0.5 * (prev_tf + tf), tf] + queue
    return lam[0]


def solve_hypersensitive_label(problem: OcpDefinition, bc: BoundaryConditionSet,
                               tf_grid: Optional[Sequence[float]] = None,
                               steps: int = DEFAULT_STEPS, tol: float = 1e-8,
                               min_step: float = 0.05) -> CostateGuess:
    """Initial costate for a long horizon by warm-started Newton continuation.

    Newton starts from :func:`linear_costate_guess` on the first (short)
    horizon; later horizons start from the secant prediction of the last two
    solutions.  A failed step is retried with the increment halved.  ``steps``
    applies to the target horizon; shorter stages use proportionally fewer.

    The target is held at ``bc.xf`` first.  If that path stalls, the whole
    continuation is repeated with the target moved linearly from ``x0`` to
    ``xf`` along with the horizon, which avoids the large early swings that
    blow up for targets far from ``x0``.
    """
    sched = list(continuation_schedule(bc.tf) if tf_grid is None else tf_grid)
    if any(b <= a for a, b in zip(sched, sched[1:])):
        raise UsageError("continuation schedule must be strictly increasing")
    if abs(sched[-1] - bc.tf) > 1e-12:
        sched.append(bc.tf)
    try:
        return CostateGuess(_continue(problem, bc, sched, steps, tol, min_step, ramp=False))
    except LabelingError as first:
        try:
            return CostateGuess(_continue(problem, bc, sched, steps, tol, min_step, ramp=True))
        except LabelingError as second:
            raise LabelingError(f"fixed target: {first}; ramped target: {second}") from None


def label_hypersensitive_batch(problem: OcpDefinition, x0: np.ndarray, xf: np.ndarray,
                               tf: np.ndarray, n_stages: Optional[int] = None,
                               steps: int = DEFAULT_STEPS, tol: float = 1e-8):
    """Continuation for many boundary sets sharing one stage count.

    Stage ``k`` of ``K`` uses horizon ``tf * k / K`` per row; the default
    ``K`` keeps every increment at or below half a time unit.  From the third
    stage on, Newton starts from the secant prediction.  Rows that fail are
    retried one by one with :func:`solve_hypersensitive_label`.  Returns
    ``(lam0, ok)``.
    """
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    xf = np.atleast_2d(np.asarray(xf, dtype=float))
    tf = np.atleast_1d(np.asarray(tf, dtype=float))
    batch = tf.size
    x0 = np.broadcast_to(x0, (batch, problem.state_dim))
    xf = np.broadcast_to(xf, (batch, problem.state_dim))
    if n_stages is None:
        n_stages = max(1, int(math.ceil(tf.max() / STAGE_LENGTH)))
    x_start = np.stack([problem.initial_state(BoundaryConditionSet(a, b, c))
                        for a, b, c in zip(x0, xf, tf)])
    lam = linear_costate_guess(x_start, xf, tf / n_stages)
    prev = lam.copy()
    ok = np.ones(batch, dtype=bool)
    for k in range(1, n_stages + 1):
        frac = k / n_stages
        steps_k = max(50, int(round(steps * frac)))
        idx = np.flatnonzero(ok)
        if idx.size == 0:
            break
        # equal stage fractions make the secant step a plain difference
        start = 2.0 * lam[idx] - prev[idx] if k > 2 else lam[idx]
        target = xf[idx]
        cand, _, acc = newton_batch(problem, x_start[idx], target, tf[idx] * frac, start,
                                    steps_k, tol)
        if k > 2 and not acc.all():
            miss = np.flatnonzero(~acc)
            c2, _, a2 = newton_batch(problem, x_start[idx[miss]], target[miss],
                                     tf[idx[miss]] * frac, lam[idx[miss]], steps_k, tol)
            cand[miss] = c2
            acc[miss] = a2
        prev[idx[acc]] = lam[idx[acc]]
        lam[idx[acc]] = cand[acc]
        ok[idx[~acc]] = False
    for b in np.flatnonzero(~ok):
        try:
            bc = BoundaryConditionSet(x0[b], xf[b], tf[b])
            lam[b] = solve_hypersensitive_label(problem, bc, steps=steps, tol=tol).lambda0
            ok[b] = True
        except LabelingError as exc:
            log.info("label %d dropped: %s", b, exc)
    return lam, ok


# ---------------------------------------------------------------------------
# Three-phase structure


@dataclass(frozen=True)
class PhaseSplit:
    t_ib: float
    t_fb: float
    p_e: np.ndarray


def find_equilibrium(problem: OcpDefinition, guess: np.ndarray) -> np.ndarray:
    field_fn = coupled_field(problem)
    sol = root(lambda p: field_fn(0.0, p[None, :])[0], np.asarray(guess, dtype=float),
               method="hybr", tol=1e-14)
    p_e = np.asarray(sol.x, dtype=float)
    # flush subnormal noise so an equilibrium at the origin reads as exact zeros
    return np.where(np.abs(p_e) < np.finfo(float).tiny, 0.0, p_e)


def split_phases(problem: OcpDefinition, traj: Trajectory, epsilon: float = 1e-3) -> PhaseSplit:
    """Locate the equilibrium and the first/last times the path is within ``epsilon`` of it."""
    if not traj.completed:
        raise UsageError("phase splitting needs a completed trajectory")
    p = np.concatenate([traj.states, traj.costates], axis=1)
    field_fn = coupled_field(problem)
    speed = np.linalg.norm(field_fn(0.0, p), axis=1)
    p_e = find_equilibrium(problem, p[int(np.nanargmin(speed))])
    if np.linalg.norm(field_fn(0.0, p_e[None])[0]) > 1e-8:
        raise NotHypersensitiveError("no equilibrium found near the slowest point")
    dist = np.linalg.norm(p - p_e, axis=1)
    inside = np.flatnonzero(dist <= epsilon)
    if inside.size == 0:
        raise NotHypersensitiveError(
            f"trajectory stays at least {dist.min():.3g} from the equilibrium "
            f"(epsilon={epsilon})")
    t_ib = float(traj.times[inside[0]])
    t_fb = float(traj.times[inside[-1]])
    if not (traj.times[0] < t_ib < t_fb < traj.times[-1]):
        raise NotHypersensitiveError("equilibrium dwell touches the horizon ends")
    return PhaseSplit(t_ib, t_fb, p_e)


def state_at(problem: OcpDefinition, traj: Trajectory, times: Sequence[float],
             sub_steps: int = 4) -> np.ndarray:
    """``(x, lambda)`` at arbitrary times, integrated from the preceding sample."""
    times = np.asarray(times, dtype=float)
    n = problem.state_dim
    idx = np.clip(np.searchsorted(traj.times, times, side="right") - 1, 0, len(traj.times) - 1)
    out = np.concatenate([traj.states[idx], traj.costates[idx]], axis=1)
    gap = times - traj.times[idx]
    need = gap > 0
    if need.any():
        res = rollout_batch(problem, out[need, :n], out[need, n:], gap[need], sub_steps,
                            keep_samples=True)
        out[need] = res.raw.states[-1][:, :2 * n]
    return out


def segment_boundaries(t_ib: float, t_fb: float, tf: float, n_per_phase: int) -> np.ndarray:
    """Stable phase cut into ``n`` pieces, one dwell segment, unstable phase cut into ``n``."""
    stable = t_ib * np.arange(n_per_phase) / n_per_phase
    unstable = t_fb + (tf - t_fb) * np.arange(n_per_phase) / n_per_phase
    return np.concatenate([stable, [t_ib], unstable])


def extract_segment_labels(problem: OcpDefinition, traj: Trajectory, split: PhaseSplit,
                           n_per_phase: int = 6, keep_start_states: bool = True) -> SegmentPlan:
    """Segment plan whose costates are read off ``traj`` at each cut point.

    The dwell segment is pinned at ``split.p_e``.  With ``keep_start_states``
    the segment after the dwell also records the trajectory state, which
    makes a segmented rollout reproduce ``traj`` exactly; without it the
    rollout leaves the dwell along the unstable subspace.
    """
    if n_per_phase < 1:
        raise UsageError("n_per_phase must be >= 1")
    n = problem.state_dim
    tf = float(traj.times[-1])
    bounds = segment_boundaries(split.t_ib, split.t_fb, tf, n_per_phase)
    p = state_at(problem, traj, bounds)
    guesses = p[:, n:].copy()
    guesses[n_per_phase] = split.p_e[n:]
    starts = None
    if keep_start_states:
        starts = [None] * len(bounds)
        starts[n_per_phase + 1] = p[n_per_phase + 1, :n].copy()
    return SegmentPlan(bounds, guesses, starts, pinned=n_per_phase, equilibrium=split.p_e.copy())


def polish_unstable_labels(problem: OcpDefinition, bc: BoundaryConditionSet, plan: SegmentPlan,
                           steps_per_segment: int = 500, tol: float = 1e-12,
                           max_iters: int = 20) -> SegmentPlan:
    """Re-solve the segments after the pinned dwell so the chain meets ``xf``.

    Costates read off a single-shot trajectory inherit its terminal miss.
    Here Newton adjusts the first post-dwell costate, the state is lifted
    from it onto the unstable subspace, and the later labels are read from
    the resulting continuous chain.  The unstable phase alone is short
    enough to be well conditioned.  The segmented rollout of the returned
    plan therefore reproduces the chain's terminal state exactly.
    """
    if plan.pinned is None:
        raise UsageError("plan has no pinned equilibrium segment")
    k0 = plan.pinned + 1
    if k0 >= plan.n_segments:
        raise UsageError("no segments follow the pinned dwell")
    ends = np.append(plan.boundaries[1:], bc.tf)
    lengths = ends[k0:] - plan.boundaries[k0:]

    def chain(lam_u):
        lam_u = np.atleast_2d(lam_u)
        x = np.stack([unstable_lift(problem, plan.equilibrium, l) for l in lam_u])
        lam = lam_u.copy()
        labels = []
        ok = np.ones(len(lam_u), dtype=bool)
        for length in lengths:
            labels.append(lam.copy())
            res = rollout_batch(problem, x, lam, length, steps_per_segment)
            ok &= res.completed
            x, lam = res.final_states, res.final_costates
        return x, np.stack(labels, axis=1), ok

    def misses(pts, rows):
        x, _, ok = chain(pts)
        m = x - bc.xf
        m[~ok] = np.nan
        return m

    lam_u = plan.guesses[k0].copy()
    rows = np.zeros(1, dtype=int)
    miss, jac = central_jacobian(misses, lam_u[None], rows)
    for _ in range(max_iters):
        if not np.all(np.isfinite(miss)) or np.max(np.abs(miss)) <= tol:
            break
        try:
            delta = np.linalg.solve(jac[0], -miss[0])
        except np.linalg.LinAlgError:
            break
        step = 1.0
        cur = np.max(np.abs(miss))
        for _ in range(30):
            trial = lam_u + step * delta
            m = misses(trial[None], rows)
            if np.all(np.isfinite(m)) and np.max(np.abs(m)) < cur:
                break
            step *= 0.5
        else:
            break
        lam_u = trial
        miss, jac = central_jacobian(misses, lam_u[None], rows)
    _, labels, _ = chain(lam_u[None])
    guesses = plan.guesses.copy()
    guesses[k0:] = labels[0]
    starts = None
    if plan.start_states is not None:
        starts = list(plan.start_states)
        starts[k0] = None
    return SegmentPlan(plan.boundaries.copy(), guesses, starts, plan.pinned,
                       plan.equilibrium.copy())
