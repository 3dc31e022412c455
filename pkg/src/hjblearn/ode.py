"""Explicit Runge-Kutta integration with divergence detection.

Vector fields take ``(t, y)`` where ``y`` has shape ``(batch, n)`` and return an
array of the same shape.  Every integrator stops a trajectory the first time a
component is non-finite or its max-norm exceeds ``divergence_bound``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numba import njit
from scipy.integrate import RK45

from .errors import ConfigurationError

VectorField = Callable[[float, np.ndarray], np.ndarray]

COMPLETED = "completed"
DIVERGED = "diverged"
DEFAULT_DIVERGENCE_BOUND = 1e6


@dataclass(frozen=True)
class IntegrationGrid:
    """Integration interval plus either a fixed step count or a tolerance."""

    t_start: float
    t_end: float
    step_count: Optional[int] = None
    tolerance: Optional[float] = None

    def __post_init__(self):
        if not (np.isfinite(self.t_start) and np.isfinite(self.t_end)):
            raise ConfigurationError("grid bounds must be finite")
        if self.t_end <= self.t_start:
            raise ConfigurationError(
                f"t_end ({self.t_end}) must exceed t_start ({self.t_start})")
        if self.step_count is None and self.tolerance is None:
            raise ConfigurationError("grid needs step_count or tolerance")
        if self.step_count is not None and int(self.step_count) < 1:
            raise ConfigurationError("step_count must be >= 1")
        if self.tolerance is not None and not self.tolerance > 0:
            raise ConfigurationError("tolerance must be positive")

    def times(self) -> np.ndarray:
        if self.step_count is None:
            raise ConfigurationError("adaptive grid has no fixed sample times")
        return np.linspace(self.t_start, self.t_end, int(self.step_count) + 1)


@dataclass
class IntegrationOutcome:
    times: np.ndarray
    states: np.ndarray
    status: str

    @property
    def completed(self) -> bool:
        return self.status == COMPLETED

    @property
    def final_state(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class BatchOutcome:
    """Fixed-grid result for a batch of initial states.

    ``states`` has shape ``(steps + 1, batch, n)``.  ``diverged_at[b]`` is the
    sample index at which row ``b`` diverged, or -1.  Samples after divergence
    repeat the last finite state so downstream arithmetic stays quiet.
    """

    times: np.ndarray
    states: np.ndarray
    diverged_at: np.ndarray

    @property
    def completed(self) -> np.ndarray:
        return self.diverged_at < 0

    def row(self, b: int) -> IntegrationOutcome:
        k = int(self.diverged_at[b])
        if k < 0:
            return IntegrationOutcome(self.times.copy(), self.states[:, b].copy(), COMPLETED)
        return IntegrationOutcome(self.times[:k + 1].copy(), self.states[:k + 1, b].copy(),
                                  DIVERGED)


def _bad_rows(y: np.ndarray, bound: float) -> np.ndarray:
    with np.errstate(invalid="ignore"):
        finite = np.all(np.isfinite(y), axis=-1)
        big = np.max(np.abs(np.where(np.isfinite(y), y, 0.0)), axis=-1) > bound
    return ~finite | big


def integrate_rk4_batch(field: VectorField, y0: np.ndarray, grid: IntegrationGrid,
                        divergence_bound: float = DEFAULT_DIVERGENCE_BOUND) -> BatchOutcome:
    """Classical RK4 on a uniform grid for a batch of initial states."""
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    times = grid.times()
    h = (grid.t_end - grid.t_start) / int(grid.step_count)
    batch = y0.shape[0]
    states = np.empty((times.size,) + y0.shape)
    states[0] = y0
    diverged_at = np.full(batch, -1, dtype=int)

    with np.errstate(all="ignore"):
        k1 = field(times[0], y0)
    # a field that is already non-finite at y0 marks the row diverged immediately
    bad = _bad_rows(y0, divergence_bound) | ~np.all(np.isfinite(k1), axis=-1)
    diverged_at[bad] = 0
    alive = ~bad
    y = np.nan_to_num(y0)

    with np.errstate(all="ignore"):
        for i in range(times.size - 1):
            t = times[i]
            if i > 0:
                k1 = field(t, y)
            k2 = field(t + 0.5 * h, y + 0.5 * h * k1)
            k3 = field(t + 0.5 * h, y + 0.5 * h * k2)
            k4 = field(t + h, y + h * k3)
            y_new = y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            bad = alive & _bad_rows(y_new, divergence_bound)
            alive = alive & ~bad
            # dead rows repeat their last good value; the offending sample is kept once
            row = np.where(alive[:, None], y_new, y)
            if bad.any():
                row[bad] = y_new[bad]
                diverged_at[bad] = i + 1
            states[i + 1] = row
            y = np.where(alive[:, None], y_new, y)
            if not alive.any():
                states[i + 2:] = y
                break
    return BatchOutcome(times, states, diverged_at)


def integrate_rk4(field: VectorField, y0, grid: IntegrationGrid,
                  divergence_bound: float = DEFAULT_DIVERGENCE_BOUND) -> IntegrationOutcome:
    """Integrate a single trajectory with fixed-step RK4.

    Parameters
    ----------
    field : callable
        ``field(t, y)`` with ``y`` of shape ``(1, n)``.
    y0 : array_like
        Initial state of shape ``(n,)``.
    grid : IntegrationGrid
        Must carry ``step_count``.
    divergence_bound : float
        Max-norm above which the run is declared diverged.

    Returns
    -------
    IntegrationOutcome
        Samples up to and including the offending one when diverged.
    """
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    if grid.step_count is None:
        raise ConfigurationError("integrate_rk4 needs a grid with step_count")
    out = integrate_rk4_batch(field, y0[None, :], grid, divergence_bound)
    return out.row(0)


def integrate_adaptive(field: VectorField, y0, grid: IntegrationGrid,
                       divergence_bound: float = DEFAULT_DIVERGENCE_BOUND) -> IntegrationOutcome:
    """Dormand-Prince 5(4) with error control at ``grid.tolerance``.

    Samples are the accepted step end points.  A step-size collapse inside the
    stepper is reported as divergence.
    """
    if grid.tolerance is None:
        raise ConfigurationError("integrate_adaptive needs a grid with tolerance")
    y0 = np.atleast_1d(np.asarray(y0, dtype=float))
    tol = float(grid.tolerance)

    def fun(t, y):
        return field(t, y[None, :])[0]

    times = [grid.t_start]
    states = [y0.copy()]
    with np.errstate(all="ignore"):
        f0 = fun(grid.t_start, y0)
    if _bad_rows(y0[None], divergence_bound)[0] or not np.all(np.isfinite(f0)):
        return IntegrationOutcome(np.array(times), np.array(states), DIVERGED)

    solver = RK45(fun, grid.t_start, y0, grid.t_end, rtol=tol, atol=tol)
    with np.errstate(all="ignore"):
        while solver.status == "running":
            solver.step()
            if solver.status == "failed":
                states.append(np.full_like(y0, np.nan))
                times.append(solver.t if solver.t > times[-1] else np.nextafter(times[-1], np.inf))
                return IntegrationOutcome(np.array(times), np.array(states), DIVERGED)
            times.append(solver.t)
            states.append(np.array(solver.y, dtype=float))
            if _bad_rows(states[-1][None], divergence_bound)[0]:
                return IntegrationOutcome(np.array(times), np.array(states), DIVERGED)
    return IntegrationOutcome(np.array(times), np.array(states), COMPLETED)


@njit(cache=True)
def _warp_scale(tf, power, s):
    if power == 1.0:
        return tf
    return tf * power * s ** (power - 1.0)


@njit
def _kernel_rk4(rates, z0, tf, power, steps, params, bound, keep):
    batch, m = z0.shape
    final = z0.copy()
    diverged_at = np.full(batch, -1, dtype=np.int64)
    n_keep = steps + 1 if keep else 1
    samples = np.empty((n_keep, batch, m))
    k1 = np.empty(m)
    k2 = np.empty(m)
    k3 = np.empty(m)
    k4 = np.empty(m)
    tmp = np.empty(m)
    h = 1.0 / steps
    for b in range(batch):
        z = z0[b].copy()
        samples[0, b] = z
        rates(0.0, z, k1, params)
        ok = True
        for j in range(m):
            if not np.isfinite(z[j]) or not np.isfinite(k1[j]) or abs(z[j]) > bound:
                ok = False
        if not ok:
            diverged_at[b] = 0
            if keep:
                for i in range(1, steps + 1):
                    samples[i, b] = z
            continue
        for i in range(steps):
            s = i * h
            t0 = tf[b] * s ** power
            tm = tf[b] * (s + 0.5 * h) ** power
            t1 = tf[b] * (s + h) ** power
            rates(t0, z, k1, params)
            c0 = _warp_scale(tf[b], power, s)
            cm = _warp_scale(tf[b], power, s + 0.5 * h)
            c1 = _warp_scale(tf[b], power, s + h)
            for j in range(m):
                tmp[j] = z[j] + 0.5 * h * c0 * k1[j]
            rates(tm, tmp, k2, params)
            for j in range(m):
                tmp[j] = z[j] + 0.5 * h * cm * k2[j]
            rates(tm, tmp, k3, params)
            for j in range(m):
                tmp[j] = z[j] + h * cm * k3[j]
            rates(t1, tmp, k4, params)
            bad = False
            for j in range(m):
                tmp[j] = z[j] + (h / 6.0) * (c0 * k1[j] + 2.0 * cm * (k2[j] + k3[j]) + c1 * k4[j])
                if not np.isfinite(tmp[j]) or abs(tmp[j]) > bound:
                    bad = True
            if bad:
                diverged_at[b] = i + 1
                if keep:
                    samples[i + 1, b] = tmp
                    for r in range(i + 2, steps + 1):
                        samples[r, b] = z
                final[b] = tmp
                break
            for j in range(m):
                z[j] = tmp[j]
            if keep:
                samples[i + 1, b] = z
        if diverged_at[b] < 0:
            final[b] = z
    return final, diverged_at, samples


def integrate_kernel_rk4(rates, z0: np.ndarray, tf, steps: int, power: float = 1.0,
                         params=None, divergence_bound: float = DEFAULT_DIVERGENCE_BOUND,
                         keep: bool = False) -> BatchOutcome:
    """RK4 for a numba-compiled ``rates(t, z, out, params)`` on a warped grid.

    Integrates ``dz/ds = tf * dt/ds * rates(t(s), z)`` for ``s`` in ``[0, 1]``
    with ``t(s) = tf * s**power``, one row per initial state.  Produces the
    same samples as :func:`integrate_rk4_batch` applied to the warped field
    but runs compiled; only final states are stored unless ``keep``.
    """
    z0 = np.ascontiguousarray(np.atleast_2d(np.asarray(z0, dtype=float)))
    tf = np.ascontiguousarray(np.broadcast_to(np.asarray(tf, dtype=float), (z0.shape[0],)))
    if int(steps) < 1:
        raise ConfigurationError("steps must be >= 1")
    params = np.zeros(1) if params is None else np.asarray(params, dtype=float)
    final, diverged_at, samples = _kernel_rk4(rates, z0, tf, float(power), int(steps),
                                              params, float(divergence_bound), bool(keep))
    s = np.linspace(0.0, 1.0, int(steps) + 1)
    if keep:
        return BatchOutcome(s, samples, diverged_at)
    return BatchOutcome(s[[0, -1]], np.stack([z0, final]), diverged_at)
