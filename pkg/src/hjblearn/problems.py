"""Optimal control problem definitions and the two benchmark instances.

All callables operate on arrays whose last axis is the state (or control)
dimension, so a batch of points can be evaluated at once.  Invalid regions
(no stationary control, negative height, ...) evaluate to NaN rather than
raising; the integrators turn NaN into a ``diverged`` outcome.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Tuple

import numpy as np
from numba import njit

from .errors import ConfigurationError, UsageError

ArrayFn = Callable[..., np.ndarray]

DEFAULT_GRAVITY = 9.81


@dataclass(frozen=True)
class BoundaryConditionSet:
    """Start state, target state and horizon length.

    For the Brachistochrone the horizon is the horizontal distance ``x_f``
    (the path is parameterised by ``x``).
    """

    x0: np.ndarray
    xf: np.ndarray
    tf: float

    def __post_init__(self):
        object.__setattr__(self, "x0", np.atleast_1d(np.asarray(self.x0, dtype=float)))
        object.__setattr__(self, "xf", np.atleast_1d(np.asarray(self.xf, dtype=float)))
        object.__setattr__(self, "tf", float(self.tf))
        if self.x0.shape != self.xf.shape:
            raise UsageError("x0 and xf must have the same dimension")
        if not self.tf > 0:
            raise ConfigurationError(f"tf must be positive, got {self.tf}")

    def as_vector(self) -> np.ndarray:
        """Flattened ``[x0..., xf..., tf]`` used as network input."""
        return np.concatenate([self.x0, self.xf, [self.tf]])

    @classmethod
    def from_vector(cls, v, state_dim: int) -> "BoundaryConditionSet":
        v = np.asarray(v, dtype=float)
        if v.shape != (2 * state_dim + 1,):
            raise UsageError(f"expected {2 * state_dim + 1} boundary values, got {v.shape}")
        return cls(v[:state_dim], v[state_dim:2 * state_dim], v[-1])


@dataclass(frozen=True)
class OcpDefinition:
    """Dynamics, running cost and the Pontryagin quantities of one problem.

    ``costate_rate`` is ``-dH/dx`` evaluated at the stationary control.
    ``grid_power`` warps the integration grid: sample ``s`` in ``[0, 1]`` maps
    to time ``tf * s**grid_power``.  Values above one cluster samples at the
    start, which the Brachistochrone needs near its vertical take-off.
    """

    name: str
    state_dim: int
    control_dim: int
    dynamics: ArrayFn
    running_cost: ArrayFn
    optimal_control: ArrayFn
    costate_rate: ArrayFn
    control_bounds: Tuple[Tuple[float, float], ...]
    default_bc: BoundaryConditionSet
    action_box: Tuple[np.ndarray, np.ndarray]
    grid_power: float = 1.0
    start_state: Optional[ArrayFn] = None
    entry_cost: Optional[ArrayFn] = None
    params: dict = field(default_factory=dict)
    # compiled rates(t, z, out, kernel_params) for z = (x, lam, J); see ode.integrate_kernel_rk4
    kernel: Optional[Callable] = None
    kernel_params: Tuple[float, ...] = ()

    def check_dims(self, x, lam) -> Tuple[np.ndarray, np.ndarray]:
        x = np.asarray(x, dtype=float)
        lam = np.asarray(lam, dtype=float)
        if x.shape[-1:] != (self.state_dim,) or lam.shape[-1:] != (self.state_dim,):
            raise UsageError(
                f"{self.name}: expected state/costate of dimension {self.state_dim}, "
                f"got {x.shape} and {lam.shape}")
        return x, lam

    def initial_state(self, bc: BoundaryConditionSet) -> np.ndarray:
        """State the integration actually starts from (after regularisation)."""
        if self.start_state is None:
            return bc.x0.copy()
        return np.asarray(self.start_state(bc.x0), dtype=float)


def hamiltonian(problem: OcpDefinition, x, lam, u, t=0.0) -> np.ndarray:
    """``H = g(x, u, t) + lam . f(x, u, t)``."""
    x, lam = problem.check_dims(x, lam)
    u = np.asarray(u, dtype=float)
    if u.shape[-1:] != (problem.control_dim,):
        raise UsageError(f"{problem.name}: control must have dimension {problem.control_dim}")
    g = problem.running_cost(x, u, t)
    f = problem.dynamics(x, u, t)
    return g + np.sum(lam * f, axis=-1)


def coupled_field(problem: OcpDefinition, t=None):
    """State-costate vector field ``(xdot, lamdot)`` at the stationary control.

    The returned callable has the ``ode`` signature ``field(t, p)`` with ``p``
    of shape ``(batch, 2n)``.  When ``t`` is given it is used for every
    evaluation (frozen time); otherwise the integrator's time is passed on.
    """
    n = problem.state_dim

    def field_fn(time, p):
        tt = time if t is None else t
        x = p[..., :n]
        lam = p[..., n:]
        u = problem.optimal_control(x, lam, tt)
        xdot = problem.dynamics(x, u, tt)
        lamdot = problem.costate_rate(x, lam, tt)
        return np.concatenate([xdot, lamdot], axis=-1)

    return field_fn


# ---------------------------------------------------------------------------
# Brachistochrone, parameterised by horizontal distance x with y pointing down


def _brach_speed(y, gravity):
    with np.errstate(invalid="ignore"):
        return np.where(y > 0, np.sqrt(2.0 * gravity * np.where(y > 0, y, 0.0)), np.nan)


@njit(cache=True)
def _brach_rates(t, z, out, params):
    gravity = params[0]
    y = z[0]
    lam = z[1]
    if not y > 0.0:
        out[:] = np.nan
        return
    v = math.sqrt(2.0 * gravity * y)
    s = -lam * v
    if not abs(s) < 1.0:
        out[:] = np.nan
        return
    c = math.sqrt(1.0 - s * s)
    out[0] = s / c
    out[1] = gravity / (v ** 3 * c)
    out[2] = 1.0 / (v * c)


def make_brachistochrone(gravity: float = DEFAULT_GRAVITY, start_height: float = 1e-2,
                         grid_power: float = 3.0) -> OcpDefinition:
    """Minimum-time bead path with ``x`` as the independent variable.

    State ``y`` (depth below the release point), costate ``lam``, control
    ``u`` the path angle below horizontal.  Speed follows from energy
    conservation, ``V = sqrt(2 g y)``.

    The release point has ``V = 0`` where the field is singular, so rollouts
    starting at ``y0 < start_height`` begin at ``y = start_height`` instead;
    ``entry_cost`` adds back the time to fall from rest to that depth along
    the cycloid implied by ``(y, lam)``.
    """
    if not gravity > 0:
        raise ConfigurationError("gravity must be positive")
    g0 = float(gravity)
    eps = float(start_height)

    def control(x, lam, t=0.0):
        v = _brach_speed(x, g0)
        s = -lam * v
        with np.errstate(invalid="ignore"):
            return np.where(np.abs(s) < 1.0, np.arcsin(np.clip(s, -1.0, 1.0)), np.nan)

    def dynamics(x, u, t=0.0):
        return np.tan(u)

    def running_cost(x, u, t=0.0):
        v = _brach_speed(x[..., 0], g0)
        return 1.0 / (v * np.cos(u[..., 0]))

    def costate_rate(x, lam, t=0.0):
        u = control(x, lam, t)
        v = _brach_speed(x, g0)
        return g0 / (v ** 3 * np.cos(u))

    def start_state(x0):
        return np.maximum(x0, eps)

    def entry_cost(x0, x_start, lam0):
        # time to fall from rest to x_start along the cycloid fixed by (x_start, lam0)
        y = float(x_start[0])
        if float(x0[0]) >= y:
            return 0.0
        h2 = 1.0 / (2.0 * g0 * y) - float(lam0[0]) ** 2
        if not h2 > 0:
            return np.nan
        radius = 1.0 / (4.0 * g0 * h2)
        theta = 2.0 * np.arcsin(min(1.0, np.sqrt(y / (2.0 * radius))))
        entry = theta * np.sqrt(radius / g0)
        # the regularised start already sits below y0; only the drop from y0 counts
        if float(x0[0]) > 0:
            theta0 = 2.0 * np.arcsin(min(1.0, np.sqrt(float(x0[0]) / (2.0 * radius))))
            entry -= theta0 * np.sqrt(radius / g0)
        return entry

    bc = BoundaryConditionSet([0.0], [1.0], 1.0)
    box = (np.array([-1.0 / np.sqrt(2.0 * g0 * eps)]), np.array([0.0]))
    return OcpDefinition(
        name="brachistochrone",
        state_dim=1,
        control_dim=1,
        dynamics=dynamics,
        running_cost=running_cost,
        optimal_control=control,
        costate_rate=costate_rate,
        control_bounds=((-np.pi / 2, np.pi / 2),),
        default_bc=bc,
        action_box=box,
        grid_power=grid_power,
        start_state=start_state,
        entry_cost=entry_cost,
        params={"gravity": g0, "start_height": eps},
        kernel=_brach_rates,
        kernel_params=(g0,),
    )


# ---------------------------------------------------------------------------
# Hypersensitive scalar problem


@njit(cache=True)
def _hyper_rates(t, z, out, params):
    x = z[0]
    lam = z[1]
    u = -0.5 * lam
    out[0] = -x ** 3 + u
    out[1] = -2.0 * x + 3.0 * x * x * lam
    out[2] = x * x + u * u


def make_hypersensitive() -> OcpDefinition:
    """``min int x^2 + u^2`` subject to ``xdot = -x^3 + u``."""

    def control(x, lam, t=0.0):
        return -0.5 * lam

    def dynamics(x, u, t=0.0):
        return -x ** 3 + u

    def running_cost(x, u, t=0.0):
        return np.sum(x ** 2, axis=-1) + np.sum(u ** 2, axis=-1)

    def costate_rate(x, lam, t=0.0):
        return -2.0 * x + 3.0 * x ** 2 * lam

    bc = BoundaryConditionSet([1.0], [1.5], 25.0)
    return OcpDefinition(
        name="hypersensitive",
        state_dim=1,
        control_dim=1,
        dynamics=dynamics,
        running_cost=running_cost,
        optimal_control=control,
        costate_rate=costate_rate,
        control_bounds=((-np.inf, np.inf),),
        default_bc=bc,
        action_box=(np.array([-5.0]), np.array([5.0])),
        kernel=_hyper_rates,
    )


PROBLEMS = {
    "brachistochrone": make_brachistochrone,
    "hypersensitive": make_hypersensitive,
}


def get_problem(name: str, **kwargs) -> OcpDefinition:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ConfigurationError(
            f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    return factory(**kwargs)
