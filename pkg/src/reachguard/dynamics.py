"""Benchmark dynamical systems, their closed-form safe controls, and time stepping.

Three systems are provided:

* ``double_integrator``: state (x [m], v [m/s]), control a [m/s^2] in [-1, 1].
* ``dubins``: state (x [m], y [m], phi [rad]), control turn rate u [rad/s] in [-1, 1],
  constant speed 1 m/s.
* ``bike``: kinematic bicycle, state (x [m], y [m], v [m/s], phi [rad]),
  control (a [m/s^2], delta [rad]), wheelbase 3 m.

All vector fields are vectorised over leading batch dimensions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

TWO_PI = 2.0 * math.pi
CONTROL_TOL = 1e-9

BIKE_LENGTH = 3.0
BIKE_A_BOUNDS = (-4.0, 2.0)
BIKE_DELTA_BOUNDS = (-0.3, 0.3)
BIKE_V_MAX = 30.0
DUBINS_SPEED = 1.0


class DomainError(ValueError):
    """Input outside the domain of a dynamics function."""


class NumericalError(ArithmeticError):
    """Integration produced a non-finite state."""


def _check_finite(*values):
    for v in values:
        if not np.all(np.isfinite(v)):
            raise DomainError(f"non-finite input: {v!r}")


# --------------------------------------------------------------------------
# scalar vector fields (reference definitions)
# --------------------------------------------------------------------------

def di_vector_field(x: float, v: float, a: float) -> tuple[float, float]:
    _check_finite(x, v, a)
    return (v, a)


def dubins_vector_field(x: float, y: float, phi: float, u: float) -> tuple[float, float, float]:
    _check_finite(x, y, phi, u)
    return (DUBINS_SPEED * math.cos(phi), DUBINS_SPEED * math.sin(phi), u)


def bike_vector_field(x: float, y: float, v: float, phi: float, a: float, delta: float,
                      length: float = BIKE_LENGTH) -> tuple[float, float, float, float]:
    _check_finite(x, y, v, phi, a, delta)
    if abs(delta) >= math.pi / 2:
        raise DomainError(f"steering angle {delta} at or beyond the tan singularity")
    return (v * math.cos(phi), v * math.sin(phi), a, v * math.tan(delta) / length)


# --------------------------------------------------------------------------
# batched fields used by the solvers and environments
# --------------------------------------------------------------------------

def _di_field(x, u):
    return np.stack([x[..., 1], u[..., 0]], axis=-1)


def _dubins_field(x, u):
    phi = x[..., 2]
    return np.stack([DUBINS_SPEED * np.cos(phi), DUBINS_SPEED * np.sin(phi), u[..., 0]], axis=-1)


def _make_bike_field(length):
    def field_(x, u):
        v, phi = x[..., 2], x[..., 3]
        delta = u[..., 1]
        if np.any(np.abs(delta) >= math.pi / 2):
            raise DomainError("steering angle at or beyond the tan singularity")
        return np.stack([v * np.cos(phi), v * np.sin(phi), u[..., 0],
                         v * np.tan(delta) / length], axis=-1)
    return field_


# --------------------------------------------------------------------------
# closed-form optimal safe controls
# --------------------------------------------------------------------------

def di_optimal_control(dV_dv, a_lo: float = -1.0, a_hi: float = 1.0):
    """Maximise the Hamiltonian a * dV/dv: full throttle on a non-negative slope."""
    return np.where(np.asarray(dV_dv) >= 0.0, a_hi, a_lo)


def dubins_optimal_control(dV_dtheta, u_lo: float = -1.0, u_hi: float = 1.0):
    """Reach rule on a cost-like value (smaller is closer to the goal).

    Minimises the Hamiltonian u * dV/dtheta, so a non-negative slope turns
    with ``u_lo``.
    """
    return np.where(np.asarray(dV_dtheta) >= 0.0, u_lo, u_hi)


def bike_optimal_control(dV_dv, dV_dphi, bounds=(BIKE_A_BOUNDS, BIKE_DELTA_BOUNDS)):
    (a_lo, a_hi), (d_lo, d_hi) = bounds
    a = np.where(np.asarray(dV_dv) <= 0.0, a_lo, a_hi)
    delta = np.where(np.asarray(dV_dphi) >= 0.0, d_hi, d_lo)
    return a, delta


def di_safe_oracle(x, v):
    """Analytic keep-in set of the double integrator on [-1, 1] with |a| <= 1.

    A state is safe iff full braking stops the particle inside the interval.
    Vectorised; returns a boolean (array).
    """
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    inside = (x >= -1.0) & (x <= 1.0)
    right_ok = (v <= 0.0) | (x + 0.5 * v * v <= 1.0)
    left_ok = (v >= 0.0) | (x - 0.5 * v * v >= -1.0)
    return inside & right_ok & left_ok


# --------------------------------------------------------------------------
# system model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SystemModel:
    name: str
    dim_x: int
    dim_u: int
    control_lo: np.ndarray
    control_hi: np.ndarray
    vector_field: Callable[[np.ndarray, np.ndarray], np.ndarray]
    periodic_dims: tuple[int, ...] = ()
    # dims clipped into [lo, hi] after every step (e.g. bike speed >= 0)
    saturated_dims: dict = field(default_factory=dict)
    mode: str = "avoid"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        lo = np.asarray(self.control_lo, dtype=float)
        hi = np.asarray(self.control_hi, dtype=float)
        if lo.shape != (self.dim_u,) or hi.shape != (self.dim_u,):
            raise ValueError("control bounds must have length dim_u")
        if np.any(lo > hi):
            raise ValueError("control_lo must not exceed control_hi")
        object.__setattr__(self, "control_lo", lo)
        object.__setattr__(self, "control_hi", hi)

    def clamp_control(self, u, tol: float = CONTROL_TOL) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if not np.all(np.isfinite(u)):
            raise DomainError("non-finite control")
        if np.any(u < self.control_lo - tol) or np.any(u > self.control_hi + tol):
            raise DomainError(f"control {u} outside bounds [{self.control_lo}, {self.control_hi}]")
        return np.clip(u, self.control_lo, self.control_hi)

    def f(self, x, u) -> np.ndarray:
        return self.vector_field(np.asarray(x, dtype=float), np.asarray(u, dtype=float))

    def optimal_control(self, grad) -> np.ndarray:
        """Closed-form maximiser of <f(x, u), grad> for this system.

        ``grad`` has shape (..., dim_x); returns (..., dim_u).
        """
        grad = np.asarray(grad, dtype=float)
        lo, hi = self.control_lo, self.control_hi
        if self.name == "double_integrator":
            a = di_optimal_control(grad[..., 1], lo[0], hi[0])
            return np.asarray(a, dtype=float)[..., None]
        if self.name == "dubins":
            # the reach value here grows toward the goal; the sign rule is
            # written for the cost-like (negated) value
            u = dubins_optimal_control(-grad[..., 2], lo[0], hi[0])
            return np.asarray(u, dtype=float)[..., None]
        if self.name == "bike":
            a, d = bike_optimal_control(grad[..., 2], grad[..., 3], ((lo[0], hi[0]), (lo[1], hi[1])))
            return np.stack([np.broadcast_to(a, np.shape(grad[..., 2])),
                             np.broadcast_to(d, np.shape(grad[..., 3]))], axis=-1).astype(float)
        raise ValueError(f"no closed-form control for system {self.name!r}")

    def wrap(self, x: np.ndarray) -> np.ndarray:
        x = np.array(x, dtype=float, copy=True)
        for d in self.periodic_dims:
            x[..., d] = np.mod(x[..., d], TWO_PI)
            # mod can round up to exactly 2*pi for tiny negative inputs
            x[..., d] = np.where(x[..., d] >= TWO_PI, 0.0, x[..., d])
        for d, (lo, hi) in self.saturated_dims.items():
            x[..., d] = np.clip(x[..., d], lo, hi)
        return x


def integrate_step(model: SystemModel, x, u, dt: float, scheme: str = "euler") -> np.ndarray:
    """Advance ``x`` by one step of length ``dt`` under constant control ``u``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    f = model.vector_field
    if scheme not in ("euler", "rk4"):
        raise ValueError(f"unknown scheme {scheme!r}")
    with np.errstate(over="ignore", invalid="ignore"):
        if scheme == "euler":
            nxt = x + dt * f(x, u)
        else:
            k1 = f(x, u)
            k2 = f(x + 0.5 * dt * k1, u)
            k3 = f(x + 0.5 * dt * k2, u)
            k4 = f(x + dt * k3, u)
            nxt = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(nxt)):
        raise NumericalError("integration produced a non-finite state")
    return model.wrap(nxt)


# --------------------------------------------------------------------------
# factories
# --------------------------------------------------------------------------

def double_integrator(a_bounds=(-1.0, 1.0)) -> SystemModel:
    return SystemModel(
        name="double_integrator", dim_x=2, dim_u=1,
        control_lo=[a_bounds[0]], control_hi=[a_bounds[1]],
        vector_field=_di_field,
    )


def dubins(u_bounds=(-1.0, 1.0)) -> SystemModel:
    return SystemModel(
        name="dubins", dim_x=3, dim_u=1,
        control_lo=[u_bounds[0]], control_hi=[u_bounds[1]],
        vector_field=_dubins_field, periodic_dims=(2,), mode="reach",
    )


def bike(a_bounds=BIKE_A_BOUNDS, delta_bounds=BIKE_DELTA_BOUNDS,
         length: float = BIKE_LENGTH, v_max: float = BIKE_V_MAX) -> SystemModel:
    if max(abs(delta_bounds[0]), abs(delta_bounds[1])) >= math.pi / 2:
        raise DomainError("steering bounds must stay below pi/2")
    return SystemModel(
        name="bike", dim_x=4, dim_u=2,
        control_lo=[a_bounds[0], delta_bounds[0]],
        control_hi=[a_bounds[1], delta_bounds[1]],
        vector_field=_make_bike_field(length), periodic_dims=(3,),
        saturated_dims={2: (0.0, v_max)},
        params={"length": length, "v_max": v_max},
    )


SYSTEMS = {
    "double_integrator": double_integrator,
    "di": double_integrator,
    "dubins": dubins,
    "bike": bike,
}


def get_system(name: str, **overrides) -> SystemModel:
    try:
        factory = SYSTEMS[name]
    except KeyError:
        raise ValueError(f"unknown system {name!r}; choose from {sorted(SYSTEMS)}") from None
    return factory(**overrides)
