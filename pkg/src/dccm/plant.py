"""Uncertain discrete-time control-affine models and the CSTR instance.

A model is a bundle of pure evaluators x+ = f(r,x) + g(r,x) u together with
its Jacobians and the box constraints on state, input and parameter.  The
evaluators broadcast over a leading batch axis on x (r fixed or broadcast
alongside), which the verifier and data generation rely on for speed.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np


@dataclass(frozen=True)
class Box:
    """Axis-aligned box, lower[i] <= upper[i]."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo = np.atleast_1d(np.asarray(self.lower, dtype=np.float64))
        up = np.atleast_1d(np.asarray(self.upper, dtype=np.float64))
        if lo.shape != up.shape or lo.ndim != 1:
            raise ValueError("box bounds must be 1-D vectors of equal length")
        if np.any(lo > up):
            raise ValueError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", up)

    @property
    def dim(self) -> int:
        return self.lower.shape[0]

    def contains(self, x, tol=0.0) -> bool:
        x = np.asarray(x, dtype=np.float64)
        return bool(
            np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol)
        )

    def clip(self, x) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=np.float64), self.lower, self.upper)

    def to_unit(self, x) -> np.ndarray:
        """Affine map of the box onto [-1, 1] per coordinate."""
        span = self.upper - self.lower
        span = np.where(span > 0.0, span, 1.0)
        return 2.0 * (np.asarray(x, dtype=np.float64) - self.lower) / span - 1.0


def grid(box: Box, counts) -> np.ndarray:
    """Uniform mesh over the box including both endpoints.

    ``counts`` gives points per dimension; a count of 1 places the midpoint.
    Returns an array of shape (prod(counts), dim) with the first dimension
    varying slowest.
    """
    counts = np.atleast_1d(np.asarray(counts, dtype=int))
    if counts.shape[0] != box.dim:
        raise ValueError(f"expected {box.dim} counts, got {counts.shape[0]}")
    if np.any(counts < 1):
        raise ValueError("grid counts must be positive")
    axes = []
    for lo, up, c in zip(box.lower, box.upper, counts):
        if c == 1:
            axes.append(np.array([0.5 * (lo + up)]))
        else:
            axes.append(np.linspace(lo, up, c))
    points = list(itertools.product(*axes))
    return np.array(points, dtype=np.float64).reshape(len(points), box.dim)


@dataclass(frozen=True)
class UncertainModel:
    """Control-affine system x+ = f(r,x) + g(r,x) u with parameter box.

    f, g, A, B are pure functions; A(r,x,u) is the state Jacobian of the full
    right-hand side (it takes u because g may depend on x) and B(r,x) = g(r,x).
    """

    n: int
    m: int
    ell: int
    x_box: Box
    u_box: Box
    r_box: Box
    f: Callable = field(repr=False)
    g: Callable = field(repr=False)
    A: Callable = field(repr=False)
    B: Callable = field(repr=False)


def step(model: UncertainModel, r, x, u) -> np.ndarray:
    """One transition x+ = f(r,x) + g(r,x) u.

    Warns (without failing) when r leaves its box; robustness probes evaluate
    the model at out-of-box parameters on purpose.
    """
    r, x, u = _check_dims(model, r, x, u)
    if not model.r_box.contains(r):
        warnings.warn("parameter outside its box", RuntimeWarning, stacklevel=2)
    return model.f(r, x) + model.g(r, x) @ u


def jacobians(model: UncertainModel, r, x, u):
    """State and input Jacobians (A, B) of step at (r, x, u)."""
    r, x, u = _check_dims(model, r, x, u)
    return model.A(r, x, u), model.B(r, x)


def _check_dims(model, r, x, u):
    r = np.asarray(r, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    u = np.asarray(u, dtype=np.float64)
    if r.shape != (model.ell,):
        raise ValueError(f"r has shape {r.shape}, expected ({model.ell},)")
    if x.shape != (model.n,):
        raise ValueError(f"x has shape {x.shape}, expected ({model.n},)")
    if u.shape != (model.m,):
        raise ValueError(f"u has shape {u.shape}, expected ({model.m},)")
    return r, x, u


# CSTR constants: state box (concentration, temperature), input box, and the
# Damkoehler-number box the uncertain parameters live in.
CSTR_X_BOX = Box(np.array([0.1, -0.1]), np.array([1.1, 1.1]))
CSTR_U_BOX = Box(np.array([-1.0]), np.array([1.0]))
CSTR_R_BOX = Box(np.array([1.15, 1.275]), np.array([3.125, 3.438]))


@dataclass(frozen=True)
class CstrParams:
    """Physical constants of the CSTR discretization.

    alpha is the activation-energy constant, zeta the concentration decay,
    (da1, da2) the true Damkoehler numbers and dt the sample time in hours.
    """

    alpha: float = 0.8
    zeta: float = 0.1
    da1: float = 1.25
    da2: float = 1.375
    dt: float = 0.1

    def __post_init__(self):
        if not CSTR_R_BOX.contains(np.array([self.da1, self.da2])):
            raise ValueError("Damkoehler numbers outside their box")
        if self.dt <= 0.0:
            raise ValueError("time step must be positive")

    @property
    def r(self) -> np.ndarray:
        return np.array([self.da1, self.da2])


def cstr(
    params: CstrParams = CstrParams(),
    x_box: Box = None,
    u_box: Box = None,
    r_box: Box = None,
) -> UncertainModel:
    """Discretized exothermic CSTR with uncertain Damkoehler numbers.

    x1 is reactant concentration, x2 temperature; the coolant input enters
    the temperature row only.  The Arrhenius factor e(x2) = exp(a x2/(a+x2))
    multiplies both reaction terms.  Box overrides let a scenario file narrow
    or widen the default operating ranges.
    """
    a, z, dt = params.alpha, params.zeta, params.dt

    def arrhenius(x2):
        return np.exp(a * x2 / (a + x2))

    def f(r, x):
        r = np.asarray(r, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        x1, x2 = x[..., 0], x[..., 1]
        r1, r2 = r[..., 0], r[..., 1]
        e = arrhenius(x2)
        return np.stack(
            [
                (1.0 - z * dt) * x1 + dt * r1 * (1.0 - x1) * e,
                (1.0 - dt) * x2 + dt * r2 * (1.0 - x1) * e,
            ],
            axis=-1,
        )

    def g(r, x):
        x = np.asarray(x, dtype=np.float64)
        col = np.zeros(x.shape[:-1] + (2, 1))
        col[..., 1, 0] = 1.0
        return col

    def jac_a(r, x, u):
        r = np.asarray(r, dtype=np.float64)
        x = np.asarray(x, dtype=np.float64)
        x1, x2 = x[..., 0], x[..., 1]
        r1, r2 = r[..., 0], r[..., 1]
        e = arrhenius(x2)
        # d e / d x2 through the exponent a*x2/(a+x2).
        de = e * a * a / (a + x2) ** 2
        rows = np.empty(np.broadcast(x1, r1).shape + (2, 2))
        rows[..., 0, 0] = 1.0 - z * dt - dt * r1 * e
        rows[..., 0, 1] = dt * r1 * (1.0 - x1) * de
        rows[..., 1, 0] = -dt * r2 * e
        rows[..., 1, 1] = 1.0 - dt + dt * r2 * (1.0 - x1) * de
        return rows

    return UncertainModel(
        n=2,
        m=1,
        ell=2,
        x_box=CSTR_X_BOX if x_box is None else x_box,
        u_box=CSTR_U_BOX if u_box is None else u_box,
        r_box=CSTR_R_BOX if r_box is None else r_box,
        f=f,
        g=g,
        A=jac_a,
        B=g,
    )
