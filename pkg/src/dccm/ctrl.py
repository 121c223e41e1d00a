"""Reference generation and the geodesic-integrated adaptive control law.

References are equilibria of the model under the current parameter estimate,
parameterized by a setpoint value for the actuated coordinate; the control
integrates the learned differential gain along the geodesic from the
reference to the state, on top of the reference input.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import dccm_net, riemann
from .plant import Box, UncertainModel, step


class InfeasibleReferenceError(RuntimeError):
    """No equilibrium with the requested setpoint inside the state box."""


class SaturatedReferenceError(RuntimeError):
    """The equilibrium exists but its input lies outside the input box."""


@dataclass(frozen=True)
class ReferencePoint:
    x_star: np.ndarray
    u_star: np.ndarray
    r_hat: np.ndarray


@dataclass(frozen=True)
class SetpointSchedule:
    """Piecewise-constant setpoint values, switching at the listed times."""

    entries: tuple  # ((start_hours, value), ...)

    def __post_init__(self):
        entries = tuple((float(t), float(v)) for t, v in self.entries)
        if not entries or entries[0][0] != 0.0:
            raise ValueError("schedule must start at time 0")
        times = [t for t, _ in entries]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("schedule times must be strictly increasing")
        object.__setattr__(self, "entries", entries)

    def active(self, t: float) -> float:
        value = self.entries[0][1]
        for start, v in self.entries:
            if t >= start - 1e-12:
                value = v
        return value


def _row_split(model: UncertainModel):
    """(free row, actuated row) from the structure of g.

    The reference solver covers two-state single-input models where the input
    enters exactly one row; the setpoint fixes that row's coordinate.
    """
    if model.n != 2 or model.m != 1:
        raise ValueError("reference generation requires n = 2, m = 1")
    mid_x = 0.5 * (model.x_box.lower + model.x_box.upper)
    mid_r = 0.5 * (model.r_box.lower + model.r_box.upper)
    g = np.asarray(model.g(mid_r, mid_x), dtype=np.float64)
    actuated = [i for i in range(model.n) if abs(g[i, 0]) > 0.0]
    if len(actuated) != 1:
        raise ValueError("expected the input to enter exactly one state row")
    act = actuated[0]
    return 1 - act, act


_BISECT_ITERS = 80


def generate_reference(model: UncertainModel, r_hat, setpoint) -> ReferencePoint:
    """Equilibrium (x*, u*) with the actuated coordinate held at `setpoint`.

    The unactuated row's fixed-point condition is solved for the free
    coordinate by bisection over its box interval; the actuated row then
    yields u* in closed form.  Raises when no sign change brackets a root in
    the box or when u* violates the input box.
    """
    r_hat = np.asarray(r_hat, dtype=np.float64)
    setpoint = float(np.squeeze(setpoint))
    free, act = _row_split(model)
    if not (
        model.x_box.lower[act] - 1e-12 <= setpoint <= model.x_box.upper[act] + 1e-12
    ):
        raise InfeasibleReferenceError(
            f"setpoint {setpoint!r} outside the state box for coordinate {act + 1}"
        )

    def assemble(c):
        x = np.empty(2)
        x[free], x[act] = c, setpoint
        return x

    def residual(c):
        x = assemble(c)
        return float(model.f(r_hat, x)[free] - c)

    lo, hi = model.x_box.lower[free], model.x_box.upper[free]
    r_lo, r_hi = residual(lo), residual(hi)
    if r_lo == 0.0:
        root = lo
    elif r_hi == 0.0:
        root = hi
    elif r_lo * r_hi > 0.0:
        raise InfeasibleReferenceError(
            f"no equilibrium bracketed in [{lo!r}, {hi!r}] at setpoint {setpoint!r}"
        )
    else:
        for _ in range(_BISECT_ITERS):
            mid = 0.5 * (lo + hi)
            r_mid = residual(mid)
            if r_mid == 0.0:
                lo = hi = mid
                break
            if (r_mid > 0.0) == (r_lo > 0.0):
                lo, r_lo = mid, r_mid
            else:
                hi = mid
        root = 0.5 * (lo + hi)
    x_star = assemble(root)
    g = np.asarray(model.g(r_hat, x_star), dtype=np.float64)
    u_star = np.zeros(1)
    u_star[0] = (setpoint - float(model.f(r_hat, x_star)[act])) / g[act, 0]
    if not model.u_box.contains(u_star):
        raise SaturatedReferenceError(
            f"equilibrium input {u_star[0]!r} outside the input box"
        )
    drift = np.max(np.abs(step(model, r_hat, x_star, u_star) - x_star))
    if drift > 1e-9:
        raise InfeasibleReferenceError(f"equilibrium residual {drift!r} exceeds 1e-9")
    return ReferencePoint(x_star=x_star, u_star=u_star, r_hat=r_hat.copy())


@dataclass(frozen=True)
class ControlResult:
    u: np.ndarray
    saturated: bool
    path: riemann.GeodesicPath


def control(
    w: dccm_net.NetworkWeights,
    x,
    ref: ReferencePoint,
    r_hat,
    u_box: Box,
    segments=riemann.DEFAULT_SEGMENTS,
    opts=None,
) -> ControlResult:
    """u = u* + sum_i K(mid_i, r_hat) (nodes[i+1] - nodes[i]).

    The geodesic runs from the reference to the state, so the accumulated
    differential input pushes the state back along it; the gain is evaluated
    at segment midpoints, matching the quadrature of the geodesic itself.
    The result is clipped to the input box and flagged when that binds.
    """
    x = np.asarray(x, dtype=np.float64)
    r_hat = np.asarray(r_hat, dtype=np.float64)
    if not w.x_box.contains(x, tol=1e-12):
        warnings.warn("state outside its box, clipping", RuntimeWarning, stacklevel=2)
        x = w.x_box.clip(x)
    path = riemann.geodesic(w, x, ref.x_star, r_hat, segments, opts)
    deltas = path.nodes[1:] - path.nodes[:-1]
    mids = 0.5 * (path.nodes[1:] + path.nodes[:-1])
    kk = dccm_net.evaluate_many(w, mids, np.tile(r_hat, (mids.shape[0], 1)))[1]
    u = ref.u_star + np.einsum("sij,sj->i", kk, deltas)
    if not np.isfinite(u).all():
        raise RuntimeError("non-finite control output")
    saturated = not u_box.contains(u)
    return ControlResult(u=u_box.clip(u), saturated=saturated, path=path)
