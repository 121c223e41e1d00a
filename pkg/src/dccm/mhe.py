"""Moving-horizon parameter identification by box-constrained least squares.

The window keeps the last N+1 (state, input) pairs; the estimate minimizes
the squared one-step prediction error of the model over the N transitions,
with the parameter held constant across the window by default (the paper's
per-step parameter sequence is available behind a flag, in which case the
newest step's value is returned).  The solver is projected Gauss-Newton from
the previous estimate with a rank check on the regressor.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from . import plant


@dataclass(frozen=True)
class MheOptions:
    max_iters: int = 50
    sigma_tol: float = 1e-8
    step_tol: float = 1e-12
    fd_step: float = 1e-6
    per_step_sequence: bool = False
    step_weights: tuple | None = None
    coord_weights: tuple | None = None


class EstimationWindow:
    """Chronological ring buffer of (x, u) pairs with capacity N+1."""

    def __init__(self, horizon: int):
        if horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.horizon = horizon
        self._entries = deque(maxlen=horizon + 1)

    def push(self, x, u):
        self._entries.append(
            (np.array(x, dtype=np.float64), np.array(u, dtype=np.float64))
        )

    def __len__(self):
        return len(self._entries)

    @property
    def full(self) -> bool:
        return len(self._entries) == self.horizon + 1

    def entries(self):
        return list(self._entries)

    def copy(self) -> "EstimationWindow":
        out = EstimationWindow(self.horizon)
        for x, u in self._entries:
            out.push(x, u)
        return out


@dataclass(frozen=True)
class ParamEstimate:
    """r_hat is always inside the parameter box.

    held is set when the window could not improve on the previous estimate:
    a rank-deficient regressor (insufficient excitation) or a Gauss-Newton
    iteration whose every attempted step was rejected.
    """

    r_hat: np.ndarray
    residual: float
    held: bool
    iterations: int


def estimate(
    model: plant.UncertainModel, window: EstimationWindow, r_prev, opts: MheOptions = None
) -> ParamEstimate:
    """Projected Gauss-Newton fit of the parameter over a full window."""
    opts = opts or MheOptions()
    if not window.full:
        raise ValueError("estimation window is not full")
    r_prev = np.asarray(r_prev, dtype=np.float64)
    if r_prev.shape != (model.ell,):
        raise ValueError(f"r_prev has shape {r_prev.shape}, expected ({model.ell},)")
    pairs = window.entries()
    xs = np.stack([x for x, _ in pairs])
    us = np.stack([u for _, u in pairs])
    count = window.horizon
    row_scale = np.ones((count, model.n))
    if opts.step_weights is not None:
        row_scale *= np.sqrt(np.asarray(opts.step_weights, dtype=np.float64))[:, None]
    if opts.coord_weights is not None:
        row_scale *= np.sqrt(np.asarray(opts.coord_weights, dtype=np.float64))[None, :]

    blocks = count if opts.per_step_sequence else 1
    lo = np.tile(model.r_box.lower, blocks)
    hi = np.tile(model.r_box.upper, blocks)

    def residual(theta):
        res = np.empty((count, model.n))
        for i in range(count):
            r_i = theta if blocks == 1 else theta[i * model.ell : (i + 1) * model.ell]
            pred = model.f(r_i, xs[i]) + model.g(r_i, xs[i]) @ us[i]
            res[i] = pred - xs[i + 1]
        out = (res * row_scale).ravel()
        if not np.isfinite(out).all():
            raise RuntimeError("non-finite window residual")
        return out

    def jacobian(theta):
        cols = []
        for j in range(theta.shape[0]):
            h = opts.fd_step * (1.0 + abs(theta[j]))
            up, dn = theta.copy(), theta.copy()
            up[j] += h
            dn[j] -= h
            cols.append((residual(up) - residual(dn)) / (2.0 * h))
        return np.stack(cols, axis=1)

    theta = np.tile(r_prev, blocks)
    res = residual(theta)
    cost = float(res @ res)
    if np.linalg.svd(jacobian(theta), compute_uv=False)[-1] < opts.sigma_tol:
        return ParamEstimate(r_prev.copy(), cost, held=True, iterations=0)

    iterations = 0
    any_accepted = False
    rejected = False
    for _ in range(opts.max_iters):
        jac = jacobian(theta)
        delta = np.linalg.lstsq(jac, -res, rcond=None)[0]
        if float(np.linalg.norm(delta)) < opts.step_tol:
            break
        iterations += 1
        scale, accepted = 1.0, False
        for _ in range(25):
            cand = np.clip(theta + scale * delta, lo, hi)
            cand_res = residual(cand)
            cand_cost = float(cand_res @ cand_res)
            if cand_cost < cost:
                theta, res, cost = cand, cand_res, cand_cost
                accepted = True
                break
            scale *= 0.5
        if not accepted:
            rejected = True
            break
        any_accepted = True
    held = rejected and not any_accepted
    r_hat = theta[-model.ell :] if blocks > 1 else theta
    if held:
        r_hat = r_prev
    return ParamEstimate(np.clip(r_hat, model.r_box.lower, model.r_box.upper), cost, held, iterations)
