"""Geodesics and Riemannian distance under a state-dependent metric.

A path between the reference and the current state is discretized into S
straight segments and its interior nodes are moved by projected gradient
descent on the path energy S * sum_i dx_i^T M(mid_i) dx_i, with the metric
evaluated at segment midpoints.  Energy minimizers are length minimizers up
to reparameterization, and the energy objective is smooth where the metric
is, which is why the optimizer works on energy and reads the length off the
result.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dccm_net
from .plant import Box

DEFAULT_SEGMENTS = 20


@dataclass(frozen=True)
class GeodesicOptions:
    max_iters: int = 200
    grad_tol: float = 1e-8


@dataclass(frozen=True)
class GeodesicPath:
    """Optimized polyline from the reference to the state.

    nodes[0] is x_star and nodes[-1] is x.  energy is sum_i dx_i^T M dx_i
    (the optimizer minimizes S times this); length is the metric length
    sum_i sqrt(dx_i^T M dx_i), so S * energy >= length^2 with near equality
    at convergence.  converged is False when the iteration cap was hit and
    the best path seen is returned instead.
    """

    nodes: np.ndarray
    segments: int
    r_hat: np.ndarray
    length: float
    energy: float
    converged: bool
    iterations: int


def _path_terms(metric_fn, nodes):
    deltas = nodes[1:] - nodes[:-1]
    mids = 0.5 * (nodes[1:] + nodes[:-1])
    mm, dm = metric_fn(mids)
    quad = np.einsum("si,sij,sj->s", deltas, mm, deltas)
    return deltas, mm, dm, quad


def _interior_gradient(segments, deltas, mm, dm, quad):
    md = np.einsum("sij,sj->si", mm, deltas)
    q = np.einsum("si,sijd,sj->sd", deltas, dm, deltas)
    return segments * (2.0 * (md[:-1] - md[1:]) + 0.5 * (q[:-1] + q[1:]))


def geodesic_with_metric(
    metric_fn, x, x_star, x_box: Box, segments=DEFAULT_SEGMENTS, opts=None, r_hat=None
) -> GeodesicPath:
    """Energy-descent geodesic under an arbitrary metric callable.

    metric_fn maps midpoints (S, n) to (M (S,n,n), dM/dx (S,n,n,n)).  Used
    directly by tests with analytic toy metrics; the network-backed public
    entry points wrap it.
    """
    opts = opts or GeodesicOptions()
    x = np.asarray(x, dtype=np.float64)
    x_star = np.asarray(x_star, dtype=np.float64)
    if segments < 1:
        raise ValueError("segment count must be at least 1")
    for point, name in ((x, "x"), (x_star, "x_star")):
        if not x_box.contains(point, tol=1e-9):
            raise ValueError(f"{name} lies outside the state box")
    s = segments
    nodes = np.linspace(x_star, x, s + 1)
    deltas, mm, dm, quad = _path_terms(metric_fn, nodes)
    if not np.isfinite(quad).all():
        raise RuntimeError("non-finite metric evaluation on the initial path")
    energy = s * float(np.sum(quad))
    best_nodes, best_energy = nodes.copy(), energy
    converged = s == 1 or x.shape[0] == 0
    step = 1.0
    prev_interior = None
    prev_grad = None
    iterations = 0
    while not converged and iterations < opts.max_iters:
        iterations += 1
        grad = _interior_gradient(s, deltas, mm, dm, quad)
        interior = nodes[1:-1]
        projected = interior - x_box.clip(interior - grad)
        if np.max(np.abs(projected)) < opts.grad_tol:
            converged = True
            break
        if prev_grad is not None:
            dw = interior - prev_interior
            dg = grad - prev_grad
            curv = float(np.sum(dw * dg))
            if curv > 0.0:
                step = float(np.sum(dw * dw)) / curv
        step = min(max(step, 1e-14), 1e6)
        prev_interior, prev_grad = interior.copy(), grad
        accepted = False
        trial = step
        for _ in range(60):
            cand = nodes.copy()
            cand[1:-1] = x_box.clip(interior - trial * grad)
            cand_deltas, cand_mm, cand_dm, cand_quad = _path_terms(metric_fn, cand)
            cand_energy = s * float(np.sum(cand_quad))
            if np.isfinite(cand_energy) and cand_energy < energy:
                nodes = cand
                deltas, mm, dm, quad = cand_deltas, cand_mm, cand_dm, cand_quad
                energy = cand_energy
                step = trial
                accepted = True
                break
            trial *= 0.5
        if not accepted:
            # No descent at machine-scale steps: treat as converged only if
            # the projected gradient is already tiny, otherwise flag.
            converged = np.max(np.abs(projected)) < 1e3 * opts.grad_tol
            break
        if energy < best_energy:
            best_energy = energy
            best_nodes = nodes.copy()
    if energy > best_energy:
        nodes = best_nodes
        deltas, mm, dm, quad = _path_terms(metric_fn, nodes)
    length = float(np.sum(np.sqrt(np.maximum(quad, 0.0))))
    return GeodesicPath(
        nodes=nodes,
        segments=s,
        r_hat=None if r_hat is None else np.asarray(r_hat, dtype=np.float64),
        length=length,
        energy=float(np.sum(quad)),
        converged=converged,
        iterations=iterations,
    )


def metric_from_network(w: dccm_net.NetworkWeights, r_hat):
    """Metric callable M(x, r_hat) with its state Jacobian, batched over x."""
    r_hat = np.asarray(r_hat, dtype=np.float64)

    def fn(mids):
        rs = np.tile(r_hat, (mids.shape[0], 1))
        mm, _, dm = dccm_net.evaluate_with_state_jacobian(w, mids, rs)
        if not np.isfinite(mm).all():
            raise RuntimeError("non-finite metric evaluation")
        return mm, dm

    return fn


def geodesic(
    w: dccm_net.NetworkWeights, x, x_star, r_hat, segments=DEFAULT_SEGMENTS, opts=None
) -> GeodesicPath:
    """Geodesic from x_star to x under the learned metric at r_hat."""
    return geodesic_with_metric(
        metric_from_network(w, r_hat), x, x_star, w.x_box, segments, opts, r_hat
    )


def distance(
    w: dccm_net.NetworkWeights, x, x_star, r_hat, segments=DEFAULT_SEGMENTS, opts=None
) -> float:
    """Riemannian distance d(x, x_star): length of the optimized geodesic."""
    return geodesic(w, x, x_star, r_hat, segments, opts).length
