"""Grid data generation, minor-hinge loss training, and mesh verification.

Training enforces, at every grid sample, positivity margins on the leading
principal minors of the learned metric M and of the contraction matrix

    Omega = -(A + B K)^T M_next (A + B K) + (1 - beta) M

via the hinge sum L = sum_i max(0, eps_i - |minor_i|).  Both quantities are
assembled once as a diffcore expression graph with the weights as graph
inputs; every optimizer iteration re-evaluates that fixed graph over the full
sample batch.  The hinge and its subgradient are composed outside the graph
from the minor values, then injected as per-sample adjoint seeds.

Verification re-checks the trained pair on a finer mesh with an independent
eigenvalue route (closed-form for 2x2, cyclic Jacobi above) instead of the
minor test used during training.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dccm_net, diffcore, plant

_CHUNK = 4096
_ADAM_B1 = 0.9
_ADAM_B2 = 0.999
_ADAM_EPS = 1e-8


@dataclass(frozen=True)
class TrainerConfig:
    beta: float = 0.26
    beta_l: float = 0.21
    eps_m: float = 0.01
    eps_omega: float = 0.01
    learning_rate: float = 0.001
    max_iters: int = 1500
    tol: float = 1e-6
    x_counts: tuple = (11, 13)
    u_counts: tuple = (5,)
    r_counts: tuple = (5, 5)
    hidden: tuple = (15, 15, 15)
    seed: int = 0
    optimizer: str = "adam"

    def __post_init__(self):
        if not 0.0 < self.beta_l <= self.beta <= 1.0:
            raise ValueError("rates must satisfy 0 < beta_l <= beta <= 1")
        if self.eps_m <= 0.0 or self.eps_omega <= 0.0:
            raise ValueError("minor margins must be positive")
        if self.learning_rate <= 0.0:
            raise ValueError("learning rate must be positive")
        if self.optimizer not in ("adam", "gd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class TrainingSample:
    r: np.ndarray
    x: np.ndarray
    u: np.ndarray
    x_next: np.ndarray
    A: np.ndarray
    B: np.ndarray


def generate_dataset(model: plant.UncertainModel, cfg: TrainerConfig):
    """One sample per (u, x, r) grid point, u outermost, r innermost.

    x_next is stored exactly as propagated, clipping into the state box
    happens only when samples are fed to the network.
    """
    xg = plant.grid(model.x_box, cfg.x_counts)
    ug = plant.grid(model.u_box, cfg.u_counts)
    rg = plant.grid(model.r_box, cfg.r_counts)
    if xg.size == 0 or ug.size == 0 or rg.size == 0:
        raise ValueError("empty training grid")
    samples = []
    for u in ug:
        for x in xg:
            for r in rg:
                a, b = plant.jacobians(model, r, x, u)
                samples.append(
                    TrainingSample(
                        r=r.copy(),
                        x=x.copy(),
                        u=u.copy(),
                        x_next=plant.step(model, r, x, u),
                        A=np.asarray(a, dtype=np.float64),
                        B=np.asarray(b, dtype=np.float64),
                    )
                )
    return samples


def save_dataset(samples, path):
    """Columnar text, one sample per row; header records dimensions."""
    first = samples[0]
    n, m, ell = first.x.shape[0], first.u.shape[0], first.r.shape[0]
    cols = (
        [f"r{i+1}" for i in range(ell)]
        + [f"x{i+1}" for i in range(n)]
        + [f"u{i+1}" for i in range(m)]
        + [f"xn{i+1}" for i in range(n)]
        + [f"a{i+1}{j+1}" for i in range(n) for j in range(n)]
        + [f"b{i+1}{j+1}" for i in range(n) for j in range(m)]
    )
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"# dccm-dataset v1 n={n} m={m} ell={ell}\n")
        fh.write("# " + ",".join(cols) + "\n")
        for s in samples:
            row = np.concatenate([s.r, s.x, s.u, s.x_next, s.A.ravel(), s.B.ravel()])
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def load_dataset(path):
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().split()
        if len(header) < 5 or header[0] != "#" or header[1] != "dccm-dataset":
            raise ValueError(f"{path} is not a dataset file")
        dims = dict(kv.split("=") for kv in header[3:])
        n, m, ell = int(dims["n"]), int(dims["m"]), int(dims["ell"])
        fh.readline()  # column comment
        samples = []
        width = ell + 2 * n + m + n * n + n * m
        for line in fh:
            row = np.array([float(v) for v in line.split(",")])
            if row.shape[0] != width:
                raise ValueError(f"dataset row has {row.shape[0]} fields, expected {width}")
            pos = 0

            def take(count):
                nonlocal pos
                out = row[pos : pos + count]
                pos += count
                return out

            samples.append(
                TrainingSample(
                    r=take(ell),
                    x=take(n),
                    u=take(m),
                    x_next=take(n),
                    A=take(n * n).reshape(n, n),
                    B=take(n * m).reshape(n, m),
                )
            )
    return samples


# -- loss graph --------------------------------------------------------------

class _LossGraph:
    """The per-sample minor graph, reused across iterations and batches.

    Inputs in creation order: all network parameters (flat_weights order),
    then x, x_next, r, A row-major, B row-major.  Outputs of interest are the
    leading-minor nodes of M and Omega.
    """

    def __init__(self, w: dccm_net.NetworkWeights, beta: float):
        n, m, ell = w.n, w.m, w.ell
        g = diffcore.Graph()
        structured, self.wexprs = dccm_net.graph_inputs(g, w)
        x_e = g.inputs(n)
        xn_e = g.inputs(n)
        r_e = g.inputs(ell)
        a_e = [[g.input() for _ in range(n)] for _ in range(n)]
        b_e = [[g.input() for _ in range(m)] for _ in range(n)]
        mm, kk = dccm_net.graph_forward(g, structured, w, x_e, r_e)
        mm_next, _ = dccm_net.graph_forward(g, structured, w, xn_e, r_e)
        # F = A + B K, then Omega = (1-beta) M - F^T M_next F.
        f_e = [
            [
                a_e[i][j] + _dot([b_e[i][k] for k in range(m)], [kk[k][j] for k in range(m)])
                for j in range(n)
            ]
            for i in range(n)
        ]
        t_e = [
            [_dot(mm_next[i], [f_e[l][j] for l in range(n)]) for j in range(n)]
            for i in range(n)
        ]
        omega = [
            [
                mm[i][j] * (1.0 - beta) - _dot([f_e[l][i] for l in range(n)], [t_e[l][j] for l in range(n)])
                for j in range(n)
            ]
            for i in range(n)
        ]
        self.graph = g
        self.minors_m = diffcore.det_leading_minors(mm)
        self.minors_omega = diffcore.det_leading_minors(omega)
        self.n_params = len(self.wexprs)
        self.n, self.m, self.ell = n, m, ell

    def _feed(self, wcols, xs, xns, rs, a2, b2):
        cols = list(wcols)
        cols += [xs[:, i] for i in range(self.n)]
        cols += [xns[:, i] for i in range(self.n)]
        cols += [rs[:, i] for i in range(self.ell)]
        cols += [a2[:, i] for i in range(self.n * self.n)]
        cols += [b2[:, i] for i in range(self.n * self.m)]
        return cols

    def minor_rows(self, wcols, xs, xns, rs, a2, b2):
        """Forward pass; returns (minors of M, minors of Omega) as row lists."""
        self.graph.forward(self._feed(wcols, xs, xns, rs, a2, b2))
        get = lambda e: np.atleast_1d(self.graph.value_of(e))
        return [get(e) for e in self.minors_m], [get(e) for e in self.minors_omega]

    def backward_sum(self, seeds):
        """Adjoint sweep; returns the batch-summed gradient over parameters."""
        grad = self.graph.backward_multi(seeds)
        return np.array([grad.sum_wrt(e) for e in self.wexprs])


def _dot(aa, bb):
    acc = None
    for a, b in zip(aa, bb):
        term = a * b
        acc = term if acc is None else acc + term
    return acc


_graph_cache: dict = {}


def _loss_graph(w: dccm_net.NetworkWeights, beta: float) -> _LossGraph:
    key = (
        w.n,
        w.m,
        w.ell,
        tuple((layer.w.shape, layer.act) for layer in w.layers),
        float(beta),
        w.x_box.lower.tobytes(),
        w.x_box.upper.tobytes(),
        w.r_box.lower.tobytes(),
        w.r_box.upper.tobytes(),
    )
    if key not in _graph_cache:
        _graph_cache[key] = _LossGraph(w, beta)
    return _graph_cache[key]


def _margins(value, count):
    out = np.atleast_1d(np.asarray(value, dtype=np.float64))
    if out.shape == (1,):
        out = np.full(count, out[0])
    if out.shape != (count,):
        raise ValueError(f"expected {count} margins, got shape {out.shape}")
    return out


def _hinge(minors, eps):
    """Loss rows and adjoint seeds for hinge terms max(0, eps - minor).

    Each leading minor is pushed above its positive margin, which is exactly
    Sylvester's positive-definiteness test with slack; the subgradient seed
    for an active term is -1 on that minor.
    """
    total = 0.0
    seeds = []
    active_any = False
    for row, margin in zip(minors, eps):
        active = row < margin
        total += float(np.sum((margin - row) * active))
        seeds.append(np.where(active, -1.0, 0.0))
        active_any = active_any or bool(np.any(active))
    return total, seeds, active_any


def _sample_arrays(samples, x_box: plant.Box):
    xs = np.stack([s.x for s in samples])
    xns = x_box.clip(np.stack([s.x_next for s in samples]))
    rs = np.stack([s.r for s in samples])
    a2 = np.stack([s.A.ravel() for s in samples])
    b2 = np.stack([s.B.ravel() for s in samples])
    return xs, xns, rs, a2, b2


def _batch_loss_and_grad(lg, wvec, arrays, eps_m, eps_o, need_grad=True, chunk=_CHUNK):
    xs, xns, rs, a2, b2 = arrays
    wcols = [np.array([v]) for v in wvec]
    total = 0.0
    grad = np.zeros(lg.n_params) if need_grad else None
    for start in range(0, xs.shape[0], chunk):
        sl = slice(start, start + chunk)
        mm, mo = lg.minor_rows(wcols, xs[sl], xns[sl], rs[sl], a2[sl], b2[sl])
        for rows, what in ((mm, "M"), (mo, "Omega")):
            for k, row in enumerate(rows):
                bad = np.flatnonzero(~np.isfinite(row))
                if bad.size:
                    raise RuntimeError(
                        f"non-finite loss: sample {start + bad[0]}, minor {k + 1} of {what}"
                    )
        lm, seeds_m, act_m = _hinge(mm, eps_m)
        lo, seeds_o, act_o = _hinge(mo, eps_o)
        total += lm + lo
        if need_grad and (act_m or act_o):
            seeds = {e: s for e, s in zip(lg.minors_m, seeds_m)}
            for e, s in zip(lg.minors_omega, seeds_o):
                seeds[e] = seeds.get(e, 0.0) + s
            grad += lg.backward_sum(seeds)
    return total, grad


def loss(w: dccm_net.NetworkWeights, sample: TrainingSample, cfg: TrainerConfig):
    """Hinge loss of one sample and its gradient over all parameters."""
    lg = _loss_graph(w, cfg.beta)
    arrays = _sample_arrays([sample], w.x_box)
    eps_m = _margins(cfg.eps_m, w.n)
    eps_o = _margins(cfg.eps_omega, w.n)
    value, grad = _batch_loss_and_grad(lg, dccm_net.flat_weights(w), arrays, eps_m, eps_o)
    return value, grad


def total_loss(w, samples, cfg):
    lg = _loss_graph(w, cfg.beta)
    arrays = _sample_arrays(samples, w.x_box)
    eps_m = _margins(cfg.eps_m, w.n)
    eps_o = _margins(cfg.eps_omega, w.n)
    value, _ = _batch_loss_and_grad(
        lg, dccm_net.flat_weights(w), arrays, eps_m, eps_o, need_grad=False
    )
    return value


def fd_gradient(w, sample, cfg, h=1e-5):
    """Central-difference loss gradient over all parameters.

    All 2P perturbed evaluations run as one batch along the parameter axis
    (weights are graph inputs like any other), so this stays fast enough to
    serve as the acceptance oracle.  No adjoint code is involved.
    """
    lg = _loss_graph(w, cfg.beta)
    wvec = dccm_net.flat_weights(w)
    p = wvec.shape[0]
    wcols = []
    for i, v in enumerate(wvec):
        col = np.full(2 * p, v)
        col[2 * i] = v + h
        col[2 * i + 1] = v - h
        wcols.append(col)
    xs, xns, rs, a2, b2 = _sample_arrays([sample], w.x_box)
    mm, mo = lg.minor_rows(wcols, xs, xns, rs, a2, b2)
    eps_m = _margins(cfg.eps_m, w.n)
    eps_o = _margins(cfg.eps_omega, w.n)
    rows = np.zeros(2 * p)
    for minors, eps in ((mm, eps_m), (mo, eps_o)):
        for row, margin in zip(minors, eps):
            rows += np.maximum(0.0, margin - row)
    return (rows[0::2] - rows[1::2]) / (2.0 * h)


def train(model: plant.UncertainModel, cfg: TrainerConfig, dataset=None):
    """Full-batch minor-hinge training; returns (weights, loss history).

    The loss is checked before each step, so a tolerance of +inf returns the
    initial weights untouched.  The returned weights are the lowest-loss
    iterate seen; the history records every evaluated loss in order.
    """
    if dataset is None:
        dataset = generate_dataset(model, cfg)
    if not dataset:
        raise ValueError("empty dataset")
    w = dccm_net.init_weights(
        model.n, model.m, model.ell, cfg.hidden, model.x_box, model.r_box, cfg.seed
    )
    lg = _loss_graph(w, cfg.beta)
    arrays = _sample_arrays(dataset, w.x_box)
    eps_m = _margins(cfg.eps_m, w.n)
    eps_o = _margins(cfg.eps_omega, w.n)
    wvec = dccm_net.flat_weights(w)
    adam_m = np.zeros_like(wvec)
    adam_v = np.zeros_like(wvec)
    history = []
    best_loss = np.inf
    best_vec = wvec.copy()
    for it in range(cfg.max_iters + 1):
        value, grad = _batch_loss_and_grad(lg, wvec, arrays, eps_m, eps_o)
        history.append(value)
        if value < best_loss:
            best_loss = value
            best_vec = wvec.copy()
        if value < cfg.tol or it == cfg.max_iters:
            break
        if cfg.optimizer == "adam":
            adam_m = _ADAM_B1 * adam_m + (1.0 - _ADAM_B1) * grad
            adam_v = _ADAM_B2 * adam_v + (1.0 - _ADAM_B2) * grad * grad
            mhat = adam_m / (1.0 - _ADAM_B1 ** (it + 1))
            vhat = adam_v / (1.0 - _ADAM_B2 ** (it + 1))
            wvec = wvec - cfg.learning_rate * mhat / (np.sqrt(vhat) + _ADAM_EPS)
        else:
            wvec = wvec - cfg.learning_rate * grad
    return dccm_net.with_flat_weights(w, best_vec), history


# -- symmetric eigenvalues (no external linear algebra) -----------------------

def sym_eig_bounds(mats: np.ndarray):
    """(lambda_min, lambda_max) of a batch of symmetric matrices, n <= 4.

    Closed form for n <= 2, cyclic Jacobi sweeps above.
    """
    mats = np.asarray(mats, dtype=np.float64)
    squeeze = mats.ndim == 2
    if squeeze:
        mats = mats[None]
    n = mats.shape[-1]
    if n == 1:
        lo = hi = mats[:, 0, 0]
    elif n == 2:
        half_tr = 0.5 * (mats[:, 0, 0] + mats[:, 1, 1])
        gap = np.sqrt(
            (0.5 * (mats[:, 0, 0] - mats[:, 1, 1])) ** 2 + mats[:, 0, 1] ** 2
        )
        lo, hi = half_tr - gap, half_tr + gap
    elif n <= 4:
        lo = np.empty(mats.shape[0])
        hi = np.empty(mats.shape[0])
        for i, mat in enumerate(mats):
            ev = _jacobi_eigvals(mat)
            lo[i], hi[i] = ev[0], ev[-1]
    else:
        raise ValueError(f"eigenvalue bounds implemented for n <= 4, got {n}")
    if squeeze:
        return float(lo[0]), float(hi[0])
    return lo, hi


def _jacobi_eigvals(mat, sweeps=50, tol=1e-14):
    """Eigenvalues of a small symmetric matrix by cyclic Jacobi rotations."""
    a = np.array(mat, dtype=np.float64)
    n = a.shape[0]
    for _ in range(sweeps):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off = max(off, abs(a[p, q]))
                if abs(a[p, q]) <= tol * (abs(a[p, p]) + abs(a[q, q]) + tol):
                    continue
                theta = 0.5 * np.arctan2(2.0 * a[p, q], a[q, q] - a[p, p])
                c, s = np.cos(theta), np.sin(theta)
                rot = np.eye(n)
                rot[p, p] = rot[q, q] = c
                rot[p, q] = s
                rot[q, p] = -s
                a = rot.T @ a @ rot
        if off <= tol:
            break
    return np.sort(np.diag(a))


# -- mesh verification --------------------------------------------------------

@dataclass(frozen=True)
class VerificationReport:
    """Worst-case-over-u contraction margins per (x, r) cell."""

    points: np.ndarray  # (C, n+ell), x then r
    omega_min_desired: np.ndarray
    omega_min_relaxed: np.ndarray
    m_min: np.ndarray
    m_max: np.ndarray
    beta: float
    beta_l: float
    mesh: tuple
    pass_fraction_desired: float = field(init=False)
    pass_fraction_relaxed: float = field(init=False)
    m_lo: float = field(init=False)
    m_hi: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(
            self, "pass_fraction_desired", float(np.mean(self.omega_min_desired > 0.0))
        )
        object.__setattr__(
            self, "pass_fraction_relaxed", float(np.mean(self.omega_min_relaxed > 0.0))
        )
        object.__setattr__(self, "m_lo", float(np.min(self.m_min)))
        object.__setattr__(self, "m_hi", float(np.max(self.m_max)))

    def summary(self) -> str:
        lines = [
            f"verification mesh (x,u,r counts): {self.mesh}",
            f"cells: {self.points.shape[0]}",
            f"pass fraction at rate {self.beta}: {self.pass_fraction_desired:.4f}",
            f"pass fraction at rate {self.beta_l}: {self.pass_fraction_relaxed:.4f}",
            f"metric eigenvalue range: [{self.m_lo!r}, {self.m_hi!r}]",
            f"worst contraction margin (relaxed): {float(np.min(self.omega_min_relaxed))!r}",
        ]
        return "\n".join(lines)

    def to_csv(self, path):
        n_ell = self.points.shape[1]
        cols = [f"p{i+1}" for i in range(n_ell)]
        header = ",".join(
            cols + ["omega_min_desired", "omega_min_relaxed", "m_min", "m_max"]
        )
        with open(path, "w", encoding="ascii") as fh:
            fh.write(header + "\n")
            for i in range(self.points.shape[0]):
                row = list(self.points[i]) + [
                    self.omega_min_desired[i],
                    self.omega_min_relaxed[i],
                    self.m_min[i],
                    self.m_max[i],
                ]
                fh.write(",".join(repr(float(v)) for v in row) + "\n")


def default_mesh(cfg: TrainerConfig):
    """Verification mesh twice as fine as the training grid (count 2c-1)."""
    refine = lambda counts: tuple(2 * c - 1 for c in counts)
    return refine(cfg.x_counts), refine(cfg.u_counts), refine(cfg.r_counts)


def verify(
    w: dccm_net.NetworkWeights,
    model: plant.UncertainModel,
    cfg: TrainerConfig,
    mesh_counts=None,
) -> VerificationReport:
    """Contraction margins of the trained pair over an (x, u, r) mesh.

    For every mesh point, Omega is assembled at the desired and relaxed rates
    and reduced to its minimum eigenvalue; cells aggregate the worst case over
    the input mesh.  Metric eigenvalue bounds come from the same sweep.
    """
    x_counts, u_counts, r_counts = mesh_counts or default_mesh(cfg)
    xg = plant.grid(model.x_box, x_counts)
    ug = plant.grid(model.u_box, u_counts)
    rg = plant.grid(model.r_box, r_counts)
    px, pr = xg.shape[0], rg.shape[0]
    points = np.empty((pr * px, model.n + model.ell))
    omega_desired = np.empty(pr * px)
    omega_relaxed = np.empty(pr * px)
    m_min = np.empty(pr * px)
    m_max = np.empty(pr * px)
    for ir, r in enumerate(rg):
        rows = slice(ir * px, (ir + 1) * px)
        rtile = np.tile(r, (px, 1))
        mm, kk = dccm_net.evaluate_many(w, xg, rtile)
        lo, hi = sym_eig_bounds(mm)
        m_min[rows], m_max[rows] = lo, hi
        points[rows, : model.n] = xg
        points[rows, model.n :] = r
        worst_desired = np.full(px, np.inf)
        worst_relaxed = np.full(px, np.inf)
        for u in ug:
            a = model.A(r, xg, u)
            b = model.B(r, xg)
            xn = model.x_box.clip(model.f(r, xg) + (model.g(r, xg) @ u))
            mn = dccm_net.evaluate_many(w, xn, rtile)[0]
            f_cl = a + b @ kk
            ft_mn_f = np.matmul(np.transpose(f_cl, (0, 2, 1)), np.matmul(mn, f_cl))
            lo_d, _ = sym_eig_bounds((1.0 - cfg.beta) * mm - ft_mn_f)
            lo_r, _ = sym_eig_bounds((1.0 - cfg.beta_l) * mm - ft_mn_f)
            worst_desired = np.minimum(worst_desired, lo_d)
            worst_relaxed = np.minimum(worst_relaxed, lo_r)
        omega_desired[rows] = worst_desired
        omega_relaxed[rows] = worst_relaxed
    return VerificationReport(
        points=points,
        omega_min_desired=omega_desired,
        omega_min_relaxed=omega_relaxed,
        m_min=m_min,
        m_max=m_max,
        beta=cfg.beta,
        beta_l=cfg.beta_l,
        mesh=(tuple(x_counts), tuple(u_counts), tuple(r_counts)),
    )
