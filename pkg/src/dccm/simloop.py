"""Closed-loop orchestration: plant with the true parameter, controller and
reference generator with the estimate, moving-horizon identification, CSV
logging, and TOML configuration.

Step order is fixed: update the estimate (when active and the window is
full), regenerate the reference if the estimate changed or the schedule
switched, compute the control, then advance the true plant.  The final row
logs the terminal state through the same pipeline without advancing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

from . import ctrl, dccm_net, mhe, plant, riemann, trainer

FLAG_ESTIMATOR_ACTIVE = 1
FLAG_SATURATED = 2
FLAG_GEODESIC_WARNING = 4
FLAG_REFERENCE_HELD = 8

CSV_HEADER = "t,x1,x2,x1_star,x2_star,u,u_star,da1_hat,da2_hat,d_geo,flags"


class ConfigError(ValueError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing config keys: " + ", ".join(self.missing))


class SimulationError(RuntimeError):
    """Aborted run; carries the step index and the rows logged so far."""

    def __init__(self, step, rows, message):
        super().__init__(f"step {step}: {message}")
        self.step = step
        self.rows = rows


@dataclass(frozen=True)
class ScenarioConfig:
    params: plant.CstrParams
    x_box: plant.Box
    u_box: plant.Box
    r_box: plant.Box
    trainer: trainer.TrainerConfig
    segments: int
    geodesic: riemann.GeodesicOptions
    horizon: int
    mhe: mhe.MheOptions
    x0: np.ndarray
    r_hat0: np.ndarray
    schedule: ctrl.SetpointSchedule
    estimator_start: float
    duration: float
    weights_path: str
    dataset_path: str
    trajectory_path: str
    report_path: str
    summary_path: str

    def __post_init__(self):
        dt = self.params.dt
        for name, value in (("duration", self.duration), ("estimator_start", self.estimator_start)):
            steps = round(value / dt)
            if abs(steps * dt - value) > 1e-12:
                raise ValueError(f"{name} is not a multiple of the time step")
        if not self.x_box.contains(self.x0):
            raise ValueError("initial state outside the state box")

    @property
    def r_true(self) -> np.ndarray:
        return self.params.r

    def model(self) -> plant.UncertainModel:
        return plant.cstr(self.params, self.x_box, self.u_box, self.r_box)


_REQUIRED = {
    "model": ("alpha", "zeta", "dt", "da1_true", "da2_true"),
    "boxes": ("x_lower", "x_upper", "u_lower", "u_upper", "r_lower", "r_upper"),
    "trainer": (
        "beta",
        "beta_l",
        "eps_m",
        "eps_omega",
        "learning_rate",
        "max_iters",
        "tol",
        "x_counts",
        "u_counts",
        "r_counts",
        "hidden",
        "seed",
        "optimizer",
    ),
    "geodesic": ("segments", "max_iters", "tol"),
    "mhe": ("horizon", "sigma_tol", "max_iters"),
    "scenario": ("x0", "r_hat0", "duration", "estimator_start", "setpoints"),
    "paths": ("weights", "dataset", "trajectory", "report", "summary"),
}


def load_config(path) -> ScenarioConfig:
    """Parse and validate a scenario TOML file; lists every missing key."""
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    missing = []
    for section, keys in _REQUIRED.items():
        table = doc.get(section)
        if table is None:
            missing.extend(f"{section}.{key}" for key in keys)
            continue
        missing.extend(f"{section}.{key}" for key in keys if key not in table)
    if missing:
        raise ConfigError(missing)
    md, bx, tr = doc["model"], doc["boxes"], doc["trainer"]
    gd, mh, sc, pt = doc["geodesic"], doc["mhe"], doc["scenario"], doc["paths"]
    vec = lambda v: np.asarray(v, dtype=np.float64)
    return ScenarioConfig(
        params=plant.CstrParams(
            alpha=float(md["alpha"]),
            zeta=float(md["zeta"]),
            da1=float(md["da1_true"]),
            da2=float(md["da2_true"]),
            dt=float(md["dt"]),
        ),
        x_box=plant.Box(vec(bx["x_lower"]), vec(bx["x_upper"])),
        u_box=plant.Box(vec(bx["u_lower"]), vec(bx["u_upper"])),
        r_box=plant.Box(vec(bx["r_lower"]), vec(bx["r_upper"])),
        trainer=trainer.TrainerConfig(
            beta=float(tr["beta"]),
            beta_l=float(tr["beta_l"]),
            eps_m=float(tr["eps_m"]),
            eps_omega=float(tr["eps_omega"]),
            learning_rate=float(tr["learning_rate"]),
            max_iters=int(tr["max_iters"]),
            tol=float(tr["tol"]),
            x_counts=tuple(int(c) for c in tr["x_counts"]),
            u_counts=tuple(int(c) for c in tr["u_counts"]),
            r_counts=tuple(int(c) for c in tr["r_counts"]),
            hidden=tuple(int(h) for h in tr["hidden"]),
            seed=int(tr["seed"]),
            optimizer=str(tr["optimizer"]),
        ),
        segments=int(gd["segments"]),
        geodesic=riemann.GeodesicOptions(
            max_iters=int(gd["max_iters"]), grad_tol=float(gd["tol"])
        ),
        horizon=int(mh["horizon"]),
        mhe=mhe.MheOptions(
            max_iters=int(mh["max_iters"]),
            sigma_tol=float(mh["sigma_tol"]),
            fd_step=float(mh.get("fd_step", 1e-6)),
            per_step_sequence=bool(mh.get("per_step_sequence", False)),
        ),
        x0=vec(sc["x0"]),
        r_hat0=vec(sc["r_hat0"]),
        schedule=ctrl.SetpointSchedule(tuple((float(t), float(v)) for t, v in sc["setpoints"])),
        estimator_start=float(sc["estimator_start"]),
        duration=float(sc["duration"]),
        weights_path=str(pt["weights"]),
        dataset_path=str(pt["dataset"]),
        trajectory_path=str(pt["trajectory"]),
        report_path=str(pt["report"]),
        summary_path=str(pt["summary"]),
    )


@dataclass(frozen=True)
class LogRow:
    t: float
    x: np.ndarray
    x_star: np.ndarray
    u: np.ndarray
    u_star: np.ndarray
    r_hat: np.ndarray
    d_geo: float
    estimator_active: bool
    saturated: bool
    geodesic_warning: bool
    reference_held: bool

    @property
    def flags(self) -> int:
        return (
            (FLAG_ESTIMATOR_ACTIVE if self.estimator_active else 0)
            | (FLAG_SATURATED if self.saturated else 0)
            | (FLAG_GEODESIC_WARNING if self.geodesic_warning else 0)
            | (FLAG_REFERENCE_HELD if self.reference_held else 0)
        )


@dataclass(frozen=True)
class TrajectoryLog:
    rows: tuple

    def to_csv(self, path):
        write_rows(self.rows, path)


def write_rows(rows, path):
    """Fixed-header CSV with full round-trip float formatting."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write(CSV_HEADER + "\n")
        for row in rows:
            values = [
                row.t,
                row.x[0],
                row.x[1],
                row.x_star[0],
                row.x_star[1],
                row.u[0],
                row.u_star[0],
                row.r_hat[0],
                row.r_hat[1],
                row.d_geo,
            ]
            fh.write(",".join(repr(float(v)) for v in values) + f",{row.flags}\n")


def run(cfg: ScenarioConfig, weights: dccm_net.NetworkWeights = None) -> TrajectoryLog:
    """Simulate the scenario; the estimator sees only (x, u) history.

    The plant always steps with the true parameter; the controller, reference
    generator and estimator work from the estimate.  Estimation at step k
    includes the transition into x_k (the window snapshot is topped up with
    the current state before solving).  Deterministic for a fixed config and
    weight file.
    """
    model = cfg.model()
    if weights is None:
        weights = dccm_net.load_weights(cfg.weights_path)
    _check_weights(weights, model)
    if model.n != 2 or model.m != 1 or model.ell != 2:
        raise ValueError("the simulation log format expects n=2, m=1, ell=2")
    dt = cfg.params.dt
    steps = round(cfg.duration / dt)
    est_start = round(cfg.estimator_start / dt)
    window = mhe.EstimationWindow(cfg.horizon)
    x = cfg.x0.copy()
    r_hat = cfg.r_hat0.copy()
    ref = None
    prev_setpoint = None
    rows = []
    for k in range(steps + 1):
        t = k * dt
        active = k >= est_start
        r_changed = False
        if active:
            snap = window.copy()
            snap.push(x, np.zeros(model.m))
            if snap.full:
                est = mhe.estimate(model, snap, r_hat, cfg.mhe)
                r_changed = not np.array_equal(est.r_hat, r_hat)
                r_hat = est.r_hat
        setpoint = cfg.schedule.active(t)
        switched = prev_setpoint is None or setpoint != prev_setpoint
        prev_setpoint = setpoint
        reference_held = False
        if ref is None or r_changed or switched:
            try:
                ref = ctrl.generate_reference(model, r_hat, setpoint)
            except (ctrl.InfeasibleReferenceError, ctrl.SaturatedReferenceError) as exc:
                if ref is None:
                    raise SimulationError(k, rows, str(exc)) from exc
                reference_held = True
        try:
            res = ctrl.control(
                weights, x, ref, r_hat, model.u_box, cfg.segments, cfg.geodesic
            )
        except RuntimeError as exc:
            raise SimulationError(k, rows, str(exc)) from exc
        rows.append(
            LogRow(
                t=t,
                x=x.copy(),
                x_star=ref.x_star.copy(),
                u=res.u.copy(),
                u_star=ref.u_star.copy(),
                r_hat=r_hat.copy(),
                d_geo=res.path.length,
                estimator_active=active,
                saturated=res.saturated,
                geodesic_warning=not res.path.converged,
                reference_held=reference_held,
            )
        )
        if k < steps:
            window.push(x, res.u)
            x = plant.step(model, cfg.r_true, x, res.u)
            if not np.isfinite(x).all():
                raise SimulationError(k, rows, "non-finite state after plant step")
    return TrajectoryLog(tuple(rows))


def _check_weights(w: dccm_net.NetworkWeights, model: plant.UncertainModel):
    if (w.n, w.m, w.ell) != (model.n, model.m, model.ell):
        raise ValueError(
            f"weight dimensions ({w.n},{w.m},{w.ell}) do not match the model "
            f"({model.n},{model.m},{model.ell})"
        )
    for got, want, name in (
        (w.x_box, model.x_box, "state"),
        (w.r_box, model.r_box, "parameter"),
    ):
        if not (
            np.allclose(got.lower, want.lower) and np.allclose(got.upper, want.upper)
        ):
            raise ValueError(f"weight {name} scaling box differs from the configured box")


@dataclass(frozen=True)
class RunSummary:
    final_error: float
    convergence_step: int | None
    mean_factor_mismatched: float
    mean_factor_converged: float
    param_errors: tuple

    def to_text(self) -> str:
        conv = "never" if self.convergence_step is None else str(self.convergence_step)
        lines = [
            f"final tracking error |x - x*|: {self.final_error!r}",
            f"parameter convergence step: {conv}",
            f"mean contraction factor, mismatched phase: {self.mean_factor_mismatched!r}",
            f"mean contraction factor, after convergence: {self.mean_factor_converged!r}",
            "parameter error |r_hat - r| per step: "
            + " ".join(repr(e) for e in self.param_errors),
        ]
        return "\n".join(lines)


def summarize(log: TrajectoryLog, r_true, tol=1e-3) -> RunSummary:
    """Tracking error, convergence step, and per-phase contraction factors.

    Contraction factors are ratios d_{k+1}/d_k over consecutive rows that
    share a reference (ratios across reference switches measure the setpoint
    jump, not contraction).
    """
    rows = log.rows
    r_true = np.asarray(r_true, dtype=np.float64)
    param_errors = tuple(
        float(np.max(np.abs(row.r_hat - r_true))) for row in rows
    )
    convergence = next((k for k, e in enumerate(param_errors) if e < tol), None)
    before, after = [], []
    for k in range(len(rows) - 1):
        a, b = rows[k], rows[k + 1]
        if not np.allclose(a.x_star, b.x_star, atol=1e-9):
            continue
        if a.d_geo <= 1e-12:
            continue
        ratio = b.d_geo / a.d_geo
        if convergence is not None and k >= convergence:
            after.append(ratio)
        else:
            before.append(ratio)
    mean = lambda vals: float(np.mean(vals)) if vals else float("nan")
    final = rows[-1]
    return RunSummary(
        final_error=float(np.linalg.norm(final.x - final.x_star)),
        convergence_step=convergence,
        mean_factor_mismatched=mean(before),
        mean_factor_converged=mean(after),
        param_errors=param_errors,
    )
