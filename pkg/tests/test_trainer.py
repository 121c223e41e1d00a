"""Dataset generation, the minor-hinge loss against hand-set networks and
finite differences, the training loop on a hand-checkable linear system,
mesh verification with prescribed stubs, and the eigenvalue helpers."""

import dataclasses

import numpy as np
import pytest

from conftest import constant_pair_stub
from dccm import dccm_net as net, plant, trainer

XB = plant.CSTR_X_BOX
RB = plant.CSTR_R_BOX


def small_cfg(**over):
    base = dict(
        x_counts=(3, 3),
        u_counts=(2,),
        r_counts=(2, 2),
        hidden=(4, 4),
        max_iters=50,
        seed=1,
    )
    base.update(over)
    return trainer.TrainerConfig(**base)


# -- dataset -----------------------------------------------------------------

def test_dataset_cardinality_small(model):
    cfg = trainer.TrainerConfig(x_counts=(2, 2), u_counts=(1,), r_counts=(1, 1))
    ds = trainer.generate_dataset(model, cfg)
    assert len(ds) == 4


def test_dataset_cardinality_default(model):
    cfg = trainer.TrainerConfig()
    ds = trainer.generate_dataset(model, cfg)
    assert len(ds) == 11 * 13 * 5 * 5 * 5


def test_dataset_samples_recheck_against_step(model):
    ds = trainer.generate_dataset(model, small_cfg())
    for s in ds:
        assert np.array_equal(s.x_next, plant.step(model, s.r, s.x, s.u))
        A, B = plant.jacobians(model, s.r, s.x, s.u)
        assert np.array_equal(s.A, A) and np.array_equal(s.B, B)


def test_dataset_round_trip(tmp_path, model):
    ds = trainer.generate_dataset(model, small_cfg())
    path = tmp_path / "dataset.txt"
    trainer.save_dataset(ds, path)
    back = trainer.load_dataset(path)
    assert len(back) == len(ds)
    for a, b in zip(ds, back):
        assert np.array_equal(a.x, b.x) and np.array_equal(a.x_next, b.x_next)
        assert np.array_equal(a.r, b.r) and np.array_equal(a.u, b.u)
        assert np.array_equal(a.A, b.A) and np.array_equal(a.B, b.B)


# -- loss --------------------------------------------------------------------

def _sample_with(model, A, x=np.array([0.6, 0.2]), r=np.array([1.25, 1.375])):
    """Training sample with a prescribed linearization (decouples the loss
    check from reactor dynamics)."""
    u = np.array([0.0])
    return trainer.TrainingSample(
        r=r, x=x, u=u, x_next=x.copy(), A=np.asarray(A, dtype=np.float64),
        B=np.array([[0.0], [1.0]]),
    )


def test_loss_zero_when_margins_clear(model):
    # M = I, K = 0, A = 0: the contraction gap is 0.74 I, all four minors
    # (1, 1, 0.74, 0.5476) clear the 0.01 margin, so the hinge is inactive.
    w = constant_pair_stub(np.eye(2), np.zeros((1, 2)), XB, RB)
    cfg = small_cfg()
    sample = _sample_with(model, np.zeros((2, 2)))
    value, grad = trainer.loss(w, sample, cfg)
    assert value == 0.0
    assert np.array_equal(grad, np.zeros_like(grad))


def test_loss_single_active_minor_contribution(model):
    # A = diag(sqrt(0.735), 0), M = I, K = 0 gives gap minors
    # (0.005, 0.0037): the first contributes 0.01 - 0.005 = 0.005 and the
    # second 0.0063, while both metric minors stay clear.
    a11 = np.sqrt(0.735)
    w = constant_pair_stub(np.eye(2), np.zeros((1, 2)), XB, RB)
    cfg = small_cfg()
    sample = _sample_with(model, np.diag([a11, 0.0]))
    value, _ = trainer.loss(w, sample, cfg)
    gap1 = 0.74 - 0.735
    gap2 = gap1 * 0.74
    want = (0.01 - gap1) + (0.01 - gap2)
    assert value == pytest.approx(want, abs=1e-12)


def test_loss_nonnegative_random_draws(model):
    cfg = small_cfg()
    ds = trainer.generate_dataset(model, cfg)
    rng = np.random.default_rng(4)
    for seed in range(5):
        w = net.init_weights(2, 1, 2, cfg.hidden, XB, RB, seed=seed)
        for s in (ds[i] for i in rng.integers(0, len(ds), 8)):
            value, _ = trainer.loss(w, s, cfg)
            assert value >= 0.0


def test_gradient_matches_finite_differences(model):
    cfg = small_cfg()
    ds = trainer.generate_dataset(model, cfg)
    rng = np.random.default_rng(9)
    checked = 0
    for seed in range(4):
        w = net.init_weights(2, 1, 2, cfg.hidden, XB, RB, seed=seed)
        for s in (ds[i] for i in rng.integers(0, len(ds), 4)):
            value, grad = trainer.loss(w, s, cfg)
            fd = trainer.fd_gradient(w, s, cfg)
            scale = max(np.linalg.norm(fd), 1e-12)
            assert np.linalg.norm(grad - fd) / scale < 1e-5
            checked += 1
    assert checked == 16


def test_fd_gradient_matches_naive_two_point():
    # the batched-oracle construction itself cross-checked against literal
    # one-at-a-time loss evaluations on a few coordinates
    model = plant.cstr()
    cfg = small_cfg()
    ds = trainer.generate_dataset(model, cfg)
    w = net.init_weights(2, 1, 2, cfg.hidden, XB, RB, seed=2)
    s = max(ds, key=lambda d: trainer.loss(w, d, cfg)[0])
    fd = trainer.fd_gradient(w, s, cfg, h=1e-5)
    vec = net.flat_weights(w)
    for idx in (0, 7, vec.shape[0] // 2, vec.shape[0] - 1):
        vp, vm = vec.copy(), vec.copy()
        vp[idx] += 1e-5
        vm[idx] -= 1e-5
        lp, _ = trainer.loss(net.with_flat_weights(w, vp), s, cfg)
        lm, _ = trainer.loss(net.with_flat_weights(w, vm), s, cfg)
        naive = (lp - lm) / 2e-5
        assert fd[idx] == pytest.approx(naive, rel=1e-9, abs=1e-12)


def test_total_loss_is_sum_of_sample_losses(model):
    cfg = small_cfg()
    ds = trainer.generate_dataset(model, cfg)[:10]
    w = net.init_weights(2, 1, 2, cfg.hidden, XB, RB, seed=3)
    total = trainer.total_loss(w, ds, cfg)
    summed = sum(trainer.loss(w, s, cfg)[0] for s in ds)
    assert total == pytest.approx(summed, rel=1e-12)


def test_non_finite_loss_aborts_with_diagnostic():
    model = plant.cstr()
    cfg = small_cfg()
    w = constant_pair_stub(np.eye(2), np.zeros((1, 2)), XB, RB)
    bad = _sample_with(model, np.array([[np.nan, 0.0], [0.0, 0.0]]))
    with pytest.raises(RuntimeError, match="sample"):
        trainer.total_loss(w, [bad], cfg)


# -- training loop -----------------------------------------------------------

def test_infinite_tolerance_returns_initial_weights(model):
    cfg = small_cfg(tol=float("inf"))
    w, hist = trainer.train(model, cfg)
    init = net.init_weights(2, 1, 2, cfg.hidden, XB, RB, seed=cfg.seed)
    for a, b in zip(w.layers, init.layers):
        assert np.array_equal(a.w, b.w) and np.array_equal(a.b, b.b)
    assert len(hist) == 1


def test_history_is_monotone_recorded(model):
    cfg = small_cfg(max_iters=30)
    _, hist = trainer.train(model, cfg)
    assert len(hist) >= 2
    assert hist[-1] == min(hist)


def test_training_deterministic(model):
    cfg = small_cfg(max_iters=15)
    w1, h1 = trainer.train(model, cfg)
    w2, h2 = trainer.train(model, cfg)
    assert h1 == h2
    for a, b in zip(w1.layers, w2.layers):
        assert np.array_equal(a.w, b.w) and np.array_equal(a.b, b.b)


def _scalar_linear_model():
    # x+ = 2 x + u on [-1, 1]: unstable open loop, contracting under
    # feedback since (2 + k)^2 m_next < (1 - beta) m is satisfiable (k -> -2).
    box1 = plant.Box(np.array([-1.0]), np.array([1.0]))
    return plant.UncertainModel(
        n=1,
        m=1,
        ell=1,
        x_box=box1,
        u_box=plant.Box(np.array([-4.0]), np.array([4.0])),
        r_box=box1,
        f=lambda r, x: 2.0 * x,
        g=lambda r, x: np.ones(x.shape[:-1] + (1, 1)),
        A=lambda r, x, u: np.full(x.shape[:-1] + (1, 1), 2.0),
        B=lambda r, x: np.ones(x.shape[:-1] + (1, 1)),
    )


def test_training_solves_scalar_linear_system():
    lin = _scalar_linear_model()
    cfg = trainer.TrainerConfig(
        x_counts=(5,), u_counts=(3,), r_counts=(1,), hidden=(8,),
        max_iters=2000, seed=0, learning_rate=0.01,
    )
    w, hist = trainer.train(lin, cfg)
    assert hist[-1] < cfg.tol
    rep = trainer.verify(w, lin, cfg)
    assert rep.pass_fraction_desired == 1.0
    assert rep.m_lo > 0.0


def test_gd_optimizer_descends(model):
    cfg = small_cfg(optimizer="gd", learning_rate=1e-3, max_iters=20)
    _, hist = trainer.train(model, cfg)
    assert hist[-1] < hist[0]


def test_unknown_optimizer_rejected():
    with pytest.raises(ValueError):
        small_cfg(optimizer="lbfgs")


def test_config_validation():
    with pytest.raises(ValueError):
        small_cfg(beta=0.0)
    with pytest.raises(ValueError):
        small_cfg(beta=0.2, beta_l=0.3)
    with pytest.raises(ValueError):
        small_cfg(eps_m=-0.01)


# -- verification ------------------------------------------------------------

def _linear_2d_model(a_scale):
    box = plant.Box(np.array([-1.0, -1.0]), np.array([1.0, 1.0]))
    return plant.UncertainModel(
        n=2,
        m=1,
        ell=2,
        x_box=box,
        u_box=plant.Box(np.array([-1.0]), np.array([1.0])),
        r_box=RB,
        f=lambda r, x: a_scale * x,
        g=lambda r, x: np.broadcast_to(
            np.array([[0.0], [1.0]]), x.shape[:-1] + (2, 1)
        ).copy(),
        A=lambda r, x, u: np.broadcast_to(
            a_scale * np.eye(2), x.shape[:-1] + (2, 2)
        ).copy(),
        B=lambda r, x: np.broadcast_to(
            np.array([[0.0], [1.0]]), x.shape[:-1] + (2, 1)
        ).copy(),
    )


def test_verify_full_pass_for_contracting_stub():
    lin = _linear_2d_model(0.5)
    w = constant_pair_stub(np.eye(2), np.zeros((1, 2)), lin.x_box, RB)
    cfg = small_cfg()
    rep = trainer.verify(w, lin, cfg)
    # Omega = -0.25 I + 0.74 I = 0.49 I at every point
    assert rep.pass_fraction_desired == 1.0
    assert rep.pass_fraction_relaxed == 1.0
    assert rep.omega_min_desired == pytest.approx(0.49, abs=1e-12)
    assert rep.m_lo == pytest.approx(1.0, abs=1e-12)
    assert rep.m_hi == pytest.approx(1.0, abs=1e-12)


def test_verify_zero_pass_for_identity_dynamics():
    lin = _linear_2d_model(1.0)
    w = constant_pair_stub(np.eye(2), np.zeros((1, 2)), lin.x_box, RB)
    rep = trainer.verify(w, lin, small_cfg())
    # Omega = -I + (1 - beta) I is negative definite for any beta > 0
    assert rep.pass_fraction_desired == 0.0
    assert rep.pass_fraction_relaxed == 0.0


def test_verify_mesh_is_twice_as_fine(model):
    cfg = small_cfg()
    assert trainer.default_mesh(cfg) == ((5, 5), (3,), (3, 3))
    w = constant_pair_stub(np.eye(2), np.zeros((1, 2)), XB, RB)
    rep = trainer.verify(w, model, cfg)
    assert rep.mesh == ((5, 5), (3,), (3, 3))
    # one report cell per (x, r) pair; the input mesh is folded into the
    # worst case inside each cell
    assert rep.points.shape == (5 * 5 * 3 * 3, 4)
    rep2 = trainer.verify(w, model, cfg, mesh_counts=((2, 2), (1,), (1, 1)))
    assert rep2.points.shape[0] == 4


def test_verify_sylvester_consistency(model):
    # wherever all leading minors of M are positive, the reported minimum
    # eigenvalue must be positive too (two definiteness tests agree)
    w = net.init_weights(2, 1, 2, (6,), XB, RB, seed=13)
    cfg = small_cfg()
    mesh = ((4, 4), (2,), (2, 2))
    xs = plant.grid(model.x_box, mesh[0])
    rs = plant.grid(model.r_box, mesh[2])
    for r in rs:
        mm, _ = net.evaluate_many(w, xs, np.tile(r, (xs.shape[0], 1)))
        lo, _ = trainer.sym_eig_bounds(mm)
        minor1 = mm[:, 0, 0]
        minor2 = mm[:, 0, 0] * mm[:, 1, 1] - mm[:, 0, 1] * mm[:, 1, 0]
        sylvester = (minor1 > 0) & (minor2 > 0)
        assert np.array_equal(sylvester, lo > 0)


def test_report_csv_and_summary(tmp_path, model):
    w = constant_pair_stub(np.eye(2), np.zeros((1, 2)), XB, RB)
    cfg = small_cfg()
    rep = trainer.verify(w, model, cfg, mesh_counts=((3, 3), (2,), (2, 2)))
    out = tmp_path / "report.csv"
    rep.to_csv(out)
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "p1,p2,p3,p4,omega_min_desired,omega_min_relaxed,m_min,m_max"
    assert len(lines) == 1 + 9 * 4
    text = rep.summary()
    assert "pass fraction" in text


# -- eigenvalue helpers --------------------------------------------------------

def test_eig_bounds_match_numpy():
    rng = np.random.default_rng(21)
    for n in (2, 3, 4):
        base = rng.uniform(-1.0, 1.0, size=(40, n, n))
        sym = 0.5 * (base + np.transpose(base, (0, 2, 1)))
        lo, hi = trainer.sym_eig_bounds(sym)
        want = np.linalg.eigvalsh(sym)
        assert np.max(np.abs(lo - want[:, 0])) < 1e-10
        assert np.max(np.abs(hi - want[:, -1])) < 1e-10


def test_eig_bounds_reject_unsupported():
    with pytest.raises(ValueError):
        trainer.sym_eig_bounds(np.zeros((2, 5, 5)))
