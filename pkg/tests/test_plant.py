"""Reactor model values against hand-computed updates and closed-form
equilibria, Jacobians against finite differences, box and grid utilities."""

import warnings

import numpy as np
import pytest

from dccm import plant

R_TRUE = np.array([1.25, 1.375])


def _arrhenius(x2, a=0.8):
    return np.exp(a * x2 / (a + x2))


def test_step_matches_hand_evaluation(model):
    x = np.array([0.6, 0.25])
    u = np.array([0.04])
    e = _arrhenius(0.25)
    want = np.array(
        [
            (1.0 - 0.1 * 0.1) * 0.6 + 0.1 * R_TRUE[0] * 0.4 * e,
            (1.0 - 0.1) * 0.25 + 0.1 * R_TRUE[1] * 0.4 * e + 0.04,
        ]
    )
    got = plant.step(model, R_TRUE, x, u)
    assert np.allclose(got, want, atol=1e-15)


def test_equilibrium_closed_form(model):
    # At an equilibrium with temperature held at x2*, the concentration row
    # solves to x1* = r1 e / (zeta + r1 e) and the input row gives u* exactly.
    for x2s, x1_expect in ((0.2, 0.936), (0.3, 0.940)):
        e = _arrhenius(x2s)
        x1s = R_TRUE[0] * e / (0.1 + R_TRUE[0] * e)
        us = 0.1 * x2s - 0.1 * R_TRUE[1] * (1.0 - x1s) * e
        assert x1s == pytest.approx(x1_expect, abs=1e-3)
        xs = np.array([x1s, x2s])
        nxt = plant.step(model, R_TRUE, xs, np.array([us]))
        assert np.max(np.abs(nxt - xs)) < 1e-14


def test_input_enters_affinely(model):
    # x+(u) - x+(0) must equal B u exactly for the control-affine form.
    x = np.array([0.7, 0.4])
    base = plant.step(model, R_TRUE, x, np.array([0.0]))
    for uv in (-0.8, 0.3, 1.0):
        shifted = plant.step(model, R_TRUE, x, np.array([uv]))
        assert np.allclose(shifted - base, np.array([0.0, uv]), atol=1e-15)


def test_gain_matrix_is_unit_temperature_column(model):
    x = np.array([0.5, 0.1])
    _, B = plant.jacobians(model, R_TRUE, x, np.array([0.0]))
    assert np.array_equal(B, np.array([[0.0], [1.0]]))


def test_jacobian_matches_finite_differences(model):
    rng = np.random.default_rng(12)
    h = 1e-7
    for _ in range(200):
        x = rng.uniform(model.x_box.lower, model.x_box.upper)
        u = rng.uniform(model.u_box.lower, model.u_box.upper)
        r = rng.uniform(model.r_box.lower, model.r_box.upper)
        A, B = plant.jacobians(model, r, x, u)
        for d in range(2):
            xp, xm = x.copy(), x.copy()
            xp[d] += h
            xm[d] -= h
            col = (plant.step(model, r, xp, u) - plant.step(model, r, xm, u)) / (2 * h)
            assert np.max(np.abs(A[:, d] - col)) < 1e-7
        up, um = u + h, u - h
        col = (plant.step(model, r, x, up) - plant.step(model, r, x, um)) / (2 * h)
        assert np.max(np.abs(B[:, 0] - col)) < 1e-7


def test_step_warns_outside_parameter_box(model):
    x = np.array([0.6, 0.2])
    with pytest.warns(RuntimeWarning):
        plant.step(model, np.array([0.5, 1.375]), x, np.array([0.0]))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        plant.step(model, R_TRUE, x, np.array([0.0]))


def test_step_rejects_bad_shapes(model):
    with pytest.raises(ValueError):
        plant.step(model, R_TRUE, np.array([0.6, 0.2, 0.1]), np.array([0.0]))
    with pytest.raises(ValueError):
        plant.step(model, R_TRUE, np.array([0.6, 0.2]), np.array([0.0, 0.0]))
    with pytest.raises(ValueError):
        plant.step(model, np.array([1.25]), np.array([0.6, 0.2]), np.array([0.0]))


def test_linear_system_model():
    # A hand-built scalar linear plant: x+ = 0.5 x + u.
    box1 = plant.Box(np.array([-1.0]), np.array([1.0]))
    lin = plant.UncertainModel(
        n=1,
        m=1,
        ell=1,
        x_box=box1,
        u_box=box1,
        r_box=box1,
        f=lambda r, x: 0.5 * x,
        g=lambda r, x: np.ones(x.shape[:-1] + (1, 1)),
        A=lambda r, x, u: np.full(x.shape[:-1] + (1, 1), 0.5),
        B=lambda r, x: np.ones(x.shape[:-1] + (1, 1)),
    )
    got = plant.step(lin, np.array([0.0]), np.array([0.4]), np.array([0.3]))
    assert got == pytest.approx(np.array([0.5]), abs=1e-15)
    A, B = plant.jacobians(lin, np.array([0.0]), np.array([0.4]), np.array([0.3]))
    assert A[0, 0] == 0.5 and B[0, 0] == 1.0


def test_box_basics():
    box = plant.Box(np.array([0.0, -1.0]), np.array([2.0, 1.0]))
    assert box.dim == 2
    assert box.contains(np.array([1.0, 0.0]))
    assert not box.contains(np.array([3.0, 0.0]))
    assert box.contains(np.array([2.0 + 1e-12, 0.0]), tol=1e-9)
    clipped = box.clip(np.array([5.0, -7.0]))
    assert np.array_equal(clipped, np.array([2.0, -1.0]))
    unit = box.to_unit(np.array([0.0, 1.0]))
    assert np.array_equal(unit, np.array([-1.0, 1.0]))
    assert np.array_equal(box.to_unit(np.array([1.0, 0.0])), np.zeros(2))


def test_box_rejects_inverted_bounds():
    with pytest.raises(ValueError):
        plant.Box(np.array([1.0]), np.array([0.0]))


def test_grid_counts_and_order():
    box = plant.Box(np.array([0.0, 0.0]), np.array([1.0, 2.0]))
    pts = plant.grid(box, (3, 2))
    assert pts.shape == (6, 2)
    # itertools.product order: first coordinate outer, second inner
    assert np.allclose(pts[0], [0.0, 0.0])
    assert np.allclose(pts[1], [0.0, 2.0])
    assert np.allclose(pts[-1], [1.0, 2.0])
    mid = plant.grid(box, (1, 1))
    assert np.allclose(mid, [[0.5, 1.0]])
    with pytest.raises(ValueError):
        plant.grid(box, (0, 2))
    with pytest.raises(ValueError):
        plant.grid(box, (3,))


def test_cstr_params_validate_damkoehler_box():
    with pytest.raises(ValueError):
        plant.CstrParams(da1=0.5)
    p = plant.CstrParams()
    assert np.array_equal(p.r, R_TRUE)


def test_cstr_box_overrides():
    wide = plant.Box(np.array([-5.0, -5.0]), np.array([5.0, 5.0]))
    m = plant.cstr(x_box=wide)
    assert np.array_equal(m.x_box.lower, wide.lower)
    assert np.array_equal(m.u_box.lower, plant.CSTR_U_BOX.lower)
