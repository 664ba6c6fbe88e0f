import math

import numpy as np
import pytest

from geoweb.numkit import (
    Lattice,
    OdeProblem,
    StepSizeUnderflow,
    central_diff,
    grid_gradient,
    march_grid,
    real_roots,
    rk4_fixed,
    rk45_adaptive,
)


def growth(t, y):
    return y


def oscillator(t, s):
    return np.array([s[1], -s[0]])


# -- fixed step --------------------------------------------------------------

def test_rk4_exponential():
    traj = rk4_fixed(growth, 0.0, np.array([1.0]), 1.0, 100)
    assert abs(traj.y[-1, 0] - math.e) < 1e-9
    assert len(traj.t) == 101


def test_rk4_zero_rhs_is_exact():
    traj = rk4_fixed(lambda t, y: np.zeros_like(y), 0.0, np.array([0.3, -2.0]), 5.0, 7)
    assert np.all(traj.y == np.array([0.3, -2.0]))


def test_rk4_oscillator_energy_drift():
    periods = 10
    t1 = 2 * math.pi * periods
    traj = rk4_fixed(oscillator, 0.0, np.array([1.0, 0.0]), t1, int(round(t1 / 1e-3)))
    energy = 0.5 * (traj.y[:, 0] ** 2 + traj.y[:, 1] ** 2)
    assert np.max(np.abs(energy - 0.5)) < 1e-7


def test_rk4_convergence_order():
    errs = []
    for n in (40, 80, 160):
        traj = rk4_fixed(oscillator, 0.0, np.array([1.0, 0.0]), 3.0, n)
        errs.append(np.hypot(traj.y[-1, 0] - math.cos(3.0), traj.y[-1, 1] + math.sin(3.0)))
    orders = np.log2(np.array(errs[:-1]) / np.array(errs[1:]))
    assert np.all(np.abs(orders - 4) < 0.3)


def test_rk4_rejects_zero_steps():
    with pytest.raises(ValueError):
        rk4_fixed(growth, 0.0, np.array([1.0]), 1.0, 0)


# -- adaptive ----------------------------------------------------------------

def test_rk45_exponential():
    traj = rk45_adaptive(OdeProblem(growth, atol=1e-10, rtol=1e-10), 0.0, np.array([1.0]), 1.0)
    assert abs(traj.y[-1, 0] - math.e) < 1e-9
    assert traj.t[-1] == 1.0


def test_rk45_stiffish_problem():
    # y' = -50 (y - cos t), y(0) = 0 has the closed form below
    def exact(t):
        return (2500 * math.cos(t) + 50 * math.sin(t)) / 2501 - 2500 / 2501 * math.exp(-50 * t)

    prob = OdeProblem(lambda t, y: -50 * (y - math.cos(t)), atol=1e-9, rtol=1e-9)
    traj = rk45_adaptive(prob, 0.0, np.array([0.0]), 2.0)
    err = max(abs(y - exact(t)) for t, y in zip(traj.t, traj.y[:, 0]))
    assert err < 1e-6
    assert np.max(traj.steps) < 0.2  # the stability limit keeps steps bounded


def test_rk45_zero_rhs_takes_max_steps():
    prob = OdeProblem(lambda t, y: np.zeros_like(y), h_max=0.25)
    traj = rk45_adaptive(prob, 0.0, np.array([1.0]), 1.0)
    assert np.allclose(traj.steps, 0.25)
    assert traj.rejected == 0


def test_rk45_backwards_and_dense_output():
    traj = rk45_adaptive(OdeProblem(oscillator, atol=1e-11, rtol=1e-11), 0.0, np.array([1.0, 0.0]), -4.0)
    assert traj.y[-1, 0] == pytest.approx(math.cos(4.0), abs=1e-9)
    ts = np.linspace(-3.9, -0.1, 17)
    dense = traj.dense(ts)
    assert np.max(np.abs(dense[:, 0] - np.cos(ts))) < 1e-5


def test_rk45_step_underflow_reports_location():
    # y' = y^2 blows up at t = 1
    prob = OdeProblem(lambda t, y: y * y, atol=1e-8, rtol=1e-8, h_min=1e-10)
    with pytest.raises(StepSizeUnderflow) as err:
        rk45_adaptive(prob, 0.0, np.array([1.0]), 2.0)
    assert 0.9 < err.value.t < 1.0


def test_rk45_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        rk45_adaptive(OdeProblem(growth, atol=0.0), 0.0, np.array([1.0]), 1.0)


# -- lattice marching ----------------------------------------------------------

BOX = (-0.2, 0.2, -0.2, 0.2)


def _const_rhs(value):
    def rhs(x, y, s):
        return np.zeros_like(s) + value
    return rhs


def test_march_zero_rhs():
    lat = Lattice.from_box(BOX)
    res = march_grid(_const_rhs(0.0), _const_rhs(0.0), np.array([1.5, -2.0]), lat)
    assert np.all(res.field.values == np.array([1.5, -2.0]))
    assert res.max_discrepancy == 0.0


def test_march_exact_form():
    lat = Lattice.from_box(BOX)
    res = march_grid(lambda x, y, s: y[:, None] + 0 * s, lambda x, y, s: x[:, None] + 0 * s,
                     np.array([0.0]), lat)
    X, Y = lat.mesh()
    assert np.max(np.abs(res.field.values[..., 0] - X * Y)) < 1e-10
    assert res.max_discrepancy < 1e-12


def test_march_non_closed_form_detected():
    # d(f) = y dx - x dy is not closed; the two orders differ by 2|xy| from the centre
    lat = Lattice.from_box(BOX)
    res = march_grid(lambda x, y, s: y[:, None] + 0 * s, lambda x, y, s: -x[:, None] + 0 * s,
                     np.array([0.0]), lat)
    X, Y = lat.mesh()
    assert np.allclose(res.discrepancy, 2 * np.abs(X * Y), atol=1e-12)
    assert res.max_discrepancy == pytest.approx(0.08, rel=1e-12)


def test_march_order_swap_and_base():
    lat = Lattice.from_box(BOX, 11)
    rx = lambda x, y, s: y[:, None] + 0 * s
    ry = lambda x, y, s: -x[:, None] + 0 * s
    a = march_grid(rx, ry, np.array([0.0]), lat, order="xy")
    b = march_grid(rx, ry, np.array([0.0]), lat, order="yx")
    assert np.array_equal(a.field.values, b.other.values)
    c = march_grid(rx, ry, np.array([1.0]), lat, base=(0, 0))
    assert c.field.values[0, 0, 0] == 1.0
    with pytest.raises(ValueError):
        march_grid(rx, ry, np.array([0.0]), lat, order="zz")


def test_march_masks_faulting_nodes():
    lat = Lattice.from_box((0.5, 1.5, -0.5, 0.5), 11)
    rx = lambda x, y, s: 1.0 / (x[:, None] - 1.0) + 0 * s  # pole on the line x = 1
    res = march_grid(rx, _const_rhs(0.0), np.array([0.0]), lat, base=(5, 0))
    assert res.field.mask.any()
    assert res.field.reasons["nonfinite"] > 0


def test_lattice_geometry():
    lat = Lattice.from_box(BOX)
    assert lat.hx == pytest.approx(0.01)
    assert lat.center_node == (20, 20)
    assert lat.nearest_node(0.101, -0.199) == (0, 30)
    with pytest.raises(ValueError):
        Lattice(0.0, 0.0, 0.0, 1.0)


# -- roots and stencils --------------------------------------------------------

def test_real_roots_simple():
    rr = real_roots([1.0, 0.0, -1.0])
    assert np.allclose(rr.roots, [-1.0, 1.0])


def test_real_roots_double():
    rr = real_roots([1.0, -4.0, 4.0])
    assert len(rr.roots) == 1
    assert rr.roots[0] == pytest.approx(2.0, abs=1e-7)
    assert rr.multiplicity[0] == 2


def test_real_roots_quintic():
    # x (x^2 - 1)(x^2 - 9) = x^5 - 10 x^3 + 9 x
    rr = real_roots([1.0, 0.0, -10.0, 0.0, 9.0, 0.0])
    assert np.max(np.abs(rr.roots - np.array([-3.0, -1.0, 0.0, 1.0, 3.0]))) < 1e-10
    assert np.all(rr.residual < 1e-9)


def test_real_roots_drops_complex_and_trims():
    rr = real_roots([0.0, 1.0, 0.0, 1.0])  # x^2 + 1 after trimming
    assert rr.roots.size == 0
    assert rr.all_roots.size == 2
    with pytest.raises(ValueError):
        real_roots([0.0, 0.0])
    with pytest.raises(ValueError):
        real_roots([1e-20, 1.0])


def test_central_diff():
    assert central_diff(math.sin, 0.3) == pytest.approx(math.cos(0.3), abs=1e-12)


def test_grid_gradient_exact_on_quartics():
    lat = Lattice.from_box((0.0, 1.0, -1.0, 0.5), 13, 9)
    X, Y = lat.mesh()
    f = X**4 - 2 * X**2 * Y + Y**3
    gx, gy = grid_gradient(f, lat.hx, lat.hy)
    assert np.max(np.abs(gx - (4 * X**3 - 4 * X * Y))) < 1e-10
    assert np.max(np.abs(gy - (-2 * X**2 + 3 * Y**2))) < 1e-10


def test_grid_gradient_fourth_order():
    errs = []
    for n in (21, 41):
        lat = Lattice.from_box((0.0, 1.0, 0.0, 1.0), n)
        X, Y = lat.mesh()
        gx, _ = grid_gradient(np.sin(3 * X) * np.cos(Y), lat.hx, lat.hy)
        errs.append(np.max(np.abs(gx - 3 * np.cos(3 * X) * np.cos(Y))))
    assert 3.6 < math.log2(errs[0] / errs[1]) < 4.6
