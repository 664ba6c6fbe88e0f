import math

import numpy as np
import pytest

from geoweb.expr import evaluate
from geoweb.metric import MetricChart
from geoweb.numkit import Lattice
from geoweb.structure import ExprFrame, Frame, FrameJet, MobiusElement, build_integral
from geoweb.web import (
    CoincidentDirectionsError,
    LabelingError,
    PerturbedFrame,
    ProjDir,
    cross_ratio,
    fourth_direction,
    nakai_certify,
    reconstruct_frame,
    reconstruct_frame_auto,
    reconstruct_frame_expr,
    slope_from_lambda,
    trace_leaf,
    u_obstruction,
    u_obstruction_expr,
    verify_reconstruction,
    web_slopes,
)

RNG = np.random.default_rng(17)
IDENT = Frame(1.0, 0.0, 0.0, 1.0)
FLAT = MetricChart.conformal("1", variables=("x", "y"), box=(-0.5, 0.5, -0.5, 0.5))
R2 = math.sqrt(2)


@pytest.fixture(scope="module")
def sphere_solution():
    chart = MetricChart.null("(1+x*y)^(-2)", box=(-0.2, 0.2, -0.2, 0.2))
    return chart, build_integral(chart, (1.1, 0.2, -0.3, 0.1, -0.2), Lattice.from_box(chart.box, 41))


# -- directions ----------------------------------------------------------------------

def test_projdir_normalisation():
    d = ProjDir(2.0, 4.0)
    assert (d.xi, d.eta) == (0.5, 1.0)
    assert d.slope == 2.0
    assert ProjDir.from_slope(math.inf) == ProjDir(0.0, 3.0)
    assert ProjDir(0.0, 1.0).slope == math.inf
    with pytest.raises(ValueError):
        ProjDir(0.0, 0.0)


def test_slope_from_lambda_examples():
    assert slope_from_lambda(IDENT, 2.0).slope == 0.5
    # I = xi/eta is infinite where eta = 0, so lambda = inf is the horizontal direction
    assert slope_from_lambda(IDENT, math.inf) == ProjDir(1.0, 0.0)
    assert slope_from_lambda(IDENT, 0.0) == ProjDir(0.0, 1.0)
    f = Frame(R2, -1 / R2, 0.0, 1 / R2)
    assert slope_from_lambda(f, 0.0).slope == pytest.approx(2.0, rel=1e-15)


def test_slope_from_lambda_solves_the_level_set():
    for _ in range(20):
        a, b, c = RNG.uniform(-1, 1, 3)
        f = Frame.from_ABC(a + 2.0, b, c)
        lam = RNG.normal()
        d = slope_from_lambda(f, lam)
        A, B, C, E = f.as_tuple()
        assert abs((A - C * lam) * d.xi + (B - E * lam) * d.eta) < 1e-13


def test_cross_ratio_examples():
    assert cross_ratio(0.0, 1.0, 2.0, 3.0) == pytest.approx(-1 / 3, rel=1e-15)
    # the projective limit of (N - T)/(T - J) as T -> inf is -1, not +1
    assert cross_ratio(0.0, 1.0, 3.0, math.inf) == pytest.approx(-0.5, rel=1e-15)
    with pytest.raises(CoincidentDirectionsError):
        cross_ratio(0.0, 1.0, 1.0, 3.0)


def test_cross_ratio_matches_affine_formula():
    J, M, N, T = RNG.uniform(-3, 3, size=(4, 50))
    affine = (J - M) / (M - N) * (N - T) / (T - J)
    assert np.allclose(cross_ratio(J, M, N, T), affine, rtol=1e-12)


def _act(h, d):
    xi, eta = d
    return h.alpha * xi + h.beta * eta, h.gamma * xi + h.delta * eta


def test_cross_ratio_projective_invariance():
    for _ in range(100):
        h = MobiusElement.random(RNG)
        dirs = [tuple(v) for v in RNG.normal(size=(4, 2))]
        r0 = cross_ratio(*dirs)
        r1 = cross_ratio(*(_act(h, d) for d in dirs))
        assert abs(r1 - r0) < 1e-12 * max(1.0, abs(r0))


def test_fourth_direction():
    T = fourth_direction((1.0, 0.0), (1.0, 1.0), (1.0, 2.0), -1 / 3)
    assert T[1] / T[0] == pytest.approx(3.0, rel=1e-14)


# -- leaves ------------------------------------------------------------------------------

def test_trace_straight_leaf():
    leaf = trace_leaf(FLAT, IDENT, (0.0, 0.0), 2.0, step=0.01, max_length=0.4)
    assert np.max(np.abs(leaf.points[:, 1] - leaf.points[:, 0] / 2)) < 1e-14
    assert leaf.arclength == pytest.approx(0.8, abs=0.02)
    assert leaf.geodesic_residual == 0.0
    assert leaf.swaps == 0


def test_trace_vertical_leaf_uses_swapped_parameter():
    leaf = trace_leaf(FLAT, IDENT, (0.0, 0.0), 0.0, step=0.01, max_length=2.0)
    assert np.all(leaf.points[:, 0] == 0.0)
    assert leaf.truncated
    assert leaf.points[:, 1].max() == pytest.approx(0.5, abs=0.011)


def test_trace_leaf_turning_through_vertical():
    # the level set I = 0 of this frame is tangent to circles about the origin
    frame = ExprFrame("x", "y", "0", "1/x")
    leaf = trace_leaf(FLAT, frame, (0.3, 0.0), 0.0, step=2e-3, max_length=0.4)
    assert leaf.swaps >= 2
    assert np.max(np.abs(np.hypot(*leaf.points.T) - 0.3)) < 1e-9
    # circles are not geodesics of the flat metric; |y''| of a circle graph is at least 1/r
    assert leaf.geodesic_residual > 1 / 0.3


def test_traced_leaves_of_built_frame_are_geodesics(sphere_solution):
    chart, sol = sphere_solution
    for lam in (0.0, 1.0, 2.0, 3.0, math.inf):
        leaf = trace_leaf(chart, sol, (0.0, 0.0), lam, step=4e-3, max_length=0.2)
        assert leaf.geodesic_residual < 1e-6
        assert leaf.tangency_residual < 1e-3
        assert len(leaf.points) > 10


def test_perturbed_leaf_is_not_geodesic(sphere_solution):
    chart, sol = sphere_solution
    leaf = trace_leaf(chart, PerturbedFrame(sol, 1e-3), (0.0, 0.0), 1.0, step=4e-3, max_length=0.2)
    assert leaf.geodesic_residual > 1e-5


# -- u-obstruction ------------------------------------------------------------------------

def test_u_obstruction_examples():
    x, y = RNG.uniform(-0.4, 0.4, size=(2, 10))
    assert np.all(evaluate(u_obstruction_expr(FLAT, "0", "1", "2"), {"x": x, "y": y}) == 0)
    assert evaluate(u_obstruction_expr(FLAT, "y", "1", "2"), {"x": 0.1, "y": 1.3}) == -2.0
    chart = MetricChart.conformal("u^2+v^2+1")
    assert evaluate(u_obstruction_expr(chart, "0", "1", "2"), {"u": 0.3, "v": 0.2}) == pytest.approx(-1.2)


def test_u_obstruction_vanishes_on_integral_webs():
    x, y = RNG.uniform(-0.4, 0.4, size=(2, 30))
    jet = ExprFrame("-y", "x", "1", "0").jet(x, y)
    web = web_slopes(FLAT, jet, (1.0, 2.0, 3.0))
    assert np.max(np.abs(u_obstruction(FLAT, x, y, web))) < 1e-12
    jet = ExprFrame("x", "y", "0", "1").jet(x + 1.0, y)
    web = web_slopes(FLAT, jet, (1.0, 2.0, 3.0))
    assert np.min(np.abs(u_obstruction(FLAT, x + 1.0, y, web))) > 1e-3


def test_u_obstruction_rejects_coincident_slopes():
    x = np.zeros(3)
    jet = FrameJet.constant(Frame(*(v + x for v in IDENT.as_tuple())))
    web = web_slopes(FLAT, jet)
    web.M = web.J
    with pytest.raises(CoincidentDirectionsError):
        u_obstruction(FLAT, x, x, web)


# -- reconstruction -------------------------------------------------------------------------

def test_reconstruct_constant_slopes():
    f = reconstruct_frame(2.0, 1.0, 0.0)
    assert np.allclose(f.as_tuple(), (R2, -1 / R2, 0.0, 1 / R2), atol=1e-15)
    assert f.det() == pytest.approx(1.0, abs=1e-15)
    assert slope_from_lambda(f, 0.0).slope == pytest.approx(2.0)
    assert slope_from_lambda(f, 1.0).slope == pytest.approx(1.0)
    assert slope_from_lambda(f, math.inf).slope == pytest.approx(0.0, abs=1e-15)


def test_reconstruct_labeling_error_and_auto_permutation():
    with pytest.raises(LabelingError):
        reconstruct_frame(0.0, 1.0, 2.0)
    f, perm = reconstruct_frame_auto(0.0, 1.0, 2.0)
    assert perm != (0, 1, 2)
    assert f.det() == pytest.approx(1.0)
    with pytest.raises(CoincidentDirectionsError):
        reconstruct_frame(1.0, 1.0, 2.0)


def test_reconstruct_handles_infinite_slopes():
    f = reconstruct_frame(math.inf, 1.0, 0.0)
    assert f.det() == pytest.approx(1.0)
    assert slope_from_lambda(f, 0.0).slope == math.inf


def test_verify_reconstruction_flat_constant():
    x, y = RNG.uniform(-0.4, 0.4, size=(2, 10))
    jet = reconstruct_frame_expr("2", "1", "0").jet(x, y)
    rep = verify_reconstruction(FLAT, jet, x, y)
    assert rep["max_residual"] == 0.0
    assert rep["det_deviation"] < 1e-15


def test_verify_reconstruction_negative_control():
    # J = y, M = 1, N = 2: residuals are (0, 2, -3, 1) u / ((J-M)(M-N)(J-N)) with u = -2
    fr = reconstruct_frame_expr("y", "1", "2")
    y = np.array([1.3, 1.5, 1.7])
    res = verify_reconstruction(FLAT, fr.jet(0.0 * y, y), 0.0 * y, y)
    assert np.allclose(res["residuals"], [0.0, 400 / 21, 200 / 7, 200 / 21], rtol=1e-12)
    from geoweb.structure import pde_residuals

    r = pde_residuals(FLAT, fr.jet(0.0, 1.5), 0.0, 1.5)
    assert np.allclose(r, [0.0, -16.0, 24.0, -8.0], rtol=1e-12, atol=1e-12)


# -- certification ----------------------------------------------------------------------------

def test_certify_identity_flat():
    rep = nakai_certify(FLAT, IDENT, (0.0, 1.0, 2.0, 3.0), n=11, trace=False)
    assert rep.r_expected == pytest.approx(-1 / 3)
    assert rep.cross_ratio_deviation == 0.0
    assert rep.u_max == 0.0
    assert rep.passed


def test_certify_rejects_repeated_lambdas():
    with pytest.raises(ValueError):
        nakai_certify(FLAT, IDENT, (0.0, 1.0, 1.0, 3.0))


def test_certify_built_frame(sphere_solution):
    chart, sol = sphere_solution
    rep = nakai_certify(chart, sol, n=21, leaf_step=4e-3)
    assert rep.passed
    assert rep.cross_ratio_deviation < 1e-8
    assert rep.u_max < 1e-8
    assert rep.roundtrip_agreement < 1e-8
    assert rep.roundtrip_residual < 1e-6
    assert rep.geodesic_residual < 1e-6
    d = rep.to_dict()
    assert d["passed"] and len(d["leaves"]) == 4


def test_certify_perturbed_frame_fails(sphere_solution):
    chart, sol = sphere_solution
    rep = nakai_certify(chart, PerturbedFrame(sol, 1e-3), n=21, trace=False)
    assert not rep.passed
    assert rep.pde_residual > 1e-5
    assert rep.u_max > 1e-5
    # any invertible frame keeps the pointwise cross-ratio of its level directions
    assert rep.cross_ratio_deviation < 1e-8
