import math

import numpy as np
import pytest

from geoweb.expr import evaluate, parse
from geoweb.metric import (
    DegenerateFrameError,
    MetricChart,
    MetricError,
    PhasePoint,
    conformal_to_null,
    curvature,
    geodesic_flow_rhs,
    hamiltonian,
    integral_value,
)
from geoweb.numkit import OdeProblem, rk45_adaptive

RNG = np.random.default_rng(11)


def k_at(L_text, x, y):
    return curvature(parse(L_text)).evaluate(x, y)["K"]


def test_curvature_closed_forms():
    x, y = RNG.uniform(-0.4, 0.4, size=(2, 50))
    assert np.all(k_at("1", x, y) == 0)
    assert np.max(np.abs(k_at("(1+x*y)^(-2)", x, y) - 2)) < 1e-12
    assert np.max(np.abs(k_at("exp(x*y)", x, y) + np.exp(-x * y))) < 1e-12
    assert np.max(np.abs(k_at("(x+y^2)^(-2)", x + 1.0, y) + 4 * y)) < 1e-10


def test_curvature_jet_values():
    # CAS values of K and its partials for L = exp(x y) + x^2 at (0.3, -0.2)
    expected = {
        "K": -0.72570146852385034, "K_x": 1.7360098375334569, "K_y": 0.11304785255285812,
        "K_xx": 2.5103242957575585, "K_xy": -0.62071959507892517, "K_yy": 0.022376848091223159,
        "K_xxy": -6.4201068263012922, "K_xyy": 0.62347896001739666,
    }
    jet = curvature(parse("exp(x*y)+x^2")).evaluate(0.3, -0.2)
    for name, value in expected.items():
        assert jet[name] == pytest.approx(value, rel=1e-12), name


def test_conformal_to_null():
    L = conformal_to_null(parse("u^2+v^2+1", ("u", "v")))
    x, y = RNG.uniform(-1, 1, size=(2, 10))
    vals = evaluate(L, {"x": x + 0j, "y": y + 0j})
    assert np.allclose(vals, 1 + x * y, atol=1e-14)
    L = conformal_to_null(parse("exp(v)", ("u", "v")))
    assert evaluate(L, {"x": 0.3 + 0j, "y": -0.5 + 0j}) == pytest.approx(np.exp(-0.4j))


def test_sphere_is_curvature_two_in_null_gauge():
    chart = MetricChart.conformal("4/(1+u^2+v^2)^2")
    L = chart.to_null().factor
    assert evaluate(L, {"x": 0.2 + 0j, "y": 0.1 + 0j}) == pytest.approx(4 / 1.02**2)
    # half the Gaussian curvature 1 of the unit sphere
    assert curvature(L).evaluate(0.2 + 0j, 0.1 + 0j)["K"] == pytest.approx(0.5)


def test_chart_validation():
    with pytest.raises(MetricError):
        MetricChart.conformal("-1")
    with pytest.raises(MetricError):
        MetricChart.null("x", box=(-0.1, 0.1, -0.1, 0.1))
    with pytest.raises(MetricError):
        MetricChart.null("1", box=(0.1, 0.1, 0.0, 1.0))


def test_geodesic_cubic_examples():
    c = MetricChart.conformal("exp(v)").cubic.coefficients(0.3, 0.2)
    assert np.allclose(c, [0.5, 0.0, 0.5, 0.0], atol=1e-15)
    c = MetricChart.conformal("u^2+v^2+1", box=(0.5, 1.5, -0.5, 0.5)).cubic.coefficients(1.0, 0.0)
    assert np.allclose(c, [0.0, -0.5, 0.0, -0.5], atol=1e-15)
    # CAS values at (0.3, -0.7)
    c = MetricChart.conformal("x^2+y^2+1", variables=("x", "y")).cubic.coefficients(0.3, -0.7)
    assert np.allclose(c, [-0.44303797468354430, -0.18987341772151899, -0.44303797468354430,
                           -0.18987341772151899], atol=1e-15)


def test_geodesic_cubic_null_gauge():
    chart = MetricChart.null("exp(x*y)")
    c = chart.cubic.coefficients(0.2, -0.3)
    assert np.allclose(c, [0.0, -0.3, -0.2, 0.0], atol=1e-15)


def _geodesic_cubic_residual(chart, state0, t1=2.0):
    """Integrate the flow and compare y'' along the path with the cubic."""
    traj = rk45_adaptive(OdeProblem(chart.flow(), atol=1e-12, rtol=1e-12), 0.0, state0, t1)
    out = 0.0
    for s in traj.y[1:-1:3]:
        d = geodesic_flow_rhs(chart, s)
        dx, dy = d[0], d[1]
        h = 1e-4
        dp = [geodesic_flow_rhs(chart, s + k * h * d) for k in (-1, 1)]
        # second derivative of y(x) along the path via the chain rule
        ddx = (dp[1][0] - dp[0][0]) / (2 * h)
        ddy = (dp[1][1] - dp[0][1]) / (2 * h)
        ypp = (ddy * dx - dy * ddx) / dx**3
        out = max(out, abs(ypp - chart.cubic.rhs(s[0], s[1], dy / dx)))
    return out


@pytest.mark.parametrize("gauge, factor", [("conformal", "u^2+v^2+1"), ("null", "(1+x*y)^(-2)"),
                                           ("conformal", "exp(v)")])
def test_flow_projects_to_cubic(gauge, factor):
    chart = MetricChart.conformal(factor) if gauge == "conformal" else MetricChart.null(factor)
    state0 = np.array([0.05, -0.02, 0.3, 0.1]) if gauge == "conformal" else np.array([0.05, -0.02, 0.1, 0.15])
    assert _geodesic_cubic_residual(chart, state0) < 1e-6


def test_flow_rhs_and_hamiltonian():
    chart = MetricChart.conformal("u^2+v^2+1")
    assert np.allclose(geodesic_flow_rhs(chart, [0.0, 0.0, 1.0, 1.0]), [1.0, 1.0, 0.0, 0.0])
    traj = rk45_adaptive(OdeProblem(chart.flow(), atol=1e-11, rtol=1e-11), 0.0,
                         np.array([0.1, 0.2, 0.4, -0.3]), 3.0)
    H = hamiltonian(chart, *traj.y.T)
    assert np.max(np.abs(H - H[0])) < 1e-9
    null = MetricChart.null("exp(x*y)")
    assert hamiltonian(null, 0.0, 0.0, 1.0, 2.0) == 4.0
    batch = geodesic_flow_rhs(null, np.zeros((3, 2, 4)) + [0.1, 0.2, 1.0, 1.0])
    assert batch.shape == (3, 2, 4)


def test_velocity_momentum_conversions():
    null = MetricChart.null("(1+x*y)^(-2)")
    p = PhasePoint(0.1, 0.2, 0.3, -0.4)
    vx, vy = p.velocity(null)
    assert null.momentum_from_velocity(p.x, p.y, vx, vy) == pytest.approx((p.p, p.q))
    assert null.velocity_direction(1.0, 2.0) == (2.0, 1.0)
    conf = MetricChart.conformal("1")
    assert conf.momentum_direction(1.0, 2.0) == (1.0, 2.0)


def test_integral_value_edge_cases():
    assert integral_value(1.0, 0.0, 0.0, 1.0, 2.0, 1.0) == 2.0
    assert integral_value(1.0, 0.0, 0.0, 1.0, 1.0, 0.0) == math.inf
    with pytest.raises(DegenerateFrameError):
        integral_value(1.0, 0.0, 1.0, 0.0, 0.0, 1.0)
