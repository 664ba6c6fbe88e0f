"""Surface metrics in conformal and null gauge.

A conformal chart carries ``Lambda(u, v) (du^2 + dv^2)``; a null chart
``L(x, y) dx dy``. The two are related by ``x = u + i v``, ``y = u - i v``.
Curvature follows the null-gauge convention ``K = -(L L_xy - L_x L_y) / L^3``,
which is one half of the textbook Gaussian curvature of ``L dx dy``; only
constancy of ``K`` matters downstream, and the structure equations are
written for this normalisation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property

import numpy as np

from . import expr as ex
from .expr import Expr, diff

__all__ = [
    "CONFORMAL",
    "NULL",
    "MetricError",
    "MetricChart",
    "CurvatureJet",
    "GeodesicCubic",
    "PhasePoint",
    "curvature",
    "conformal_to_null",
    "geodesic_cubic",
    "geodesic_flow_rhs",
    "hamiltonian",
    "integral_value",
    "DegenerateFrameError",
]

CONFORMAL = "conformal"
NULL = "null"


class MetricError(ValueError):
    pass


class DegenerateFrameError(ArithmeticError):
    """Both rows of the frame annihilate the direction (0/0)."""


def _as_expr(factor, variables):
    if isinstance(factor, Expr):
        return factor
    return ex.parse(str(factor), variables)


def _guess_variables(text: str, gauge: str):
    if gauge == NULL:
        return ("x", "y")
    for names in (("u", "v"), ("x", "y")):
        try:
            ex.parse(text, names)
            return names
        except ex.ParseError:
            continue
    return ("u", "v")


@dataclass(frozen=True)
class MetricChart:
    """A metric factor in a given gauge, with a validity box.

    ``variables`` names the two chart coordinates in order; numerical methods
    take plain positional coordinates ``(first, second)``.
    """

    gauge: str
    factor: Expr
    box: tuple[float, float, float, float]
    variables: tuple[str, str] = ("x", "y")

    def __post_init__(self):
        if self.gauge not in (CONFORMAL, NULL):
            raise MetricError(f"unknown gauge {self.gauge!r}")
        stray = self.factor.free_vars() - set(self.variables)
        if stray:
            raise MetricError(f"factor uses undeclared variables {sorted(stray)}")
        x0, x1, y0, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise MetricError("degenerate validity box")

    # -- construction ---------------------------------------------------
    @classmethod
    def conformal(cls, factor, box=(-0.4, 0.4, -0.4, 0.4), variables=None, check=True):
        if variables is None:
            variables = ("u", "v") if isinstance(factor, Expr) and not (
                factor.free_vars() & {"x", "y"}) else _guess_variables(str(factor), CONFORMAL)
        chart = cls(CONFORMAL, _as_expr(factor, variables), tuple(map(float, box)), tuple(variables))
        if check:
            chart.check()
        return chart

    @classmethod
    def null(cls, factor, box=(-0.4, 0.4, -0.4, 0.4), check=True):
        chart = cls(NULL, _as_expr(factor, ("x", "y")), tuple(map(float, box)), ("x", "y"))
        if check:
            chart.check()
        return chart

    def check(self, n: int = 41):
        """Grid-sampled checks: factor nonvanishing, conformal factor real-positive."""
        x0, x1, y0, y1 = self.box
        X, Y = np.meshgrid(np.linspace(x0, x1, n), np.linspace(y0, y1, n))
        try:
            values = self.eval_factor(X, Y)
        except ZeroDivisionError as err:
            raise MetricError(f"metric factor is singular on the box: {err}") from err
        except ex.EvaluationError as err:
            raise MetricError(f"metric factor cannot be evaluated on the box: {err}") from err
        if not np.all(np.isfinite(values)) or np.any(np.abs(values) == 0):
            raise MetricError("metric factor vanishes or is singular on the box")
        if self.gauge == CONFORMAL and (np.iscomplexobj(values) or np.any(values <= 0)):
            raise MetricError("conformal factor must be real and positive on the box")
        return self

    # -- expressions ----------------------------------------------------
    @property
    def d_first(self) -> Expr:
        return diff(self.factor, self.variables[0])

    @property
    def d_second(self) -> Expr:
        return diff(self.factor, self.variables[1])

    @cached_property
    def _factor_jet(self):
        return ex.compile_exprs([self.factor, self.d_first, self.d_second], self.variables)

    def eval_factor(self, a, b):
        return self._factor_jet(a, b)[0]

    def factor_jet(self, a, b):
        """``(factor, d/dfirst, d/dsecond)`` at the given points."""
        return self._factor_jet(a, b)

    def to_null(self) -> "MetricChart":
        if self.gauge == NULL:
            return self
        L = conformal_to_null(self.factor, self.variables)
        return MetricChart(NULL, L, self.box, ("x", "y"))

    @cached_property
    def curvature(self) -> "CurvatureJet":
        return curvature(self.to_null().factor)

    @cached_property
    def christoffel(self) -> dict:
        return _christoffel(self)

    @cached_property
    def cubic(self) -> "GeodesicCubic":
        return geodesic_cubic(self)

    # -- dynamics -------------------------------------------------------
    def hamiltonian(self, x, y, p, q):
        return hamiltonian(self, x, y, p, q)

    def velocity_from_momentum(self, x, y, p, q):
        f = self.eval_factor(x, y)
        if self.gauge == CONFORMAL:
            return p / f, q / f
        return 2 * q / f, 2 * p / f

    def momentum_from_velocity(self, x, y, xi, eta):
        f = self.eval_factor(x, y)
        if self.gauge == CONFORMAL:
            return f * xi, f * eta
        return f * eta / 2, f * xi / 2

    def momentum_direction(self, xi, eta):
        """Projective momentum direction of the velocity direction ``[xi:eta]``."""
        if self.gauge == CONFORMAL:
            return xi, eta
        return eta, xi

    def velocity_direction(self, p, q):
        if self.gauge == CONFORMAL:
            return p, q
        return q, p

    def flow(self):
        """Right-hand side ``f(t, state)`` of the geodesic flow for the integrators."""
        return lambda t, s: geodesic_flow_rhs(self, s)


@dataclass(frozen=True)
class PhasePoint:
    x: float
    y: float
    p: float
    q: float

    def velocity(self, chart: MetricChart):
        return chart.velocity_from_momentum(self.x, self.y, self.p, self.q)

    def as_array(self):
        return np.array([self.x, self.y, self.p, self.q], dtype=float)


def hamiltonian(chart: MetricChart, x, y, p, q):
    f = chart.eval_factor(x, y)
    if chart.gauge == CONFORMAL:
        return (p * p + q * q) / (2 * f)
    return 2 * p * q / f


def geodesic_flow_rhs(chart: MetricChart, state) -> np.ndarray:
    """Hamilton's equations ``(x', y', p', q')`` for ``state = (x, y, p, q)``.

    Conformal gauge uses ``H = (p^2 + q^2) / (2 Lambda)``, null gauge
    ``H = 2 p q / L``. ``state`` may carry leading batch axes.
    """
    s = np.asarray(state)
    x, y, p, q = s[..., 0], s[..., 1], s[..., 2], s[..., 3]
    f, fx, fy = chart.factor_jet(x, y)
    if chart.gauge == CONFORMAL:
        w = (p * p + q * q) / (2 * f * f)
        out = (p / f, q / f, w * fx, w * fy)
    else:
        w = 2 * p * q / (f * f)
        out = (2 * q / f, 2 * p / f, w * fx, w * fy)
    return np.stack(np.broadcast_arrays(*out), axis=-1)


def integral_value(A, B, C, E, p, q):
    """``(A p + B q) / (C p + E q)`` as an extended real (``inf`` for a zero denominator)."""
    num = A * p + B * q
    den = C * p + E * q
    scale = max(abs(A) + abs(B) + abs(C) + abs(E), 1.0) * max(abs(p), abs(q))
    if abs(den) <= 1e-15 * scale:
        if abs(num) <= 1e-15 * scale:
            raise DegenerateFrameError("0/0: frame annihilates the direction")
        return float("inf")
    return num / den


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CurvatureJet:
    """``K`` of ``L dx dy`` and the partials the classifier consumes."""

    L: Expr
    K: Expr
    K_x: Expr
    K_y: Expr
    K_xx: Expr
    K_xy: Expr
    K_yy: Expr
    K_xxy: Expr
    K_xyy: Expr
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    NAMES = ("K", "K_x", "K_y", "K_xx", "K_xy", "K_yy", "K_xxy", "K_xyy")

    def exprs(self):
        return [getattr(self, n) for n in self.NAMES]

    def evaluate(self, x, y) -> dict:
        fn = self._cache.get("fn")
        if fn is None:
            fn = self._cache["fn"] = ex.compile_exprs(self.exprs(), ("x", "y"))
        return dict(zip(self.NAMES, fn(x, y)))


def curvature(L: Expr) -> CurvatureJet:
    """Curvature jet of the null metric ``L dx dy`` (exact symbolic partials)."""
    Lx, Ly = diff(L, "x"), diff(L, "y")
    K = -(L * diff(Lx, "y") - Lx * Ly) / L ** 3
    Kx, Ky = diff(K, "x"), diff(K, "y")
    Kxy = diff(Kx, "y")
    return CurvatureJet(L, K, Kx, Ky, diff(Kx, "x"), Kxy, diff(Ky, "y"), diff(Kxy, "x"), diff(Kxy, "y"))


def conformal_to_null(factor: Expr, variables=("u", "v")) -> Expr:
    """``L(x, y) = Lambda((x + y)/2, (x - y)/(2i))``."""
    u, v = variables
    x, y = ex.var("x"), ex.var("y")
    half = ex.const(Fraction(1, 2))
    # substitution is simultaneous, so variables=("x", "y") is safe too
    mapping = {u: (x + y) * half, v: (x - y) / (ex.const(2) * ex.imag_unit())}
    return ex.substitute(factor, mapping)


# ---------------------------------------------------------------------------
# geodesics
# ---------------------------------------------------------------------------

def _christoffel(chart: MetricChart) -> dict:
    f, fa, fb = chart.factor, chart.d_first, chart.d_second
    zero = ex.const(0)
    if chart.gauge == CONFORMAL:
        h = ex.const(2) * f
        return {
            (1, 1, 1): fa / h, (2, 1, 1): -fb / h,
            (1, 1, 2): fb / h, (2, 1, 2): fa / h,
            (1, 2, 2): -fa / h, (2, 2, 2): fb / h,
        }
    return {
        (1, 1, 1): fa / f, (2, 1, 1): zero,
        (1, 1, 2): zero, (2, 1, 2): zero,
        (1, 2, 2): zero, (2, 2, 2): fb / f,
    }


@dataclass(frozen=True)
class GeodesicCubic:
    """Coefficients of ``y'' = c0 + c1 y' + c2 y'^2 + c3 y'^3`` for unparametrised geodesics.

    ``swapped`` holds the same ODE with the roles of the coordinates exchanged
    (``x`` as a function of ``y``), used where leaves turn vertical.
    """

    c0: Expr
    c1: Expr
    c2: Expr
    c3: Expr
    swapped: tuple
    variables: tuple

    def coefficients(self, a, b, swap: bool = False):
        key = "_swapped_fn" if swap else "_fn"
        fn = self.__dict__.get(key)
        if fn is None:
            exprs = self.swapped if swap else (self.c0, self.c1, self.c2, self.c3)
            fn = ex.compile_exprs(exprs, self.variables)
            object.__setattr__(self, key, fn)
        return fn(a, b)

    def rhs(self, a, b, slope, swap: bool = False):
        c0, c1, c2, c3 = self.coefficients(a, b, swap)
        return c0 + slope * (c1 + slope * (c2 + slope * c3))


def geodesic_cubic(chart: MetricChart) -> GeodesicCubic:
    G = _christoffel(chart)
    two = ex.const(2)
    c0 = -G[(2, 1, 1)]
    c1 = G[(1, 1, 1)] - two * G[(2, 1, 2)]
    c2 = -(G[(2, 2, 2)] - two * G[(1, 1, 2)])
    c3 = G[(1, 2, 2)]
    s0 = -G[(1, 2, 2)]
    s1 = G[(2, 2, 2)] - two * G[(1, 1, 2)]
    s2 = -(G[(1, 1, 1)] - two * G[(2, 1, 2)])
    s3 = G[(2, 1, 1)]
    return GeodesicCubic(c0, c1, c2, c3, (s0, s1, s2, s3), chart.variables)
