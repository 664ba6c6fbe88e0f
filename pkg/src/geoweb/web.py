"""Geodesic foliations of a fractional-linear integral and their webs.

Directions are homogeneous pairs ``[xi:eta]``. Level sets ``I = lambda`` are
read in momentum space, where ``I(xi, eta) = lambda`` is linear in the
direction; in conformal gauge momentum and velocity directions agree, in
null gauge (``H = 2 p q / L``) the velocity of momentum ``[xi:eta]`` is
``[eta:xi]``.

The reconstruction of a frame from three foliations works with momentum
directions and is projective. The u-obstruction is not: it uses leaf
slopes in a chart, either ``dy/dx`` or (where leaves are steep) ``dx/dy``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as ex
from .expr import diff
from .metric import CONFORMAL, NULL, MetricChart
from .numkit import Lattice
from .structure import Frame, FrameJet, IntegralSolution, pde_residuals

__all__ = [
    "ProjDir",
    "Leaf",
    "WebSlopes",
    "LabelingError",
    "CoincidentDirectionsError",
    "PerturbedFrame",
    "slope_from_lambda",
    "leaf_direction",
    "lambda_direction",
    "cross_ratio",
    "fourth_direction",
    "frame_jet",
    "trace_leaf",
    "nakai_certify",
    "web_slopes",
    "u_obstruction",
    "u_obstruction_expr",
    "reconstruct_frame",
    "reconstruct_frame_auto",
    "reconstruct_frame_expr",
    "verify_reconstruction",
]


class LabelingError(ValueError):
    """``E^2 <= 0`` for the given ordering of the three foliations."""


class CoincidentDirectionsError(ValueError):
    pass


@dataclass(frozen=True)
class ProjDir:
    """A projective direction ``[xi:eta]`` scaled so its larger component is 1."""

    xi: float
    eta: float

    def __post_init__(self):
        if self.xi == 0 and self.eta == 0:
            raise ValueError("[0:0] is not a direction")
        m = self.xi if abs(self.xi) >= abs(self.eta) else self.eta
        object.__setattr__(self, "xi", self.xi / m)
        object.__setattr__(self, "eta", self.eta / m)

    @classmethod
    def from_slope(cls, slope):
        if math.isinf(slope):
            return cls(0.0, 1.0)
        return cls(1.0, slope)

    @property
    def slope(self) -> float:
        return self.eta / self.xi if self.xi != 0 else math.inf

    def swapped(self) -> "ProjDir":
        return ProjDir(self.eta, self.xi)

    def __iter__(self):
        yield self.xi
        yield self.eta


def _pair(d):
    """``(xi, eta)`` arrays from a :class:`ProjDir`, a pair, or a slope (``inf`` allowed)."""
    if isinstance(d, ProjDir):
        return d.xi, d.eta
    if isinstance(d, tuple) and len(d) == 2:
        return d
    s = np.asarray(d, dtype=float)
    inf = np.isinf(s)
    return np.where(inf, 0.0, 1.0), np.where(inf, 1.0, s)


def _bracket(a, b):
    return a[0] * b[1] - a[1] * b[0]


# ---------------------------------------------------------------------------
# directions and cross-ratio
# ---------------------------------------------------------------------------

def slope_from_lambda(frame: Frame, lam):
    """Momentum direction on which ``I = lam``: solves ``(A - C lam) xi + (B - E lam) eta = 0``.

    Returns a :class:`ProjDir` for scalar frames and an ``(xi, eta)`` pair of
    arrays otherwise. ``lam = inf`` gives the direction ``[E : -C]``.
    """
    A, B, C, E = frame.as_tuple()
    if lam == math.inf or lam == -math.inf:
        xi, eta = E, -C
    else:
        xi, eta = E * lam - B, A - C * lam
    if np.ndim(xi) == 0:
        if xi == 0 and eta == 0:
            raise ValueError("degenerate frame: every direction has this value")
        return ProjDir(float(xi), float(eta))
    return xi, eta


def lambda_direction(lam):
    """``lam`` as a point ``[1 : lam]`` of the projective line."""
    return (0.0, 1.0) if math.isinf(lam) else (1.0, float(lam))


def leaf_direction(chart: MetricChart, frame: Frame, lam):
    """Velocity direction of the foliation ``I = lam`` in the chart."""
    d = slope_from_lambda(frame, lam)
    if chart.gauge == NULL:
        return d.swapped() if isinstance(d, ProjDir) else (d[1], d[0])
    return d


def cross_ratio(d1, d2, d3, d4):
    """``((J - M)/(M - N)) ((N - T)/(T - J))`` in determinant form.

    Arguments are directions ``J, M, N, T`` (ProjDir, pairs of arrays, or
    slopes). Coincident directions raise :class:`CoincidentDirectionsError`.
    """
    J, M, N, T = (_pair(d) for d in (d1, d2, d3, d4))
    num = _bracket(M, J) * _bracket(T, N)
    den = _bracket(N, M) * _bracket(J, T)
    if np.any(np.asarray(den) == 0) or np.any(np.asarray(_bracket(N, J)) == 0) or np.any(
            np.asarray(_bracket(T, M)) == 0):
        raise CoincidentDirectionsError("cross-ratio needs pairwise distinct directions")
    r = num / den
    return float(r) if np.ndim(r) == 0 else r


def fourth_direction(d1, d2, d3, r):
    """The direction ``T`` with ``cross_ratio(J, M, N, T) = r``."""
    J, M, N = (_pair(d) for d in (d1, d2, d3))
    a = _bracket(M, J)
    b = r * _bracket(N, M)
    return a * N[0] + b * J[0], a * N[1] + b * J[1]


# ---------------------------------------------------------------------------
# frame sources
# ---------------------------------------------------------------------------

class PerturbedFrame:
    """``E -> E + eps * x`` on top of another frame source (a negative control)."""

    def __init__(self, base, eps: float):
        self.base = base
        self.eps = eps

    def frame_at(self, x, y) -> Frame:
        f = self.base.frame_at(x, y)
        return Frame(f.A, f.B, f.C, f.E + self.eps * np.asarray(x))


class _ConstantFrame:
    def __init__(self, frame: Frame):
        self.frame = frame

    def frame_at(self, x, y) -> Frame:
        z = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
        return Frame(*(z + v for v in self.frame.as_tuple()))

    def jet(self, x, y) -> FrameJet:
        return FrameJet.constant(self.frame_at(x, y))


def _source(frame_source):
    if isinstance(frame_source, Frame):
        return _ConstantFrame(frame_source)
    return frame_source


def frame_jet(frame_source, x, y, h: float = 1e-4) -> FrameJet:
    """Frame and first partials: symbolic when available, else central differences."""
    src = _source(frame_source)
    if hasattr(src, "jet"):
        return src.jet(x, y)
    return FrameJet.from_function(src.frame_at, x, y, h)


# ---------------------------------------------------------------------------
# leaves
# ---------------------------------------------------------------------------

@dataclass
class Leaf:
    """A traced leaf of ``I = lam``: chart polyline plus verification data."""

    lam: float
    points: np.ndarray  # (n, 2)
    arclength: float
    truncated: bool
    swaps: int
    geodesic_residual: float
    tangency_residual: float
    seed: tuple = (0.0, 0.0)

    def to_dict(self) -> dict:
        return {
            "lambda": _json_lam(self.lam),
            "points": len(self.points),
            "arclength": self.arclength,
            "truncated": self.truncated,
            "swaps": self.swaps,
            "geodesic_residual": self.geodesic_residual,
            "tangency_residual": self.tangency_residual,
        }


def _json_lam(lam):
    return "inf" if math.isinf(lam) else lam


def _dir_and_derivative(chart, lam, fr, dfr):
    """Velocity direction ``(a, b)`` and its derivative from frame values and their derivative."""
    A, B, C, E = fr
    dA, dB, dC, dE = dfr
    if math.isinf(lam):
        xi, eta, dxi, deta = E, -C, dE, -dC
    else:
        xi, eta = E * lam - B, A - C * lam
        dxi, deta = dE * lam - dB, dA - dC * lam
    if chart.gauge == NULL:
        return eta, xi, deta, dxi
    return xi, eta, dxi, deta


def trace_leaf(chart: MetricChart, frame_source, seed, lam, step: float = 2e-3,
               max_length: float = 1.0, box=None) -> Leaf:
    """Trace the leaf of ``I = lam`` through ``seed`` in both directions.

    The leaf is integrated (RK4, fixed step) as ``y(x)`` while its slope is
    at most 1 in magnitude and as ``x(y)`` otherwise. For an
    :class:`IntegralSolution` the full state is transported along the leaf;
    other sources are sampled through ``frame_at``/``jet``. Each node
    records the residual of the geodesic cubic, with the leaf's curvature
    computed exactly from the frame derivatives.
    """
    box = box or chart.box
    x0b, x1b, y0b, y1b = box
    src = _source(frame_source)
    eps = 0.0
    if isinstance(src, PerturbedFrame) and isinstance(src.base, IntegralSolution):
        src, eps = src.base, src.eps
    transported = isinstance(src, IntegralSolution)
    cubic = chart.cubic

    def frame_data(z):
        """Frame values and its partials at the state ``z``."""
        if transported:
            s = z[2:]
            gx, gy = src._both(z[:1], z[1:2], s[None])
            gx, gy = gx[0], gy[0]
            if eps:
                fr = s[:4].copy()
                fr[3] += eps * z[0]
                gx4 = gx[:4].copy()
                gx4[3] += eps
                return fr, np.concatenate([gx4, gx[4:]]), gy
            return s[:4], gx, gy
        j = frame_jet(src, np.array([z[0]]), np.array([z[1]]))
        fr = np.array([j.A[0], j.B[0], j.C[0], j.E[0]])
        gx = np.array([j.A_x[0], j.B_x[0], j.C_x[0], j.E_x[0]])
        gy = np.array([j.A_y[0], j.B_y[0], j.C_y[0], j.E_y[0]])
        return fr, gx, gy

    def deriv(z, mode, sign):
        """``dz/dt`` where ``t`` is x (mode 0) or y (mode 1), moving in direction ``sign``."""
        fr, gx, gy = frame_data(z)
        a, b, _, _ = _dir_and_derivative(chart, lam, fr[:4], fr[:4] * 0)
        if mode == 0:
            vx, vy = 1.0, b / a
        else:
            vx, vy = a / b, 1.0
        out = np.empty_like(z)
        out[0], out[1] = vx, vy
        if transported:
            g = gx.copy()
            g[3] -= eps  # the state itself is unperturbed
            out[2:] = g * vx + gy * vy
        return out * sign

    def residuals(z, mode):
        fr, gx, gy = frame_data(z)
        a, b, _, _ = _dir_and_derivative(chart, lam, fr[:4], fr[:4] * 0)
        if mode == 0:
            m = b / a
            d = gx[:4] + m * gy[:4]  # total x-derivative of the frame
            _, _, da, db = _dir_and_derivative(chart, lam, fr[:4], d)
            second = (db * a - b * da) / (a * a)
            return abs(second - cubic.rhs(z[0], z[1], m))
        w = a / b
        d = gx[:4] * w + gy[:4]
        _, _, da, db = _dir_and_derivative(chart, lam, fr[:4], d)
        second = (da * b - a * db) / (b * b)
        return abs(second - cubic.rhs(z[0], z[1], w, swap=True))

    if transported:
        s0 = src.state_at(seed[0], seed[1])
        z0 = np.concatenate([[seed[0], seed[1]], np.real_if_close(s0)]).astype(float)
    else:
        z0 = np.array([seed[0], seed[1]], dtype=float)

    def mode_of(z):
        fr, _, _ = frame_data(z)
        a, b, _, _ = _dir_and_derivative(chart, lam, fr[:4], fr[:4] * 0)
        return (0 if abs(b) <= abs(a) else 1), a, b

    geo_res = residuals(z0, mode_of(z0)[0])
    halves = []
    truncated = False
    swaps = 0
    tang = 0.0
    for direction in (1, -1):
        z = z0.copy()
        mode, a, b = mode_of(z)
        # velocity orientation to keep continuous along the leaf
        vel = direction * np.array([a, b]) / math.hypot(a, b)
        pts = []
        length = 0.0
        while length < max_length:
            mode, a, b = mode_of(z)
            v = np.array([a, b]) / math.hypot(a, b)
            if np.dot(v, vel) < 0:
                v = -v
            sign = np.sign(v[mode]) or 1.0
            h = step * abs(v[mode])
            zn = z.copy()
            k1 = deriv(zn, mode, sign)
            k2 = deriv(zn + h / 2 * k1, mode, sign)
            k3 = deriv(zn + h / 2 * k2, mode, sign)
            k4 = deriv(zn + h * k3, mode, sign)
            zn = zn + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
            if not (x0b <= zn[0] <= x1b and y0b <= zn[1] <= y1b) or not np.all(np.isfinite(zn)):
                truncated = True
                break
            length += math.hypot(zn[0] - z[0], zn[1] - z[1])
            new_mode = mode_of(zn)[0]
            swaps += new_mode != mode
            chord = (zn[:2] - z[:2]) / max(math.hypot(*(zn[:2] - z[:2])), 1e-300)
            tang = max(tang, abs(chord[0] * v[1] - chord[1] * v[0]))
            vel = v
            z = zn
            pts.append(z[:2].copy())
            geo_res = max(geo_res, residuals(z, new_mode))
        halves.append(pts)
    points = np.array(halves[1][::-1] + [z0[:2]] + halves[0])
    arclength = float(np.sum(np.hypot(*np.diff(points, axis=0).T))) if len(points) > 1 else 0.0
    return Leaf(lam, points, arclength, truncated, swaps, float(geo_res), float(tang), tuple(seed))


# ---------------------------------------------------------------------------
# web slopes and the u-obstruction
# ---------------------------------------------------------------------------

@dataclass
class WebSlopes:
    """Leaf slopes of three foliations and their derivatives along the dependent variable.

    ``swapped=False``: slopes are ``dy/dx`` and derivatives are ``d/dy``;
    ``swapped=True``: slopes are ``dx/dy`` and derivatives are ``d/dx``.
    """

    J: np.ndarray
    M: np.ndarray
    N: np.ndarray
    dJ: np.ndarray
    dM: np.ndarray
    dN: np.ndarray
    swapped: bool = False
    lambdas: tuple = (0.0, 1.0, math.inf)


def web_slopes(chart: MetricChart, jet: FrameJet, lambdas=(0.0, 1.0, math.inf), swapped=None) -> WebSlopes:
    """Leaf slopes of ``I = lambda`` for three values, with their transverse derivatives.

    With ``swapped=None`` the orientation with the smaller largest slope is
    used, so that no slope field blows up on the sample set.
    """
    fr = (jet.A, jet.B, jet.C, jet.E)
    options = {}
    for swap in ((False, True) if swapped is None else (bool(swapped),)):
        d = (jet.A_x, jet.B_x, jet.C_x, jet.E_x) if swap else (jet.A_y, jet.B_y, jet.C_y, jet.E_y)
        out = []
        for lam in lambdas:
            a, b, da, db = _dir_and_derivative(chart, lam, fr, d)
            if swap:
                a, b, da, db = b, a, db, da
            with np.errstate(all="ignore"):
                out.append((b / a, (db * a - b * da) / (a * a)))
        options[swap] = out
    best = min(options, key=lambda k: max(float(np.max(np.abs(v[0]))) for v in options[k]))
    (J, dJ), (M, dM), (N, dN) = options[best]
    return WebSlopes(J, M, N, dJ, dM, dN, best, tuple(lambdas))


def u_obstruction(chart: MetricChart, x, y, web: WebSlopes):
    """The u-obstruction of three leaf-slope fields.

    Conformal gauge: ``Lambda_x (J-M)(J-N)(M-N) + 2 Lambda ((J-M) N_y - (J-N) M_y + (M-N) J_y)``
    (``x`` and ``y`` exchanged for swapped slopes). Null gauge has no cubic
    geodesic term: ``2 L ((J-M) N_y - (J-N) M_y + (M-N) J_y)``.
    """
    J, M, N = web.J, web.M, web.N
    if np.any(J == M) or np.any(J == N) or np.any(M == N):
        raise CoincidentDirectionsError("u-obstruction needs distinct slopes")
    f, fx, fy = chart.factor_jet(x, y)
    core = 2 * f * ((J - M) * web.dN - (J - N) * web.dM + (M - N) * web.dJ)
    if chart.gauge == CONFORMAL:
        return (fy if web.swapped else fx) * (J - M) * (J - N) * (M - N) + core
    return core


def u_obstruction_expr(chart: MetricChart, J, M, N, swapped: bool = False) -> ex.Expr:
    """Symbolic u-obstruction for leaf-slope fields given as expressions."""
    a, b = chart.variables
    J, M, N = (e if isinstance(e, ex.Expr) else ex.parse(str(e), chart.variables) for e in (J, M, N))
    f = chart.factor
    indep, dep = (b, a) if swapped else (a, b)
    core = ex.const(2) * f * ((J - M) * diff(N, dep) - (J - N) * diff(M, dep) + (M - N) * diff(J, dep))
    if chart.gauge == CONFORMAL:
        return diff(f, indep) * (J - M) * (J - N) * (M - N) + core
    return core


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------

def reconstruct_frame(J, M, N) -> Frame:
    """The det-1 frame taking the values 0, 1, inf on the momentum directions J, M, N.

    In slopes: ``E^2 = (J-M)/((M-N)(J-N))``, ``A = J(M-N)E/(J-M)``,
    ``B = -(M-N)E/(J-M)``, ``C = -N E``; computed homogeneously so that
    infinite slopes are allowed. The sign is fixed by ``E > 0`` (``C > 0``
    where ``E = 0``).
    """
    j, m, n = _pair(J), _pair(M), _pair(N)
    mj, mn, jn = _bracket(m, j), _bracket(m, n), _bracket(j, n)
    if np.any(np.asarray(mj) == 0) or np.any(np.asarray(mn) == 0) or np.any(np.asarray(jn) == 0):
        raise CoincidentDirectionsError("reconstruction needs distinct directions")
    c2 = mj / (mn * jn)
    if np.any(np.asarray(c2) <= 0):
        raise LabelingError("E^2 <= 0 for this ordering of the foliations")
    c = np.sqrt(c2)
    a = c * mn / mj
    A, B = a * j[1], -a * j[0]
    C, E = c * n[1], -c * n[0]
    flip = np.where(E != 0, E < 0, C < 0)
    s = np.where(flip, -1.0, 1.0)
    fr = Frame(s * A, s * B, s * C, s * E)
    if np.ndim(fr.A) == 0:
        fr = Frame(*(float(v) for v in fr.as_tuple()))
    return fr


def reconstruct_frame_auto(J, M, N):
    """Try the six labelings of ``(J, M, N)``; return ``(frame, permutation)`` for the first valid one."""
    dirs = (J, M, N)
    for perm in itertools.permutations(range(3)):
        try:
            return reconstruct_frame(*(dirs[k] for k in perm)), perm
        except LabelingError:
            continue
    raise LabelingError("no labeling of the three foliations gives E^2 > 0 on the sample set")


def reconstruct_frame_expr(J, M, N, variables=("x", "y")):
    """Closed-form reconstruction for slope fields given as expressions (an ExprFrame)."""
    from .structure import ExprFrame

    J, M, N = (e if isinstance(e, ex.Expr) else ex.parse(str(e), variables) for e in (J, M, N))
    E = ex.func("sqrt", (J - M) / ((M - N) * (J - N)))
    A = J * (M - N) * E / (J - M)
    B = -(M - N) * E / (J - M)
    C = -N * E
    return ExprFrame(A, B, C, E, variables)


def verify_reconstruction(chart: MetricChart, jet: FrameJet, x, y) -> dict:
    """Max-norms of the four integral residuals and of ``det - 1`` for a frame jet."""
    res = pde_residuals(chart, jet, x, y)
    return {
        "residuals": [float(np.max(np.abs(r))) for r in res],
        "max_residual": float(np.max(np.abs(res))),
        "det_deviation": float(np.max(np.abs(jet.frame.det() - 1))),
    }


def _projective_agreement(f1: Frame, f2: Frame) -> float:
    """Largest ``|f1 - s f2|`` over entries with ``s = +-1`` chosen per point."""
    a = f1.as_array()
    b = f2.as_array()
    plus = np.max(np.abs(a - b), axis=-1)
    minus = np.max(np.abs(a + b), axis=-1)
    return float(np.max(np.minimum(plus, minus)))


# ---------------------------------------------------------------------------
# certification
# ---------------------------------------------------------------------------

@dataclass
class NakaiReport:
    lambdas: tuple
    r_expected: float
    cross_ratio_deviation: float
    fourth_deviation: float
    pde_residual: float
    u_max: float
    roundtrip_agreement: float
    roundtrip_residual: float
    leaves: list = field(default_factory=list)
    geodesic_residual: float = 0.0
    cross_ratio_grid: np.ndarray | None = None
    lattice: Lattice | None = None
    tolerances: dict = field(default_factory=dict)
    u_lambdas: tuple = ()

    @property
    def passed(self) -> bool:
        t = self.tolerances
        return (self.cross_ratio_deviation < t["cross_ratio"] and self.pde_residual < t["residual"]
                and self.u_max < t["u"] and self.geodesic_residual < t["geodesic"]
                and self.roundtrip_agreement < t["cross_ratio"])

    def to_dict(self) -> dict:
        return {
            "lambdas": [_json_lam(v) for v in self.lambdas],
            "cross_ratio_expected": self.r_expected,
            "cross_ratio_max_deviation": self.cross_ratio_deviation,
            "fourth_direction_max_deviation": self.fourth_deviation,
            "pde_residual_max": self.pde_residual,
            "u_max": self.u_max,
            "u_lambdas": [_json_lam(v) for v in self.u_lambdas],
            "roundtrip_frame_agreement": self.roundtrip_agreement,
            "roundtrip_residual_max": self.roundtrip_residual,
            "geodesic_residual_max": self.geodesic_residual,
            "leaves": [l.to_dict() for l in self.leaves],
            "tolerances": self.tolerances,
            "passed": self.passed,
        }


def nakai_certify(chart: MetricChart, frame_source, lambdas=(0.0, 1.0, 2.0, 3.0), lattice=None,
                  n: int = 21, trace: bool = True, leaf_step: float = 2e-3,
                  tol_cross: float = 1e-8, tol_residual: float = 1e-6, tol_u: float = 1e-6,
                  tol_geodesic: float = 1e-6) -> NakaiReport:
    """Certify the geodesic Nakai web of ``frame_source`` on a lattice.

    Reports the deviation of the pointwise cross-ratio of the four leaf
    directions from that of the ``lambdas``, the deviation of the fourth
    direction predicted from the other three, the integral residuals, the
    u-obstruction of the ``I in {0, 1, inf}`` foliations, the round-trip
    reconstruction from those foliations and, optionally, the geodesic
    residual of traced leaves through the lattice centre.

    The cross-ratio is preserved pointwise by any invertible frame; the
    integral residuals, u and the geodesic residual are what separate
    genuine integrals from arbitrary frame fields.
    """
    lams = tuple(float(v) for v in lambdas)
    if len(set(lams)) != 4:
        raise ValueError("lambdas must be four pairwise distinct values")
    lattice = lattice or Lattice.from_box(chart.box, n)
    X, Y = lattice.mesh()
    memo = _Memo(_source(frame_source))
    jet = frame_jet(memo, X, Y)
    frame = jet.frame
    r_expected = cross_ratio(*(lambda_direction(l) for l in lams))
    dirs = [slope_from_lambda(frame, l) for l in lams]
    r_grid = cross_ratio(*dirs)
    T = fourth_direction(dirs[0], dirs[1], dirs[2], r_expected)
    fourth_dev = float(np.max(np.abs(_bracket(T, dirs[3])) / (np.hypot(*T) * np.hypot(*dirs[3]))))
    res = pde_residuals(chart, jet, X, Y)
    u_max, u_lams = _u_both_orientations(chart, X, Y, jet, lams)
    trio = [slope_from_lambda(frame, l) for l in (0.0, 1.0, math.inf)]
    try:
        rec = reconstruct_frame(*trio)
        agreement = _projective_agreement(rec, frame)
        rec_src = _ReconstructedSource(memo)
        rjet = FrameJet.from_function(rec_src.frame_at, X, Y)
        rt_res = verify_reconstruction(chart, rjet, X, Y)["max_residual"]
    except LabelingError:
        agreement = rt_res = math.inf
    leaves = []
    geo = 0.0
    if trace:
        j0, i0 = lattice.center_node
        seed = (float(lattice.xs[i0]), float(lattice.ys[j0]))
        for lam in lams:
            leaf = trace_leaf(chart, frame_source, seed, lam, step=leaf_step, max_length=0.25)
            leaves.append(leaf)
            geo = max(geo, leaf.geodesic_residual)
    tols = {"cross_ratio": tol_cross, "residual": tol_residual, "u": tol_u, "geodesic": tol_geodesic}
    return NakaiReport(lams, r_expected, float(np.max(np.abs(r_grid - r_expected))), fourth_dev,
                       float(np.max(np.abs(res))), u_max, agreement, rt_res,
                       leaves, geo, r_grid, lattice, tols, u_lams)


def _best_web(chart, jet, lams, swapped=None):
    """Slopes of the triple (from ``{0, 1, inf}`` and the certified values) with the tamest slopes.

    The obstruction needs finite slopes; for some frames every orientation
    of the ``{0, 1, inf}`` leaves contains a vertical family. Returns None
    when no triple has finite slopes in the requested orientation.
    """
    triples = [(0.0, 1.0, math.inf)] + list(itertools.combinations(lams, 3))
    best, best_size = None, math.inf
    for tri in triples:
        web = web_slopes(chart, jet, tri, swapped)
        with np.errstate(invalid="ignore"):
            size = max(float(np.max(np.abs(v))) for v in (web.J, web.M, web.N))
        if np.isfinite(size) and size < best_size:
            best, best_size = web, size
        if best is not None and tri == triples[0] and size < 1e3:
            break
    return best


def _u_both_orientations(chart, X, Y, jet, lams):
    """Largest |u| over the two slope orientations, and the triples used.

    In one orientation u only sees the transverse derivative of the frame,
    so a defect along the other axis would go unnoticed.
    """
    u_max, used = 0.0, []
    for swap in (False, True):
        web = _best_web(chart, jet, lams, swap)
        if web is None:
            continue
        with np.errstate(all="ignore"):
            u = u_obstruction(chart, X, Y, web)
        u_max = max(u_max, float(np.max(np.abs(u))))
        used.append(web.lambdas)
    if not used:
        return math.inf, ()
    return u_max, used[0]


class _Memo:
    """Remembers ``frame_at`` results so repeated stencils are evaluated once."""

    def __init__(self, base):
        self.base = base
        self._cache = {}
        if hasattr(base, "jet"):
            self.jet = base.jet

    def frame_at(self, x, y) -> Frame:
        x, y = np.asarray(x, dtype=float), np.asarray(y, dtype=float)
        key = (x.shape, x.tobytes(), y.tobytes())
        if key not in self._cache:
            self._cache[key] = self.base.frame_at(x, y)
        return self._cache[key]


class _ReconstructedSource:
    """Frame reconstructed pointwise from the ``I in {0, 1, inf}`` directions of another source."""

    def __init__(self, base):
        self.base = _source(base)

    def frame_at(self, x, y) -> Frame:
        f = self.base.frame_at(x, y)
        return reconstruct_frame(*(slope_from_lambda(f, l) for l in (0.0, 1.0, math.inf)))
