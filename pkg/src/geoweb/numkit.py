"""Numerical backbone: Runge-Kutta integrators, lattice marching,
finite-difference stencils and polynomial real roots."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

__all__ = [
    "OdeProblem",
    "Trajectory",
    "StepSizeUnderflow",
    "rk4_step",
    "rk4_fixed",
    "rk45_adaptive",
    "Lattice",
    "GridField",
    "MarchResult",
    "march_grid",
    "RealRoots",
    "real_roots",
    "central_diff",
    "grid_gradient",
]


class StepSizeUnderflow(RuntimeError):
    """Adaptive step size fell below the allowed minimum."""

    def __init__(self, t: float, h: float):
        self.t = t
        self.h = h
        super().__init__(f"step size underflow at t={t!r} (h={h:.3e})")


@dataclass(frozen=True)
class OdeProblem:
    """Right-hand side ``rhs(t, y)`` plus tolerances and step bounds."""

    rhs: Callable[[float, np.ndarray], np.ndarray]
    atol: float = 1e-10
    rtol: float = 1e-10
    h_min: float = 1e-14
    h_max: float = np.inf


@dataclass
class Trajectory:
    t: np.ndarray
    y: np.ndarray
    dy: np.ndarray | None = None
    rejected: int = 0

    @property
    def steps(self) -> np.ndarray:
        return np.diff(self.t)

    def dense(self, t) -> np.ndarray:
        """Cubic Hermite interpolation between accepted steps."""
        if self.dy is None:
            raise ValueError("trajectory has no derivative samples for dense output")
        t = np.asarray(t, dtype=float)
        ts = self.t
        forward = ts[-1] >= ts[0]
        key = ts if forward else -ts
        tk = t if forward else -t
        k = np.clip(np.searchsorted(key, tk, side="right") - 1, 0, len(ts) - 2)
        t0, t1 = ts[k], ts[k + 1]
        h = t1 - t0
        s = (t - t0) / h
        y0, y1 = self.y[k], self.y[k + 1]
        f0, f1 = self.dy[k], self.dy[k + 1]
        shape = (-1,) + (1,) * (y0.ndim - 1) if t.ndim else ()
        s = np.reshape(s, shape) if t.ndim else s
        hh = np.reshape(h, shape) if t.ndim else h
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        return h00 * y0 + h10 * hh * f0 + h01 * y1 + h11 * hh * f1


def rk4_step(f, t, y, h):
    k1 = f(t, y)
    k2 = f(t + h / 2, y + (h / 2) * k1)
    k3 = f(t + h / 2, y + (h / 2) * k2)
    k4 = f(t + h, y + h * k3)
    return y + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def rk4_fixed(problem, t0: float, y0, t1: float, steps: int) -> Trajectory:
    """Classical RK4 with ``steps`` equal steps from ``t0`` to ``t1``.

    ``problem`` is an :class:`OdeProblem` or a bare ``rhs(t, y)``.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    f = problem.rhs if isinstance(problem, OdeProblem) else problem
    y = np.asarray(y0)
    h = (t1 - t0) / steps
    ts = t0 + h * np.arange(steps + 1)
    ts[-1] = t1
    ys = np.empty((steps + 1,) + y.shape, dtype=np.result_type(y, float))
    ys[0] = y
    for n in range(steps):
        y = rk4_step(f, ts[n], y, h)
        ys[n + 1] = y
    return Trajectory(ts, ys)


# Dormand-Prince 5(4)
_C = np.array([0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1, 1])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B5 = np.array([35 / 384, 0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0])
_B4 = np.array([5179 / 57600, 0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40])
_ERR = _B5 - _B4


def _initial_step(f, t0, y0, f0, direction, atol, rtol, h_max):
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    if d1 == 0:
        return h_max
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    h0 = min(h0, h_max)
    y1 = y0 + direction * h0 * f0
    f1 = f(t0 + direction * h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, h_max)


def rk45_adaptive(problem: OdeProblem, t0: float, y0, t1: float, h0: float | None = None,
                  max_steps: int = 1_000_000) -> Trajectory:
    """Dormand-Prince 5(4) with error-per-step control.

    Every accepted step has a scaled local error estimate <= 1, measured as
    the RMS of ``err / (atol + rtol * max(|y_n|, |y_{n+1}|))``. The returned
    trajectory stores derivatives at the accepted nodes for
    :meth:`Trajectory.dense`.
    """
    f = problem.rhs
    atol, rtol = problem.atol, problem.rtol
    if atol <= 0 or rtol <= 0:
        raise ValueError("tolerances must be positive")
    y = np.asarray(y0, dtype=float).copy()
    direction = 1.0 if t1 >= t0 else -1.0
    span = abs(t1 - t0)
    h_max = min(problem.h_max, span) if span > 0 else 0.0
    t = t0
    fy = np.asarray(f(t, y), dtype=float)
    ts, ys, dys = [t], [y.copy()], [fy.copy()]
    if span == 0:
        return Trajectory(np.array(ts), np.array(ys), np.array(dys))
    h = h0 if h0 is not None else _initial_step(f, t, y, fy, direction, atol, rtol, h_max)
    h = min(abs(h), h_max)
    rejected = 0
    for _ in range(max_steps):
        remaining = abs(t1 - t)
        if remaining <= 1e-15 * max(1.0, abs(t1)):
            break
        if h >= remaining:
            h = remaining
        if h < problem.h_min:
            raise StepSizeUnderflow(t, h)
        hs = direction * h
        k = [fy]
        for s in range(1, 7):
            yi = y + hs * sum(a * kk for a, kk in zip(_A[s], k))
            k.append(np.asarray(f(t + _C[s] * hs, yi), dtype=float))
        y_new = y + hs * sum(b * kk for b, kk in zip(_B5, k))
        err = hs * sum(e * kk for e, kk in zip(_ERR, k))
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err_norm = float(np.sqrt(np.mean((err / scale) ** 2)))
        if not np.isfinite(err_norm):
            h *= 0.25
            rejected += 1
            continue
        if err_norm <= 1.0:
            t = t1 if h == remaining else t + hs
            y = y_new
            fy = k[6]  # FSAL
            ts.append(t)
            ys.append(y.copy())
            dys.append(fy.copy())
            factor = 5.0 if err_norm == 0 else min(5.0, 0.9 * err_norm ** -0.2)
            h = min(h * max(factor, 1.0), h_max)
        else:
            rejected += 1
            h *= max(0.2, 0.9 * err_norm ** -0.2)
    else:
        raise RuntimeError("maximum number of steps exceeded")
    return Trajectory(np.array(ts), np.array(ys), np.array(dys), rejected)


# ---------------------------------------------------------------------------
# lattices and marching
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Lattice:
    """Uniform rectangular lattice; node ``(j, i)`` sits at ``(xs[i], ys[j])``."""

    x0: float
    x1: float
    y0: float
    y1: float
    nx: int = 41
    ny: int = 41

    def __post_init__(self):
        if not (self.x1 > self.x0 and self.y1 > self.y0):
            raise ValueError("degenerate lattice box")
        if self.nx < 2 or self.ny < 2:
            raise ValueError("lattice needs at least two nodes per direction")

    @classmethod
    def from_box(cls, box, n=41, ny=None):
        x0, x1, y0, y1 = box
        return cls(float(x0), float(x1), float(y0), float(y1), int(n), int(ny or n))

    @property
    def box(self):
        return (self.x0, self.x1, self.y0, self.y1)

    @property
    def xs(self) -> np.ndarray:
        return np.linspace(self.x0, self.x1, self.nx)

    @property
    def ys(self) -> np.ndarray:
        return np.linspace(self.y0, self.y1, self.ny)

    @property
    def hx(self) -> float:
        return (self.x1 - self.x0) / (self.nx - 1)

    @property
    def hy(self) -> float:
        return (self.y1 - self.y0) / (self.ny - 1)

    @property
    def shape(self):
        return (self.ny, self.nx)

    def mesh(self):
        """``(X, Y)`` arrays of shape ``(ny, nx)``."""
        return np.meshgrid(self.xs, self.ys)

    def nearest_node(self, x: float, y: float):
        i = int(round((x - self.x0) / self.hx))
        j = int(round((y - self.y0) / self.hy))
        if not (0 <= i < self.nx and 0 <= j < self.ny):
            raise ValueError(f"point ({x}, {y}) lies outside the lattice")
        return j, i

    @property
    def center_node(self):
        return (self.ny - 1) // 2, (self.nx - 1) // 2


@dataclass
class GridField:
    """Per-node value vectors with a mask of faulted nodes."""

    lattice: Lattice
    values: np.ndarray  # (ny, nx, dim)
    mask: np.ndarray = None  # True where the node is invalid
    reasons: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mask is None:
            self.mask = ~np.all(np.isfinite(self.values), axis=-1)

    def component(self, k: int) -> np.ndarray:
        return self.values[..., k]


@dataclass
class MarchResult:
    field: GridField
    other: GridField
    discrepancy: np.ndarray  # (ny, nx) max-abs difference between orders

    @property
    def max_discrepancy(self) -> float:
        d = self.discrepancy[np.isfinite(self.discrepancy)]
        return float(d.max()) if d.size else float("nan")


def _march_line(rhs, fixed, coords, start_idx, state0, substeps, along_x):
    """Integrate along one lattice line from ``coords[start_idx]`` in both directions.

    ``fixed`` is a 1-d array of the other coordinate (vectorised over lines);
    ``state0`` has shape ``(nlines, dim)``. Returns ``(ncoords, nlines, dim)``.
    """
    n = len(coords)
    out = np.full((n,) + state0.shape, np.nan, dtype=state0.dtype)
    out[start_idx] = state0

    def f(t, s):
        if along_x:
            return rhs(np.full_like(fixed, t), fixed, s)
        return rhs(fixed, np.full_like(fixed, t), s)

    for step in (1, -1):
        s = state0
        k = start_idx
        while 0 <= k + step < n:
            t = coords[k]
            h = (coords[k + step] - t) / substeps
            with np.errstate(all="ignore"):
                for m in range(substeps):
                    s = rk4_step(f, t + m * h, s, h)
            k += step
            out[k] = s
    return out


def march_grid(rhs_x, rhs_y, initial, lattice: Lattice, base=None, order: str = "xy",
               substeps: int = 4) -> MarchResult:
    """Integrate a Pfaffian system ``ds = rhs_x dx + rhs_y dy`` over a lattice.

    ``rhs_x(x, y, s)`` and ``rhs_y(x, y, s)`` are vectorised: ``x`` and ``y``
    have shape ``(n,)`` and ``s`` shape ``(n, dim)``. ``order='xy'`` marches
    the base row in x and then every column in y; ``'yx'`` does the reverse.
    The opposite order is always computed too, and their node-wise
    difference is returned as the path-independence discrepancy.

    Nodes where the right-hand side produced non-finite values are masked.
    """
    if order not in ("xy", "yx"):
        raise ValueError("order must be 'xy' or 'yx'")
    s0 = np.atleast_1d(np.asarray(initial))
    if not np.iscomplexobj(s0):
        s0 = s0.astype(float)
    j0, i0 = base if base is not None else lattice.center_node
    xs, ys = lattice.xs, lattice.ys

    def xy_first():
        row = _march_line(rhs_x, np.array([ys[j0]]), xs, i0, s0[None, :], substeps, True)[:, 0, :]
        cols = _march_line(rhs_y, xs, ys, j0, row, substeps, False)  # (ny, nx, dim)
        return cols

    def yx_first():
        col = _march_line(rhs_y, np.array([xs[i0]]), ys, j0, s0[None, :], substeps, False)[:, 0, :]
        rows = _march_line(rhs_x, ys, xs, i0, col, substeps, True)  # (nx, ny, dim)
        return np.transpose(rows, (1, 0, 2))

    a = xy_first()
    b = yx_first()
    if order == "yx":
        a, b = b, a
    fa, fb = GridField(lattice, a), GridField(lattice, b)
    with np.errstate(invalid="ignore"):
        disc = np.max(np.abs(a - b), axis=-1)
    disc[fa.mask | fb.mask] = np.nan
    for fld in (fa, fb):
        if fld.mask.any():
            fld.reasons["nonfinite"] = int(fld.mask.sum())
    return MarchResult(fa, fb, disc)


# ---------------------------------------------------------------------------
# polynomial roots
# ---------------------------------------------------------------------------

@dataclass
class RealRoots:
    roots: np.ndarray
    multiplicity: np.ndarray
    residual: np.ndarray
    all_roots: np.ndarray


def real_roots(coeffs, imag_tol: float = 1e-8, cluster_tol: float = 1e-5) -> RealRoots:
    """Real roots of ``sum(coeffs[k] * x**(n-k))`` (highest degree first).

    Roots are eigenvalues of the companion matrix. Nearby eigenvalues are
    clustered and averaged (a double root splits into a pair about
    ``sqrt(eps)`` apart), then kept when ``|Im| < imag_tol``.
    """
    c = np.asarray(coeffs, dtype=complex if np.iscomplexobj(coeffs) else float)
    if c.ndim != 1 or c.size < 2:
        raise ValueError("need a polynomial of degree >= 1")
    scale = np.max(np.abs(c))
    if scale == 0:
        raise ValueError("zero polynomial")
    c = c / scale
    nz = np.flatnonzero(np.abs(c) > 1e-14)
    c = c[nz[0]:]
    if c.size < 2:
        raise ValueError("degenerate leading coefficient after trimming")
    lead = c[0]
    comp = np.zeros((c.size - 1, c.size - 1), dtype=c.dtype)
    comp[0, :] = -c[1:] / lead
    comp[1:, :-1] += np.eye(c.size - 2, dtype=c.dtype)
    eig = np.linalg.eigvals(comp)
    eig = eig[np.argsort(eig.real)]
    clusters: list[list[complex]] = []
    for z in eig:
        for cl in clusters:
            centre = np.mean(cl)
            if abs(z - centre) <= cluster_tol * max(1.0, abs(centre)):
                cl.append(z)
                break
        else:
            clusters.append([z])
    roots, mult = [], []
    for cl in clusters:
        centre = complex(np.mean(cl))
        if abs(centre.imag) < imag_tol:
            roots.append(centre.real)
            mult.append(len(cl))
    roots = np.array(roots)
    order = np.argsort(roots)
    roots = roots[order]
    mult = np.array(mult, dtype=int)[order]
    residual = np.abs(np.polyval(c, roots)) * scale if roots.size else np.array([])
    return RealRoots(roots, mult, residual, eig)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def central_diff(f, x, h: float = 1e-4):
    """Five-point central difference ``f'(x)``; ``f`` may be vectorised."""
    return (f(x - 2 * h) - 8 * f(x - h) + 8 * f(x + h) - f(x + 2 * h)) / (12 * h)


_ONE_SIDED = np.array([-25, 48, -36, 16, -3]) / 12.0
_ONE_SIDED_1 = np.array([-3, -10, 18, -6, 1]) / 12.0


def _diff_axis(a: np.ndarray, h: float, axis: int) -> np.ndarray:
    a = np.moveaxis(a, axis, 0)
    n = a.shape[0]
    if n < 5:
        raise ValueError("fourth-order stencils need at least 5 nodes per direction")
    d = np.empty_like(a)
    d[2:-2] = (a[:-4] - 8 * a[1:-3] + 8 * a[3:-1] - a[4:]) / 12.0
    d[0] = np.tensordot(_ONE_SIDED, a[:5], axes=(0, 0))
    d[1] = np.tensordot(_ONE_SIDED_1, a[:5], axes=(0, 0))
    d[-1] = -np.tensordot(_ONE_SIDED, a[::-1][:5], axes=(0, 0))
    d[-2] = -np.tensordot(_ONE_SIDED_1, a[::-1][:5], axes=(0, 0))
    return np.moveaxis(d / h, 0, axis)


def grid_gradient(values: np.ndarray, hx: float, hy: float):
    """Fourth-order ``(d/dx, d/dy)`` of fields laid out as ``(ny, nx, ...)``."""
    return _diff_axis(values, hx, 1), _diff_axis(values, hy, 0)
