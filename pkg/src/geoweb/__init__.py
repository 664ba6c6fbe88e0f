"""Fractional-linear first integrals of geodesic flows on surfaces.

Modules:

- ``expr``: small symbolic expression trees (parse, differentiate, evaluate)
- ``numkit``: Runge-Kutta integrators, lattice marching, stencils, polynomial roots
- ``metric``: metric charts in conformal and null gauge, curvature, geodesics
- ``structure``: integral residuals, invariants, the Pfaffian system, classification
- ``web``: geodesic foliations, cross-ratios and frame reconstruction
- ``cli``: the ``geoweb`` command
"""

__version__ = "0.1.0"

from .metric import MetricChart, curvature, geodesic_cubic, geodesic_flow_rhs  # noqa: E402
from .numkit import Lattice  # noqa: E402
from .structure import Frame, build_integral, classify  # noqa: E402

__all__ = [
    "__version__",
    "MetricChart",
    "Lattice",
    "Frame",
    "curvature",
    "geodesic_cubic",
    "geodesic_flow_rhs",
    "classify",
    "build_integral",
]
