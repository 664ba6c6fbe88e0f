"""What the checks look like when the input is wrong.

1. A built integral with E nudged by 1e-3 x is no longer an integral. The
   cross-ratio of its level directions is still -1/3, since any invertible
   frame keeps it, but the residuals, u and the traced leaves expose it.
2. The slope field J = y together with the constants 1 and 2 on the flat
   plane has u = -2, and the frame rebuilt from it fails the integral
   equations in proportion to u.
3. March data that violate the compatibility conditions give a large
   path discrepancy.
"""

import numpy as np

from geoweb import Lattice, MetricChart, build_integral
from geoweb.expr import evaluate
from geoweb.structure import IntegralBuildError
from geoweb.web import (PerturbedFrame, nakai_certify, reconstruct_frame_expr, trace_leaf,
                        u_obstruction_expr, verify_reconstruction)

chart = MetricChart.null("(1+x*y)^(-2)", box=(-0.2, 0.2, -0.2, 0.2))
sol = build_integral(chart, (1.0, 0.0, 0.0, 0.0, 0.0), Lattice.from_box(chart.box, 41))
for label, src in (("built", sol), ("perturbed", PerturbedFrame(sol, 1e-3))):
    rep = nakai_certify(chart, src, trace=False)
    leaf = trace_leaf(chart, src, (0.0, 0.0), 1.0, step=4e-3, max_length=0.2)
    print(f"{label:9s} cross-ratio dev {rep.cross_ratio_deviation:.1e}  residual {rep.pde_residual:.1e}  "
          f"u {rep.u_max:.1e}  leaf geodesic residual {leaf.geodesic_residual:.1e}  passed {rep.passed}")

flat = MetricChart.conformal("1", variables=("x", "y"))
print("\nu for J = y, M = 1, N = 2:", evaluate(u_obstruction_expr(flat, "y", "1", "2"), {"x": 0.0, "y": 1.5}))
y = np.array([1.3, 1.5, 1.7])
frame = reconstruct_frame_expr("y", "1", "2")
print("residuals of the rebuilt frame:", verify_reconstruction(flat, frame.jet(0 * y, y), 0 * y, y)["residuals"])

try:
    build_integral(MetricChart.null("1", box=(-0.2, 0.2, -0.2, 0.2)), (1.0, 0.0, 0.0, 0.0, 0.0), F0=0.5)
except IntegralBuildError as err:
    print("\nincompatible data:", err)
