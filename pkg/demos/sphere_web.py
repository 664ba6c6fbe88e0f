"""Build an integral on the sphere and certify its geodesic 4-web.

The integral is grown from five numbers at the centre of the box by
marching the Pfaffian system along rows and then columns. Its level sets
I = 0, 1, 2, 3 are geodesic foliations whose slopes have the cross-ratio
of the four values, -1/3, at every point.
"""

import numpy as np

from geoweb import Lattice, MetricChart, build_integral
from geoweb.structure import integrals_along_geodesics
from geoweb.web import nakai_certify

chart = MetricChart.null("(1+x*y)^(-2)", box=(-0.2, 0.2, -0.2, 0.2))
sol = build_integral(chart, (1.1, 0.2, -0.3, 0.1, -0.2), Lattice.from_box(chart.box, 41))

rep = sol.residual_report()
print("path discrepancy of the march :", f"{rep['path_discrepancy_max']:.1e}")
print("integral residuals on lattice :", f"{rep['pde_residual_max']:.1e}")
print("max |F| (vanishes for const K):", f"{rep['max_abs_F']:.1e}")

# I along a few geodesics
rng = np.random.default_rng(0)
phases = np.column_stack([rng.uniform(-0.05, 0.05, (5, 2)), rng.uniform(-0.015, 0.015, (5, 2))])
for (t, vals, _), ph in zip(integrals_along_geodesics(chart, sol, phases, 5.0), phases):
    print(f"geodesic from ({ph[0]:+.3f}, {ph[1]:+.3f}): I = {vals[0]:+.6f}, drift {np.ptp(vals):.1e}")

cert = nakai_certify(chart, sol)
print()
for key, value in cert.to_dict().items():
    if key not in ("leaves", "tolerances"):
        print(f"{key:32s} {value}")
