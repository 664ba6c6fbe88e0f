"""Dimension of the space of fractional-linear integrals for a few metrics.

Constant curvature gives five parameters. A metric whose curvature depends
on one coordinate only has none, and a generic metric has none either
unless the resolving system admits a consistent branch.
"""

from geoweb import MetricChart, classify

GALLERY = [
    ("flat, conformal", MetricChart.conformal("1")),
    ("round sphere, conformal", MetricChart.conformal("4/(1+u^2+v^2)^2")),
    ("sphere, null gauge", MetricChart.null("(1+x*y)^(-2)")),
    ("K depends on y only", MetricChart.null("(x+y^2)^(-2)", box=(0.5, 1.5, -0.5, 0.5))),
    ("exp(x y)", MetricChart.null("exp(x*y)", box=(0.3, 0.7, 0.3, 0.7))),
]

for label, chart in GALLERY:
    v = classify(chart)
    print(f"{label:26s} {v.tag:6s} {v.reason}")
    for b in v.branches:
        print(f"{'':26s}   branch {b['branch']}: max|F| {b['max_abs_F']:.3g}, worst residual {b['max_residual']:.3g}")
