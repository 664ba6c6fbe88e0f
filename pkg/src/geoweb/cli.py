"""Command line: ``geoweb classify | build | web``.

Exit codes: 0 on success (an ``Inconclusive`` classification included),
1 for configuration errors, 2 for numerical failures.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from . import report as rp
from .expr import ExprError
from .metric import CONFORMAL, NULL, MetricChart, MetricError
from .numkit import Lattice
from .structure import (
    FIVE,
    THREE,
    ExprFrame,
    IntegralBuildError,
    Tolerances,
    build_integral,
    classify,
)
from .web import PerturbedFrame, nakai_certify, trace_leaf

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 1, 2


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    metric: str = "1"
    gauge: str = NULL
    box: tuple = (-0.2, 0.2, -0.2, 0.2)
    grid: tuple = (41, 41)
    lambdas: tuple = (0.0, 1.0, 2.0, 3.0)
    init: tuple = (1.0, 0.0, 0.0, 0.0, 0.0)
    base: tuple | None = None
    frame: tuple | None = None
    tolerances: dict = field(default_factory=dict)
    out_dir: str = "geoweb-out"
    threads: int = 1
    perturb: float = 0.0
    svg: bool = False

    def validate(self):
        if self.gauge not in (CONFORMAL, NULL):
            raise ConfigError(f"gauge must be {CONFORMAL!r} or {NULL!r}")
        x0, x1, y0, y1 = self.box
        if not (x1 > x0 and y1 > y0):
            raise ConfigError("box must satisfy x0 < x1 and y0 < y1")
        if min(self.grid) < 9:
            raise ConfigError("grid counts must be at least 9")
        if len(self.lambdas) != 4 or len(set(self.lambdas)) != 4:
            raise ConfigError("--lambda needs four pairwise distinct values")
        if len(self.init) != 5:
            raise ConfigError("--init needs A0,B0,C0,R0,Y0")
        if self.init[0] == 0:
            raise ConfigError("A0 must be nonzero")
        if self.threads < 1:
            raise ConfigError("threads must be positive")
        if self.base is not None:
            bx, by = self.base
            if not (x0 <= bx <= x1 and y0 <= by <= y1):
                raise ConfigError("base point lies outside the box")
        unknown = set(self.tolerances) - set(TOL_KEYS)
        if unknown:
            raise ConfigError(f"unknown tolerances {sorted(unknown)}")

    def echo(self) -> dict:
        d = asdict(self)
        d["lambdas"] = ["inf" if math.isinf(v) else v for v in self.lambdas]
        return d


TOL_KEYS = ("K", "involution", "split", "mask", "imag", "cross", "residual", "u", "geodesic", "path")


def _floats(text, n=None, what="value"):
    try:
        vals = tuple(float(t) for t in str(text).replace(";", ",").split(",") if t.strip())
    except ValueError as err:
        raise ConfigError(f"bad {what}: {text!r}") from err
    if n is not None and len(vals) != n:
        raise ConfigError(f"{what} needs {n} comma-separated numbers, got {text!r}")
    return vals


def _grid(text):
    vals = _floats(text, what="grid")
    if len(vals) == 1:
        vals = vals * 2
    if len(vals) != 2 or any(v != int(v) for v in vals):
        raise ConfigError(f"bad grid: {text!r}")
    return tuple(int(v) for v in vals)


def read_config_file(path) -> dict:
    """``key=value`` lines; ``#`` starts a comment; keys use flag names."""
    out = {}
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as err:
        raise ConfigError(f"cannot read config file: {err}") from err
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (t.strip() for t in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


class _Parser(argparse.ArgumentParser):
    """Usage errors are configuration errors (exit 1), not argparse's exit 2."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value file (flags take precedence)")
    common.add_argument("--metric", help="metric factor, e.g. '(1+x*y)^(-2)'")
    common.add_argument("--gauge", choices=(CONFORMAL, NULL))
    common.add_argument("--box", help="x0,x1,y0,y1")
    common.add_argument("--grid", help="n or nx,ny (>= 9)")
    common.add_argument("--lambda", dest="lambdas", help="four values, 'inf' allowed")
    common.add_argument("--init", help="A0,B0,C0,R0,Y0")
    common.add_argument("--base", help="base point x,y (snapped to the nearest node)")
    common.add_argument("--frame", help="closed-form frame 'A;B;C;E' (web command)")
    for key in TOL_KEYS:
        common.add_argument(f"--tol-{key}", dest=f"tol_{key}", type=float)
    common.add_argument("--out-dir")
    common.add_argument("--threads", type=int, help="worker threads (default GEOWEB_THREADS or 1)")
    common.add_argument("--perturb", type=float, help="add eps*x to E (negative control)")
    common.add_argument("--svg", action="store_true", default=None, help="also draw sample leaves")

    parser = _Parser(prog="geoweb", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"geoweb {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("classify", parents=[common], help="dimension of the space of fractional-linear integrals")
    sub.add_parser("build", parents=[common], help="integrate the Pfaffian system and dump the grid")
    sub.add_parser("web", parents=[common], help="certify the geodesic Nakai 4-web of an integral")
    return parser


def make_config(args) -> RunConfig:
    raw = read_config_file(args.config) if args.config else {}
    for key, value in vars(args).items():
        if key in ("config", "command") or value is None:
            continue
        raw[key] = value
    cfg = RunConfig(threads=int(os.environ.get("GEOWEB_THREADS", "1") or 1))
    tols = {}
    for key, value in raw.items():
        if key == "metric":
            cfg.metric = str(value)
        elif key == "gauge":
            cfg.gauge = str(value)
        elif key == "box":
            cfg.box = _floats(value, 4, "box")
        elif key == "grid":
            cfg.grid = _grid(value)
        elif key in ("lambdas", "lambda"):
            cfg.lambdas = _floats(value, 4, "lambda")
        elif key == "init":
            cfg.init = _floats(value, 5, "init")
        elif key == "base":
            cfg.base = _floats(value, 2, "base")
        elif key == "frame":
            parts = tuple(p.strip() for p in str(value).split(";"))
            if len(parts) != 4:
                raise ConfigError("--frame needs four ';'-separated expressions")
            cfg.frame = parts
        elif key.startswith("tol_"):
            tols[key[4:]] = float(value)
        elif key == "out_dir":
            cfg.out_dir = str(value)
        elif key == "threads":
            cfg.threads = int(value)
        elif key == "perturb":
            cfg.perturb = float(value)
        elif key == "svg":
            cfg.svg = value is True or str(value).lower() in ("1", "true", "yes")
        else:
            raise ConfigError(f"unknown config key {key!r}")
    cfg.tolerances = tols
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _chart(cfg: RunConfig) -> MetricChart:
    if cfg.gauge == CONFORMAL:
        return MetricChart.conformal(cfg.metric, box=cfg.box)
    return MetricChart.null(cfg.metric, box=cfg.box)


def _lattice(cfg: RunConfig) -> Lattice:
    x0, x1, y0, y1 = cfg.box
    return Lattice(x0, x1, y0, y1, cfg.grid[0], cfg.grid[1])


def _classifier_tolerances(cfg: RunConfig) -> Tolerances:
    keys = ("K", "involution", "split", "mask", "imag")
    return Tolerances(**{k: cfg.tolerances[k] for k in keys if k in cfg.tolerances})


def _base(cfg: RunConfig, lattice: Lattice):
    if cfg.base is None:
        return lattice.center_node
    return lattice.nearest_node(*cfg.base)


def _header(cfg: RunConfig, command: str) -> dict:
    return {"tool": "geoweb", "version": __version__, "command": command, "config": cfg.echo()}


class _Timer:
    def __init__(self):
        self.marks = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t = time.perf_counter()

            def __exit__(self, *exc):
                timer.marks[name] = time.perf_counter() - self.t

        return _Ctx()


def cmd_classify(cfg: RunConfig):
    timer = _Timer()
    chart = _chart(cfg)
    lattice = _lattice(cfg)
    with timer("classify"):
        verdict = classify(chart, lattice, _classifier_tolerances(cfg))
    rep = _header(cfg, "classify")
    rep.update(verdict.summary())
    if verdict.witness is not None and verdict.tag == THREE:
        rep["witness"] = _witness_summary(verdict)
    files = {"report.json": rp.dumps_json(rep), "timings.json": rp.dumps_json(timer.marks)}
    return EXIT_OK, files, rep


def _witness_summary(verdict) -> dict:
    w = verdict.witness
    out = {"branch": w.branch}
    for name in ("R", "Y", "F"):
        v = np.asarray(getattr(w, name))
        ok = v[np.isfinite(v)]
        out[name] = {"min": float(np.min(np.real(ok))), "max": float(np.max(np.real(ok)))} if ok.size else None
    return out


def _leaf_families(chart, source, lambdas, lattice, threads, step=4e-3, seeds=3):
    """Sample leaves: ``seeds`` seeds on the box diagonal for every lambda."""
    x0, x1, y0, y1 = lattice.box
    ts = np.linspace(0.25, 0.75, seeds)
    pts = [(x0 + t * (x1 - x0), y0 + t * (y1 - y0)) for t in ts]
    span = 2 * math.hypot(x1 - x0, y1 - y0)
    jobs = [(lam, p) for lam in lambdas for p in pts]

    def run(job):
        lam, p = job
        return trace_leaf(chart, source, p, lam, step=step, max_length=span)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            leaves = list(pool.map(run, jobs))
    else:
        leaves = [run(j) for j in jobs]
    families = []
    for k, lam in enumerate(lambdas):
        fam = leaves[k * seeds:(k + 1) * seeds]
        label = "I = inf" if math.isinf(lam) else f"I = {lam:g}"
        families.append((label, [l.points for l in fam], fam))
    return families


def _build(cfg: RunConfig, rep: dict, timer: _Timer):
    """Classify, then build the integral; returns ``(solution, exit code, extra files)``."""
    chart = _chart(cfg)
    lattice = _lattice(cfg)
    with timer("classify"):
        verdict = classify(chart, lattice, _classifier_tolerances(cfg))
    rep["classification"] = verdict.summary()
    if verdict.tag not in (FIVE, THREE):
        rep["error"] = f"verdict {verdict.tag} does not permit construction"
        return None, EXIT_NUMERIC, {}
    init = list(cfg.init)
    base = _base(cfg, lattice)
    if verdict.tag == THREE:
        j, i = base
        w = verdict.witness
        R0, Y0 = float(np.real(w.R[j, i])), float(np.real(w.Y[j, i]))
        if (R0, Y0) != (init[3], init[4]):
            rep["init_override"] = {"R0": R0, "Y0": Y0, "reason": "taken from the classifier witness"}
            init[3], init[4] = R0, Y0
    try:
        with timer("build"):
            sol = build_integral(chart, tuple(init), lattice, base=base, verdict=verdict,
                                 path_tol=cfg.tolerances.get("path", 1e-6))
    except IntegralBuildError as err:
        rep["error"] = str(err)
        extra = {}
        if err.location is not None:
            rep["error_location"] = list(err.location)
        if err.discrepancy is not None:
            extra["discrepancy.csv"] = rp.csv_text(("x", "y", "discrepancy"), rp.field_rows(lattice, err.discrepancy))
        return None, EXIT_NUMERIC, extra
    return sol, EXIT_OK, {}


def cmd_build(cfg: RunConfig):
    timer = _Timer()
    rep = _header(cfg, "build")
    sol, code, files = _build(cfg, rep, timer)
    if sol is not None:
        with timer("verify"):
            rep["residuals"] = sol.residual_report()
        rep["base_point"] = list(sol.base_point)
        files["grid.csv"] = rp.csv_text(rp.GRID_COLUMNS, rp.grid_rows(sol.lattice, sol.fields))
        if cfg.svg:
            with timer("leaves"):
                fams = _leaf_families(sol.chart, sol, cfg.lambdas, sol.lattice, cfg.threads)
            files["leaves.svg"] = rp.svg_leaves(sol.lattice.box, [(lab, pts) for lab, pts, _ in fams],
                                                title="sample leaves")
            rep["leaves"] = [l.to_dict() for _, _, fam in fams for l in fam]
    files["report.json"] = rp.dumps_json(rep)
    files["timings.json"] = rp.dumps_json(timer.marks)
    return code, files, rep


def cmd_web(cfg: RunConfig):
    timer = _Timer()
    rep = _header(cfg, "web")
    files = {}
    if cfg.frame is not None:
        chart = _chart(cfg)
        try:
            source = ExprFrame(*cfg.frame, variables=chart.variables)
        except ExprError as err:
            raise ConfigError(f"bad frame expression: {err}") from err
        lattice = _lattice(cfg)
    else:
        sol, code, files = _build(cfg, rep, timer)
        if sol is None:
            files["report.json"] = rp.dumps_json(rep)
            files["timings.json"] = rp.dumps_json(timer.marks)
            return code, files, rep
        chart, source, lattice = sol.chart, sol, sol.lattice
    if cfg.perturb:
        source = PerturbedFrame(source, cfg.perturb)
    n = min(21, *cfg.grid)
    cert_lattice = Lattice.from_box(lattice.box, n)
    tols = {k: cfg.tolerances[k] for k in ("residual", "u", "geodesic") if k in cfg.tolerances}
    if "cross" in cfg.tolerances:
        tols["cross"] = cfg.tolerances["cross"]
    with timer("certify"):
        cert = nakai_certify(chart, source, cfg.lambdas, cert_lattice, trace=True,
                             tol_cross=tols.get("cross", 1e-8), tol_residual=tols.get("residual", 1e-6),
                             tol_u=tols.get("u", 1e-6), tol_geodesic=tols.get("geodesic", 1e-6))
    rep["certification"] = cert.to_dict()
    r = cert.cross_ratio_grid
    rep["cross_ratio"] = {"min": float(np.min(r)), "max": float(np.max(r)), "mean": float(np.mean(r))}
    files["cross_ratio.csv"] = rp.csv_text(("x", "y", "cross_ratio"), rp.field_rows(cert_lattice, r))
    with timer("leaves"):
        fams = _leaf_families(chart, source, cfg.lambdas, lattice, cfg.threads)
    files["web.svg"] = rp.svg_leaves(lattice.box, [(lab, pts) for lab, pts, _ in fams], title="geodesic 4-web")
    rep["leaves"] = [l.to_dict() for _, _, fam in fams for l in fam]
    files["report.json"] = rp.dumps_json(rep)
    files["timings.json"] = rp.dumps_json(timer.marks)
    return (EXIT_OK if cert.passed else EXIT_NUMERIC), files, rep


COMMANDS = {"classify": cmd_classify, "build": cmd_build, "web": cmd_web}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = make_config(args)
        code, files, rep = COMMANDS[args.command](cfg)
    except (ConfigError, MetricError, ExprError) as err:
        print(f"geoweb: configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (ArithmeticError, FloatingPointError, np.linalg.LinAlgError) as err:
        print(f"geoweb: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    out = rp.write_outputs(cfg.out_dir, files)
    summary = rep.get("verdict") or rep.get("classification", {}).get("verdict")
    print(f"geoweb {args.command}: exit {code}" + (f", verdict {summary}" if summary else "") + f" -> {out}")
    return code


if __name__ == "__main__":
    sys.exit(main())
