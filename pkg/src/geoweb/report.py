"""Deterministic JSON, CSV and SVG writers."""

from __future__ import annotations

import csv
import io
import json
import math
from pathlib import Path

import numpy as np

GRID_COLUMNS = ("x", "y", "A", "B", "C", "E", "R", "Y", "F", "K")
PALETTE = ("#1b6ca8", "#c0392b", "#27ae60", "#8e44ad", "#d35400", "#2c3e50")


def fmt_number(v) -> str:
    """17 significant digits; complex values as ``re+imj`` only when the imaginary part is nonzero."""
    if np.iscomplexobj(v):
        z = complex(v)
        if z.imag != 0:
            return f"{z.real:.17g}{z.imag:+.17g}j"
        v = z.real
    return f"{float(v):.17g}"


def jsonable(obj):
    """Recursively convert numpy scalars/arrays and non-finite floats for strict JSON."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (complex, np.complexfloating)):
        z = complex(obj)
        return jsonable(z.real) if z.imag == 0 else [jsonable(z.real), jsonable(z.imag)]
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        if math.isnan(f):
            return "nan"
        if math.isinf(f):
            return "inf" if f > 0 else "-inf"
        return f
    return obj


def dumps_json(obj) -> str:
    return json.dumps(jsonable(obj), sort_keys=True, indent=2, ensure_ascii=False, allow_nan=False) + "\n"


def csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([fmt_number(v) for v in row])
    return buf.getvalue()


def grid_rows(lattice, fields: dict):
    """Rows ``x, y, A, B, C, E, R, Y, F, K``, row-major (y outer, x inner)."""
    rows = []
    for j, y in enumerate(lattice.ys):
        for i, x in enumerate(lattice.xs):
            rows.append([x, y] + [fields[name][j, i] for name in GRID_COLUMNS[2:]])
    return rows


def field_rows(lattice, values: np.ndarray):
    rows = []
    for j, y in enumerate(lattice.ys):
        for i, x in enumerate(lattice.xs):
            rows.append([x, y, values[j, i]])
    return rows


def svg_leaves(box, families, size: int = 600, title: str = "") -> str:
    """SVG 1.1 drawing: one ``<g>`` per foliation, each a set of polylines.

    ``families`` is a list of ``(label, [points arrays])``.
    """
    x0, x1, y0, y1 = box
    scale = size / max(x1 - x0, y1 - y0)
    width = (x1 - x0) * scale
    height = (y1 - y0) * scale

    def sx(x):
        return f"{(x - x0) * scale:.6f}"

    def sy(y):
        return f"{(y1 - y) * scale:.6f}"

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.6f}" '
        f'height="{height:.6f}" viewBox="0 0 {width:.6f} {height:.6f}">',
    ]
    if title:
        out.append(f"<title>{_escape(title)}</title>")
    out.append(f'<rect x="0" y="0" width="{width:.6f}" height="{height:.6f}" fill="white" stroke="#999999"/>')
    for k, (label, leaves) in enumerate(families):
        color = PALETTE[k % len(PALETTE)]
        out.append(f'<g id="foliation-{k}" stroke="{color}" fill="none" stroke-width="1.2">')
        out.append(f"<desc>{_escape(label)}</desc>")
        for pts in leaves:
            if len(pts) < 2:
                continue
            coords = " ".join(f"{sx(p[0])},{sy(p[1])}" for p in pts)
            out.append(f'<polyline points="{coords}"/>')
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def write_outputs(out_dir, files: dict):
    """Single writer: create ``out_dir`` and write every ``name -> text`` pair."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name in sorted(files):
        (out / name).write_text(files[name], encoding="utf-8", newline="")
    return out
