"""Output writers: DOT causal graphs, parallel-coordinates JSON/SVG."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

from .causal import CausalGraph

DEFAULT_AXES = (
    ("elapsed_start_time", "numeric"),
    ("kernel_name", "categorical"),
    ("copy_kind", "categorical"),
    ("transfer_size", "numeric"),
    ("kernel_duration", "numeric"),
    ("memory_stall", "numeric"),
)
LOW_COLOR = (0x2C, 0x7B, 0xB6)
HIGH_COLOR = (0xD7, 0x19, 0x1C)


class EmptyPlotError(ValueError):
    pass


def _q(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def emit_dot(g: CausalGraph) -> str:
    """Graphviz text; black = positive influence, red = negative."""
    lines = ["digraph g {", "  node [shape=box, fontname=\"Helvetica\"]; edge [fontsize=10];"]
    for name, _tier in sorted(g.nodes):
        attrs = " [style=bold]" if name == g.target else ""
        lines.append(f"  {_q(name)}{attrs};")
    for e in sorted(g.edges, key=lambda e: (e.src, e.dst)):
        attrs = [f'color="{"black" if e.sign >= 0 else "red"}"']
        if e.directed and e.dst == g.target:
            attrs.append(f'label="{e.weight_percent:.2f}%"')
        if not e.directed:
            attrs.append('dir="none"')
        lines.append(f"  {_q(e.src)} -> {_q(e.dst)} [{', '.join(attrs)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


@dataclass
class ParallelCoordsSpec:
    axes: list = field(default_factory=lambda: list(DEFAULT_AXES))
    rows: list = field(default_factory=list)
    color_axis: str = "kernel_duration"

    def __post_init__(self):
        names = [a for a, _ in self.axes]
        if self.color_axis not in names:
            raise ValueError(f"color axis {self.color_axis!r} is not an axis")
        if dict(self.axes)[self.color_axis] != "numeric":
            raise ValueError("color axis must be numeric")
        for r in self.rows:
            if len(r) != len(self.axes):
                raise ValueError("row length does not match the axes")
            for (name, kind), v in zip(self.axes, r):
                if kind == "numeric" and not math.isfinite(v):
                    raise ValueError(f"non-finite value on numeric axis {name!r}")


def _sig6(v) -> float | int:
    if isinstance(v, int):
        return int(float(f"{v:.6g}")) if abs(v) >= 1_000_000 else v
    return float(f"{v:.6g}")


def _axis_meta(spec: ParallelCoordsSpec) -> list[dict]:
    meta = []
    for j, (name, kind) in enumerate(spec.axes):
        col = [r[j] for r in spec.rows]
        if kind == "numeric":
            entry = {"name": name, "kind": kind,
                     "min": _sig6(min(col)) if col else None,
                     "max": _sig6(max(col)) if col else None}
        else:
            cats = list(dict.fromkeys(str(v) for v in col))
            entry = {"name": name, "kind": kind, "categories": cats}
        meta.append(entry)
    return meta


def emit_paracoords_json(spec: ParallelCoordsSpec) -> str:
    kinds = [k for _, k in spec.axes]
    rows = [[_sig6(v) if k == "numeric" else str(v) for v, k in zip(r, kinds)] for r in spec.rows]
    doc = {"axes": _axis_meta(spec), "color_axis": spec.color_axis, "rows": rows}
    return json.dumps(doc, indent=None, separators=(",", ":")) + "\n"


def interpolate_color(t: float) -> str:
    """Hex colour at fraction t along the low->high ramp, channels rounded half up."""
    t = min(1.0, max(0.0, t))
    chans = [math.floor(lo + (hi - lo) * t + 0.5) for lo, hi in zip(LOW_COLOR, HIGH_COLOR)]
    return "#" + "".join(f"{c:02X}" for c in chans)


def render_paracoords_svg(spec: ParallelCoordsSpec, width_px: int = 900, height_px: int = 420) -> str:
    if not spec.rows:
        raise EmptyPlotError("parallel-coordinates plot has no rows")
    if width_px < 100 or height_px < 100:
        raise ValueError("plot must be at least 100x100 px")
    margin_x, top, bottom = 60.0, 40.0, height_px - 30.0
    na = len(spec.axes)
    if na == 1:
        xs = [width_px / 2.0]
    else:
        step = (width_px - 2 * margin_x) / (na - 1)
        xs = [margin_x + i * step for i in range(na)]

    positions = []  # per axis: value -> fraction in [0, 1]
    for j, (name, kind) in enumerate(spec.axes):
        col = [r[j] for r in spec.rows]
        if kind == "numeric":
            lo, hi = min(col), max(col)
            positions.append(lambda v, lo=lo, hi=hi: 0.5 if hi == lo else (v - lo) / (hi - lo))
        else:
            cats = list(dict.fromkeys(str(v) for v in col))
            rank = {c: i for i, c in enumerate(cats)}
            span = len(cats) - 1
            positions.append(lambda v, rank=rank, span=span: 0.5 if span == 0 else rank[str(v)] / span)

    ci = [a for a, _ in spec.axes].index(spec.color_axis)
    cvals = [r[ci] for r in spec.rows]
    clo, chi = min(cvals), max(cvals)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width_px}" height="{height_px}" '
        f'viewBox="0 0 {width_px} {height_px}">',
        f'<rect width="{width_px}" height="{height_px}" fill="#FFFFFF"/>',
        '<g id="rows" fill="none" stroke-width="1" stroke-opacity="0.6">',
    ]
    for r in spec.rows:
        pts = []
        for j, v in enumerate(r):
            y = bottom - positions[j](v) * (bottom - top)
            pts.append(f"{xs[j]:.2f},{y:.2f}")
        color = HIGH_COLOR_HEX if chi == clo else interpolate_color((r[ci] - clo) / (chi - clo))
        out.append(f'<polyline points="{" ".join(pts)}" stroke="{color}"/>')
    out.append("</g>")
    out.append('<g id="axes" stroke="#333333" stroke-width="1">')
    for x in xs:
        out.append(f'<line x1="{x:.2f}" y1="{top:.2f}" x2="{x:.2f}" y2="{bottom:.2f}"/>')
    out.append("</g>")
    out.append('<g id="labels" font-family="Helvetica" font-size="11" text-anchor="middle">')
    for x, (name, _) in zip(xs, spec.axes):
        out.append(f'<text x="{x:.2f}" y="{top - 12:.2f}">{_xml(name)}</text>')
    out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"


HIGH_COLOR_HEX = interpolate_color(1.0)


def _xml(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def paracoords_rows(kernel_names: Sequence, kernel_start: Sequence, kernel_dur: Sequence,
                    copy_kind: Sequence, nbytes: Sequence, stall: Sequence, t0_ns: int) -> list:
    """Rows in DEFAULT_AXES order; times converted from ns to ms."""
    return [
        [(int(s) - t0_ns) / 1e6, str(nm), int(ck), int(b), int(d) / 1e3, float(st) / 1e3]
        for nm, s, d, ck, b, st in zip(kernel_names, kernel_start, kernel_dur, copy_kind, nbytes, stall)
    ]
