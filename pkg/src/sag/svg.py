"""Minimal hand-written SVG line charts."""

from __future__ import annotations

from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf")


@dataclass
class Series:
    label: str
    x: list
    y: list
    dashed: bool = False
    markers_only: bool = False


@dataclass
class Chart:
    title: str
    xlabel: str
    ylabel: str
    series: list = field(default_factory=list)
    width: int = 520
    height: int = 360
    ylim: tuple | None = (0.0, 1.05)
    xlim: tuple | None = None
    reverse_x: bool = False


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    return [float(v) for v in np.linspace(lo, hi, n)]


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".") if abs(v) < 1000 else f"{v:.0f}"


def render(chart: Chart) -> str:
    """Return the chart as a standalone SVG document."""
    ml, mr, mt, mb = 60, 130, 34, 48
    W, H = chart.width, chart.height
    pw, ph = W - ml - mr, H - mt - mb
    xs = [float(v) for s in chart.series for v in s.x]
    ys = [float(v) for s in chart.series for v in s.y if np.isfinite(v)]
    x0, x1 = chart.xlim or ((min(xs), max(xs)) if xs else (0.0, 1.0))
    if x1 == x0:
        x0, x1 = x0 - 0.5, x1 + 0.5
    if chart.ylim is not None:
        y0, y1 = chart.ylim
    else:
        y0, y1 = (min(ys), max(ys)) if ys else (0.0, 1.0)
        if y1 == y0:
            y0, y1 = y0 - 0.5, y1 + 0.5

    def px(v):
        f = (v - x0) / (x1 - x0)
        return ml + (1.0 - f if chart.reverse_x else f) * pw

    def py(v):
        return mt + (1.0 - (v - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{ml + pw / 2:.1f}" y="20" text-anchor="middle" font-size="13">{escape(chart.title)}</text>',
           f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>']
    for v in _ticks(x0, x1):
        X = px(v)
        out.append(f'<line x1="{X:.1f}" y1="{mt + ph}" x2="{X:.1f}" y2="{mt + ph + 4}" stroke="#444"/>')
        out.append(f'<text x="{X:.1f}" y="{mt + ph + 16}" text-anchor="middle">{_fmt(v)}</text>')
    for v in _ticks(y0, y1):
        Y = py(v)
        out.append(f'<line x1="{ml}" y1="{Y:.1f}" x2="{ml + pw}" y2="{Y:.1f}" stroke="#ddd"/>')
        out.append(f'<text x="{ml - 6}" y="{Y + 4:.1f}" text-anchor="end">{_fmt(v)}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{H - 10}" text-anchor="middle">{escape(chart.xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{escape(chart.ylabel)}</text>')
    for i, s in enumerate(chart.series):
        color = PALETTE[i % len(PALETTE)]
        pts = sorted((float(a), float(b)) for a, b in zip(s.x, s.y) if np.isfinite(b))
        if not pts:
            continue
        dash = ' stroke-dasharray="5,3"' if s.dashed else ""
        if s.markers_only:
            out += [f'<circle cx="{px(a):.1f}" cy="{py(b):.1f}" r="1.5" fill="{color}" fill-opacity="0.5"/>'
                    for a, b in zip(s.x, s.y)]
        else:
            path = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in pts)
            out.append(f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="2"{dash}/>')
            out += [f'<circle cx="{px(a):.1f}" cy="{py(b):.1f}" r="3" fill="{color}"/>' for a, b in pts]
        ly = mt + 14 + 16 * i
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly - 4}" x2="{ml + pw + 30}" y2="{ly - 4}" '
                   f'stroke="{color}" stroke-width="2"{dash}/>')
        out.append(f'<text x="{ml + pw + 34}" y="{ly}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write(chart: Chart, path) -> None:
    with open(path, "w") as fh:
        fh.write(render(chart))
