"""Tiny deterministic SVG charts.

Charts are assembled from format strings with fixed precision and no
timestamps or library version strings, so identical inputs produce
byte-identical files; reports lean on that for reproducibility checks.
"""

from __future__ import annotations

from pathlib import Path

__all__ = ["line_chart", "write_chart", "PALETTE"]

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
           "#8c564b", "#17becf", "#7f7f7f"]

_MARGIN = {"left": 64.0, "right": 18.0, "top": 36.0, "bottom": 48.0}


def _bounds(series, axis):
    vals = [p[axis] for s in series for p in s["points"]]
    if not vals:
        raise ValueError("no points to plot")
    lo, hi = min(vals), max(vals)
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.04 * (hi - lo)
    return lo - pad, hi + pad


def _esc(text: str) -> str:
    return (str(text).replace("&", "&amp;").replace("<", "&lt;")
            .replace(">", "&gt;"))


def line_chart(series: list[dict], title: str, xlabel: str, ylabel: str,
               width: int = 640, height: int = 420,
               connect: bool = True) -> str:
    """Render line-plus-marker series.

    Each series is {"name": str, "points": [(x, y), ...]} with an
    optional "color"; points are drawn in the given order.
    """
    xlo, xhi = _bounds(series, 0)
    ylo, yhi = _bounds(series, 1)
    px0, px1 = _MARGIN["left"], width - _MARGIN["right"]
    py0, py1 = height - _MARGIN["bottom"], _MARGIN["top"]

    def sx(x):
        return px0 + (x - xlo) / (xhi - xlo) * (px1 - px0)

    def sy(y):
        return py0 + (y - ylo) / (yhi - ylo) * (py1 - py0)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
           f'height="{height}" viewBox="0 0 {width} {height}">',
           f'<rect width="{width}" height="{height}" fill="white"/>',
           f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" '
           f'font-family="sans-serif" font-size="14">{_esc(title)}</text>']

    # axes and ticks
    out.append(f'<line x1="{px0:.1f}" y1="{py0:.1f}" x2="{px1:.1f}" '
               f'y2="{py0:.1f}" stroke="black" stroke-width="1"/>')
    out.append(f'<line x1="{px0:.1f}" y1="{py0:.1f}" x2="{px0:.1f}" '
               f'y2="{py1:.1f}" stroke="black" stroke-width="1"/>')
    for i in range(5):
        fx = xlo + (xhi - xlo) * i / 4
        fy = ylo + (yhi - ylo) * i / 4
        out.append(f'<line x1="{sx(fx):.1f}" y1="{py0:.1f}" x2="{sx(fx):.1f}" '
                   f'y2="{py0 + 4:.1f}" stroke="black" stroke-width="1"/>')
        out.append(f'<text x="{sx(fx):.1f}" y="{py0 + 17:.1f}" '
                   f'text-anchor="middle" font-family="sans-serif" '
                   f'font-size="10">{fx:.3g}</text>')
        out.append(f'<line x1="{px0 - 4:.1f}" y1="{sy(fy):.1f}" '
                   f'x2="{px0:.1f}" y2="{sy(fy):.1f}" stroke="black" '
                   f'stroke-width="1"/>')
        out.append(f'<text x="{px0 - 7:.1f}" y="{sy(fy) + 3.5:.1f}" '
                   f'text-anchor="end" font-family="sans-serif" '
                   f'font-size="10">{fy:.3g}</text>')
    out.append(f'<text x="{(px0 + px1) / 2:.1f}" y="{height - 10:.1f}" '
               f'text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{(py0 + py1) / 2:.1f}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12" transform="rotate(-90 '
               f'16 {(py0 + py1) / 2:.1f})">{_esc(ylabel)}</text>')

    for si, s in enumerate(series):
        color = s.get("color", PALETTE[si % len(PALETTE)])
        pts = [(sx(x), sy(y)) for x, y in s["points"]]
        if connect and len(pts) > 1:
            d = " ".join(f"{x:.2f},{y:.2f}" for x, y in pts)
            out.append(f'<polyline points="{d}" fill="none" stroke="{color}" '
                       f'stroke-width="1.5"/>')
        for x, y in pts:
            out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="3" '
                       f'fill="{color}"/>')
        ly = py1 + 14 * si
        out.append(f'<line x1="{px1 - 120:.1f}" y1="{ly:.1f}" '
                   f'x2="{px1 - 100:.1f}" y2="{ly:.1f}" stroke="{color}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{px1 - 95:.1f}" y="{ly + 3.5:.1f}" '
                   f'font-family="sans-serif" font-size="10">'
                   f'{_esc(s["name"])}</text>')

    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(svg_text: str, path) -> None:
    Path(path).write_text(svg_text)
