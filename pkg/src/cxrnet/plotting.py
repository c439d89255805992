"""Minimal deterministic SVG line charts."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=150, top=40, bottom=55)
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd")


def _fmt(v):
    return f"{v:.2f}"


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def line_chart(series, title, xlabel, ylabel):
    """Render ``{name: (xs, ys)}`` as an SVG document string.

    Non-finite y values are dropped from their polyline.
    """
    pts_all = [(x, y) for xs, ys in series.values() for x, y in zip(xs, ys) if math.isfinite(y)]
    if not pts_all:
        raise ValueError("nothing to plot")
    xmin, xmax = min(p[0] for p in pts_all), max(p[0] for p in pts_all)
    ymin, ymax = min(p[1] for p in pts_all), max(p[1] for p in pts_all)
    if xmax == xmin:
        xmax = xmin + 1
    if ymax == ymin:
        ymax = ymin + 1
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def sx(x):
        return MARGIN["left"] + (x - xmin) / (xmax - xmin) * pw

    def sy(y):
        return MARGIN["top"] + ph - (y - ymin) / (ymax - ymin) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        '<rect width="100%" height="100%" fill="white"/>',
        f'<text x="{WIDTH / 2:.2f}" y="22" text-anchor="middle" font-size="16">{escape(title)}</text>',
        f'<line class="axis" x1="{MARGIN["left"]}" y1="{MARGIN["top"] + ph}" '
        f'x2="{MARGIN["left"] + pw}" y2="{MARGIN["top"] + ph}" stroke="black"/>',
        f'<line class="axis" x1="{MARGIN["left"]}" y1="{MARGIN["top"]}" '
        f'x2="{MARGIN["left"]}" y2="{MARGIN["top"] + ph}" stroke="black"/>',
    ]
    for t in _ticks(xmin, xmax):
        out.append(f'<text x="{_fmt(sx(t))}" y="{MARGIN["top"] + ph + 18}" text-anchor="middle" '
                   f'font-size="11">{t:g}</text>')
    for t in _ticks(ymin, ymax):
        out.append(f'<text x="{MARGIN["left"] - 8}" y="{_fmt(sy(t) + 4)}" text-anchor="end" '
                   f'font-size="11">{t:.4g}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle" '
               f'font-size="13">{escape(xlabel)}</text>')
    out.append(f'<text x="18" y="{MARGIN["top"] + ph / 2:.2f}" text-anchor="middle" font-size="13" '
               f'transform="rotate(-90 18 {MARGIN["top"] + ph / 2:.2f})">{escape(ylabel)}</text>')
    legend_x = MARGIN["left"] + pw + 15
    for i, (name, (xs, ys)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        pts = " ".join(f"{_fmt(sx(x))},{_fmt(sy(y))}" for x, y in zip(xs, ys) if math.isfinite(y))
        out.append(f'<polyline data-series="{escape(name)}" fill="none" stroke="{color}" '
                   f'stroke-width="2" points="{pts}"/>')
        ly = MARGIN["top"] + 10 + 22 * i
        out.append(f'<g class="legend"><line x1="{legend_x}" y1="{ly}" x2="{legend_x + 20}" y2="{ly}" '
                   f'stroke="{color}" stroke-width="2"/><text x="{legend_x + 26}" y="{ly + 4}" '
                   f'font-size="12">{escape(name)}</text></g>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
