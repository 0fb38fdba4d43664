"""Minimal, dependency-free SVG charts (scatter, histogram, slice preview)."""

from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 480, 360
MARGIN = 50
PALETTE = ["#222222", "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b"]


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _frame(title: str, xlabel: str, ylabel: str) -> list[str]:
    return [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 10}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>',
        f'<text x="14" y="{HEIGHT / 2}" text-anchor="middle" font-size="12" '
        f'transform="rotate(-90 14 {HEIGHT / 2})">{escape(ylabel)}</text>',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" height="{HEIGHT - 2 * MARGIN}" '
        f'fill="none" stroke="black"/>',
    ]


def _range(values: Sequence[float]) -> tuple[float, float]:
    lo, hi = float(min(values)), float(max(values))
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    pad = 0.05 * (hi - lo)
    return lo - pad, hi + pad


def _axis_ticks(lo: float, hi: float, horizontal: bool) -> list[str]:
    out = []
    for t in np.linspace(lo, hi, 5):
        frac = (t - lo) / (hi - lo)
        if horizontal:
            x = MARGIN + frac * (WIDTH - 2 * MARGIN)
            out.append(f'<text x="{_fmt(x)}" y="{HEIGHT - MARGIN + 15}" text-anchor="middle" '
                       f'font-size="10">{t:.3g}</text>')
        else:
            y = HEIGHT - MARGIN - frac * (HEIGHT - 2 * MARGIN)
            out.append(f'<text x="{MARGIN - 4}" y="{_fmt(y + 3)}" text-anchor="end" '
                       f'font-size="10">{t:.3g}</text>')
    return out


def scatter_svg(xs: Sequence[float], ys: Sequence[float], groups: Sequence[int], title: str,
                xlabel: str, ylabel: str) -> str:
    """One ``<circle class="marker">`` per point, coloured by integer group code."""
    if not (len(xs) == len(ys) == len(groups)) or not xs:
        raise ValueError("scatter needs equal-length, non-empty series")
    x0, x1 = _range(xs)
    y0, y1 = _range(ys)
    parts = _frame(title, xlabel, ylabel)
    parts += _axis_ticks(x0, x1, True) + _axis_ticks(y0, y1, False)
    lo, hi = max(x0, y0), min(x1, y1)
    if lo < hi:
        def px(v):
            return MARGIN + (v - x0) / (x1 - x0) * (WIDTH - 2 * MARGIN)

        def py(v):
            return HEIGHT - MARGIN - (v - y0) / (y1 - y0) * (HEIGHT - 2 * MARGIN)
        parts.append(f'<line x1="{_fmt(px(lo))}" y1="{_fmt(py(lo))}" x2="{_fmt(px(hi))}" '
                     f'y2="{_fmt(py(hi))}" stroke="#999999" stroke-dasharray="4 3"/>')
    for x, y, g in zip(xs, ys, groups):
        cx = MARGIN + (x - x0) / (x1 - x0) * (WIDTH - 2 * MARGIN)
        cy = HEIGHT - MARGIN - (y - y0) / (y1 - y0) * (HEIGHT - 2 * MARGIN)
        color = PALETTE[abs(int(g)) % len(PALETTE)]
        parts.append(f'<circle class="marker" cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="3" '
                     f'fill="{color}" fill-opacity="0.7"><title>{int(g)}</title></circle>')
    for i, g in enumerate(sorted(set(int(v) for v in groups), reverse=True)):
        y = MARGIN + 12 + 14 * i
        parts.append(f'<circle cx="{WIDTH - MARGIN + 10}" cy="{y - 4}" r="4" fill="{PALETTE[abs(g) % len(PALETTE)]}"/>')
        parts.append(f'<text x="{WIDTH - MARGIN + 18}" y="{y}" font-size="10">{g}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def histogram_svg(counts: Sequence[int], edges: Sequence[float], title: str, xlabel: str) -> str:
    """One ``<rect class="bar">`` per bin."""
    if len(edges) != len(counts) + 1:
        raise ValueError("need len(counts) + 1 edges")
    parts = _frame(title, xlabel, "count")
    parts += _axis_ticks(edges[0], edges[-1], True) + _axis_ticks(0, max(max(counts), 1), False)
    top = max(max(counts), 1)
    span = edges[-1] - edges[0]
    plot_w, plot_h = WIDTH - 2 * MARGIN, HEIGHT - 2 * MARGIN
    for c, a, b in zip(counts, edges[:-1], edges[1:]):
        x = MARGIN + (a - edges[0]) / span * plot_w
        w = (b - a) / span * plot_w
        h = c / top * plot_h
        parts.append(f'<rect class="bar" x="{_fmt(x)}" y="{_fmt(HEIGHT - MARGIN - h)}" width="{_fmt(w)}" '
                     f'height="{_fmt(h)}" fill="#1f77b4" stroke="white"><title>{c}</title></rect>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def slice_svg(bits: np.ndarray, reverse: bool = False, cell: int = 8) -> str:
    """Render a 2D binary map as pixels; ``reverse`` draws errors dark on light."""
    h, w = bits.shape
    on, off = ("black", "white") if reverse else ("white", "black")
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w * cell}" height="{h * cell}">',
             f'<rect x="0" y="0" width="{w * cell}" height="{h * cell}" fill="{off}"/>']
    for i, j in zip(*np.nonzero(bits)):
        parts.append(f'<rect x="{j * cell}" y="{i * cell}" width="{cell}" height="{cell}" fill="{on}"/>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
