"""Minimal deterministic SVG line plots for precision-recall and recall-vs-k curves."""
from __future__ import annotations

from typing import Sequence
from xml.sax.saxutils import escape

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def line_plot_svg(series: Sequence[tuple[str, Sequence[float], Sequence[float]]], title: str,
                  xlabel: str, ylabel: str, xlim=(0.0, 1.0), ylim=(0.0, 1.0),
                  width: int = 480, height: int = 360) -> str:
    left, right, top, bottom = 60, 20, 30, 50
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - xlim[0]) / ((xlim[1] - xlim[0]) or 1.0) * pw

    def sy(y):
        return top + ph - (y - ylim[0]) / ((ylim[1] - ylim[0]) or 1.0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for i in range(6):
        fx = xlim[0] + (xlim[1] - xlim[0]) * i / 5
        fy = ylim[0] + (ylim[1] - ylim[0]) * i / 5
        out.append(f'<text x="{sx(fx):.1f}" y="{top + ph + 16}" text-anchor="middle" font-size="10">{fx:.3g}</text>')
        out.append(f'<text x="{left - 6}" y="{sy(fy) + 3:.1f}" text-anchor="end" font-size="10">{fy:.3g}</text>')
    out.append(f'<text x="{left + pw / 2:.1f}" y="{height - 12}" text-anchor="middle" font-size="12">{escape(xlabel)}</text>')
    out.append(f'<text x="14" y="{top + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 14 {top + ph / 2:.1f})">{escape(ylabel)}</text>')
    for k, (name, xs, ys) in enumerate(series):
        color = _COLORS[k % len(_COLORS)]
        if len(xs):
            pts = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys))
            out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = top + 14 + 14 * k
        out.append(f'<text x="{left + pw - 6}" y="{ly}" text-anchor="end" font-size="11" fill="{color}">{escape(name)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
