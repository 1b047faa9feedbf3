"""Dependency-free SVG line plots of score series, pseudo-labels and ground
truth shading."""
from __future__ import annotations

from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT, PAD = 720, 260, 40


def _gt_spans(gt: np.ndarray) -> list:
    """Half-open [start, end) runs where gt is positive."""
    g = np.r_[0, (np.asarray(gt) > 0).astype(int), 0]
    edges = np.flatnonzero(np.diff(g))
    return list(zip(edges[::2], edges[1::2]))


def score_plot_svg(scores, pseudo=None, gt=None, title: str = "") -> str:
    """One panel: scores (solid), pseudo-labels (dashed), ground-truth
    anomaly windows shaded. The y-axis spans [0, 1]."""
    s = np.asarray(scores, dtype=float)
    T = len(s)
    if T == 0:
        raise ValueError("nothing to plot")
    w, h = WIDTH - 2 * PAD, HEIGHT - 2 * PAD

    def x(t):
        return PAD + (w * t / (T - 1) if T > 1 else w / 2)

    def y(v):
        return PAD + h * (1 - float(v))

    def polyline(v, style):
        pts = " ".join(f"{x(t):.2f},{y(val):.2f}" for t, val in enumerate(v))
        return f'<polyline fill="none" points="{pts}" {style}/>'

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}">',
           '<rect width="100%" height="100%" fill="white"/>']
    if gt is not None:
        step = w / max(T - 1, 1)
        for a, b in _gt_spans(gt):
            x0 = max(PAD, x(a) - step / 2)
            x1 = min(PAD + w, x(b - 1) + step / 2)
            out.append(f'<rect class="gt" x="{x0:.2f}" y="{PAD}" width="{x1 - x0:.2f}" '
                       f'height="{h}" fill="#f4c7c3"/>')
    out.append(f'<rect x="{PAD}" y="{PAD}" width="{w}" height="{h}" fill="none" stroke="#444"/>')
    for v in (0.0, 0.5, 1.0):
        out.append(f'<text x="{PAD - 6}" y="{y(v) + 4:.2f}" font-size="11" '
                   f'text-anchor="end">{v:g}</text>')
    out.append(f'<text x="{PAD + w}" y="{PAD + h + 16}" font-size="11" '
               f'text-anchor="end">snippet (T={T})</text>')
    if pseudo is not None:
        out.append(polyline(np.asarray(pseudo, float),
                            'class="pseudo" stroke="#d95f02" stroke-width="1.5" '
                            'stroke-dasharray="5,3"'))
    out.append(polyline(s, 'class="scores" stroke="#1b5e9e" stroke-width="1.8"'))
    if title:
        out.append(f'<text x="{PAD}" y="{PAD - 12}" font-size="13">{escape(title)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
