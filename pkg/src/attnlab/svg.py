"""Minimal SVG line charts and heatmaps, no plotting dependency."""

from __future__ import annotations

import math
from xml.sax.saxutils import escape

import numpy as np

W, H, PAD = 480, 320, 48


def _fmt(x):
    return f"{x:.4g}"


def line_chart(xs, series: dict, title="", xlabel="", path=None, logy=False) -> str:
    xs = np.asarray(xs, dtype=float)
    ys = {k: np.asarray(v, dtype=float) for k, v in series.items()}
    if logy:
        ys = {k: np.log10(np.maximum(v, 1e-300)) for k, v in ys.items()}
    allv = np.concatenate([v[np.isfinite(v)] for v in ys.values()]) if ys else np.zeros(1)
    lo, hi = (float(allv.min()), float(allv.max())) if allv.size else (0.0, 1.0)
    if hi == lo:
        lo, hi = lo - 0.5, hi + 0.5
    x0, x1 = float(xs.min()), float(xs.max())
    if x1 == x0:
        x1 = x0 + 1

    def px(x):
        return PAD + (x - x0) / (x1 - x0) * (W - 2 * PAD)

    def py(y):
        return H - PAD - (y - lo) / (hi - lo) * (H - 2 * PAD)

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e"]
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
             f'<line x1="{PAD}" y1="{H - PAD}" x2="{W - PAD}" y2="{H - PAD}" stroke="black"/>',
             f'<line x1="{PAD}" y1="{PAD}" x2="{PAD}" y2="{H - PAD}" stroke="black"/>',
             f'<text x="{PAD}" y="{H - PAD + 16}" font-size="10">{_fmt(x0)}</text>',
             f'<text x="{W - PAD}" y="{H - PAD + 16}" font-size="10" text-anchor="end">{_fmt(x1)}</text>',
             f'<text x="{W / 2}" y="{H - 8}" text-anchor="middle" font-size="11">{escape(xlabel)}</text>',
             f'<text x="{PAD - 4}" y="{H - PAD}" font-size="10" text-anchor="end">{_fmt(10 ** lo if logy else lo)}</text>',
             f'<text x="{PAD - 4}" y="{PAD + 4}" font-size="10" text-anchor="end">{_fmt(10 ** hi if logy else hi)}</text>']
    for i, (name, v) in enumerate(ys.items()):
        c = colors[i % len(colors)]
        pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, v) if math.isfinite(y))
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{pts}"/>')
        parts.append(f'<text x="{W - PAD}" y="{PAD + 14 * i}" font-size="11" fill="{c}" text-anchor="end">{escape(name)}</text>')
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text


def heatmap(M, title="", path=None) -> str:
    M = np.asarray(M, dtype=float)
    r, c = M.shape
    cell = min((W - 2 * PAD) / c, (H - 2 * PAD) / r)
    lo, hi = float(M.min()), float(M.max())
    span = hi - lo or 1.0
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
             '<rect width="100%" height="100%" fill="white"/>',
             f'<text x="{W / 2}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>']
    for i in range(r):
        for j in range(c):
            s = (M[i, j] - lo) / span
            shade = int(round(255 * (1 - s)))
            parts.append(f'<rect x="{PAD + j * cell:.2f}" y="{PAD + i * cell:.2f}" width="{cell:.2f}" '
                         f'height="{cell:.2f}" fill="rgb(255,{shade},{shade})"><title>{M[i, j]:.4f}</title></rect>')
    parts.append("</svg>")
    text = "\n".join(parts) + "\n"
    if path is not None:
        with open(path, "w") as fh:
            fh.write(text)
    return text
