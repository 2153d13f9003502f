"""Self-contained SVG learning curves: mean line with a one-std band across runs."""
from __future__ import annotations

from pathlib import Path
from typing import List, Sequence, Tuple
from xml.sax.saxutils import escape

import numpy as np

from .metrics import eval_curve, read_metrics


class PlotError(ValueError):
    pass


def band(curves: Sequence[Sequence[Tuple[float, float]]]):
    """Align runs on their common x values; return ``(x, mean, std)`` with the
    population standard deviation across runs at each x."""
    curves = [c for c in curves if len(c)]
    if not curves:
        raise PlotError("no data points to plot (metrics are empty)")
    common = sorted(set.intersection(*(set(x for x, _ in c) for c in curves)))
    if not common:
        raise PlotError("runs share no common x values")
    table = np.array([[dict(c)[x] for x in common] for c in curves], dtype=np.float64)
    return np.array(common, dtype=np.float64), table.mean(axis=0), table.std(axis=0)


def _ticks(lo: float, hi: float, n: int = 5) -> np.ndarray:
    if hi <= lo:
        return np.array([lo])
    raw = (hi - lo) / n
    mag = 10 ** np.floor(np.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    return np.arange(np.ceil(lo / step) * step, hi + 0.5 * step, step)


def render_svg(x, mean, std, title: str = "", xlabel: str = "environment step",
               ylabel: str = "evaluation return", width: int = 640, height: int = 400) -> str:
    ml, mr, mt, mb = 70, 20, 36, 50
    pw, ph = width - ml - mr, height - mt - mb
    lo, hi = float(np.min(mean - std)), float(np.max(mean + std))
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    x0, x1 = float(x[0]), float(x[-1])
    if x1 == x0:
        x0, x1 = x0 - 1.0, x1 + 1.0

    def px(v):
        return ml + (v - x0) / (x1 - x0) * pw

    def py(v):
        return mt + (hi - v) / (hi - lo) * ph

    upper = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, mean + std)]
    lower = [f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x[::-1], (mean - std)[::-1])]
    line = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, mean))
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2:.1f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<polygon points="{" ".join(upper + lower)}" fill="#1f77b4" fill-opacity="0.25" stroke="none"/>',
        f'<polyline points="{line}" fill="none" stroke="#1f77b4" stroke-width="2"/>',
        f'<rect x="{ml}" y="{mt}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for v in _ticks(lo, hi):
        parts.append(f'<line x1="{ml - 4}" x2="{ml}" y1="{py(v):.2f}" y2="{py(v):.2f}" stroke="black"/>')
        parts.append(f'<text x="{ml - 6}" y="{py(v) + 4:.2f}" text-anchor="end">{v:g}</text>')
    for v in _ticks(x0, x1):
        parts.append(f'<line x1="{px(v):.2f}" x2="{px(v):.2f}" y1="{mt + ph}" y2="{mt + ph + 4}" stroke="black"/>')
        parts.append(f'<text x="{px(v):.2f}" y="{mt + ph + 16}" text-anchor="middle">{v:g}</text>')
    parts.append(f'<text x="{ml + pw / 2:.1f}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>')
    parts.append(f'<text transform="translate(16,{mt + ph / 2:.1f}) rotate(-90)" '
                 f'text-anchor="middle">{escape(ylabel)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def plot_metrics(paths: Sequence, out, column: str = "eval_return", title: str = "") -> Path:
    """Read one metrics CSV per run and write the mean ± std curve to ``out``."""
    curves: List = [eval_curve(read_metrics(p), column) for p in paths]
    x, mean, std = band(curves)  # raises before anything is written
    svg = render_svg(x, mean, std, title or f"{column} ({len(paths)} run{'s' * (len(paths) > 1)})",
                     ylabel=column.replace("_", " "))
    out = Path(out)
    out.write_text(svg)
    return out
