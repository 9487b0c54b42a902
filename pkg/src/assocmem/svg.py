"""Minimal SVG rendering: heatmaps with contour lines and line plots with optional log axes."""
from __future__ import annotations

import math
from typing import Iterable, Optional, Sequence
from xml.sax.saxutils import escape

import numpy as np

__all__ = ["marching_squares", "heatmap_svg", "line_plot_svg", "PALETTE"]

WIDTH, HEIGHT = 520, 440
MARGIN = dict(left=64, right=20, top=36, bottom=52)
PALETTE = ["#d62728", "#2ca02c", "#1f77b4", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"]

# anchors of a perceptually ordered blue -> yellow map
_CMAP = np.array([
    [68, 1, 84], [59, 82, 139], [33, 145, 140], [94, 201, 98], [253, 231, 37],
], dtype=float)


def _color(t: float) -> str:
    if not math.isfinite(t):
        return "#ffffff"
    t = min(max(t, 0.0), 1.0) * (len(_CMAP) - 1)
    i = min(int(t), len(_CMAP) - 2)
    c = _CMAP[i] + (t - i) * (_CMAP[i + 1] - _CMAP[i])
    return "#%02x%02x%02x" % tuple(int(round(v)) for v in c)


def marching_squares(x: np.ndarray, y: np.ndarray, values: np.ndarray, level: float):
    """Segments ``(x0, y0, x1, y1)`` of the ``level`` set of ``values[i, j]`` sampled at ``(x[i], y[j])``."""
    v = np.asarray(values, dtype=float) - level
    segs = []
    for i in range(len(x) - 1):
        for j in range(len(y) - 1):
            corners = [(x[i], y[j], v[i, j]), (x[i + 1], y[j], v[i + 1, j]),
                       (x[i + 1], y[j + 1], v[i + 1, j + 1]), (x[i], y[j + 1], v[i, j + 1])]
            if not all(math.isfinite(c[2]) for c in corners):
                continue
            pts = []
            for k in range(4):
                (xa, ya, va), (xb, yb, vb) = corners[k], corners[(k + 1) % 4]
                if (va < 0) != (vb < 0):
                    s = va / (va - vb)
                    pts.append((xa + s * (xb - xa), ya + s * (yb - ya)))
            # 4 crossings is a saddle cell; pair consecutive edges
            for a in range(0, len(pts) - 1, 2):
                segs.append((*pts[a], *pts[a + 1]))
    return segs


class _Axes:
    def __init__(self, xlim, ylim, logx=False, logy=False):
        self.logx, self.logy = logx, logy
        self.x0, self.x1 = (math.log10(v) for v in xlim) if logx else xlim
        self.y0, self.y1 = (math.log10(v) for v in ylim) if logy else ylim
        if self.x1 == self.x0:
            self.x1 = self.x0 + 1.0
        if self.y1 == self.y0:
            self.y1 = self.y0 + 1.0
        self.pw = WIDTH - MARGIN["left"] - MARGIN["right"]
        self.ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(self, x):
        x = math.log10(x) if self.logx else x
        return MARGIN["left"] + (x - self.x0) / (self.x1 - self.x0) * self.pw

    def py(self, y):
        y = math.log10(y) if self.logy else y
        return MARGIN["top"] + (1 - (y - self.y0) / (self.y1 - self.y0)) * self.ph

    def ticks(self, lo, hi, log):
        if log:
            return [10.0 ** k for k in range(math.ceil(lo - 1e-9), math.floor(hi + 1e-9) + 1)]
        return list(np.linspace(lo, hi, 5))

    def frame(self, title, xlabel, ylabel) -> list[str]:
        L, T = MARGIN["left"], MARGIN["top"]
        out = [f'<rect x="{L}" y="{T}" width="{self.pw}" height="{self.ph}" fill="none" stroke="#333"/>']
        for v in self.ticks(self.x0, self.x1, self.logx):
            X = self.px(v)
            out.append(f'<line x1="{X:.2f}" y1="{T + self.ph}" x2="{X:.2f}" y2="{T + self.ph + 5}" stroke="#333"/>')
            out.append(f'<text x="{X:.2f}" y="{T + self.ph + 18}" font-size="11" text-anchor="middle">{_fmt(v)}</text>')
        for v in self.ticks(self.y0, self.y1, self.logy):
            Y = self.py(v)
            out.append(f'<line x1="{L - 5}" y1="{Y:.2f}" x2="{L}" y2="{Y:.2f}" stroke="#333"/>')
            out.append(f'<text x="{L - 8}" y="{Y + 4:.2f}" font-size="11" text-anchor="end">{_fmt(v)}</text>')
        out.append(f'<text x="{WIDTH / 2}" y="20" font-size="14" text-anchor="middle">{escape(title)}</text>')
        out.append(f'<text x="{L + self.pw / 2}" y="{HEIGHT - 12}" font-size="12" text-anchor="middle">{escape(xlabel)}</text>')
        out.append(f'<text x="16" y="{T + self.ph / 2}" font-size="12" text-anchor="middle" '
                   f'transform="rotate(-90 16 {T + self.ph / 2})">{escape(ylabel)}</text>')
        return out


def _fmt(v: float) -> str:
    if v != 0 and (abs(v) >= 1e4 or abs(v) < 1e-2):
        return f"{v:.0e}"
    return f"{v:.3g}"


def _doc(body: Iterable[str]) -> str:
    head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif">\n'
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>\n')
    return head + "\n".join(body) + "\n</svg>\n"


def _polyline(ax: _Axes, xs, ys, color, width=1.5, dots=False) -> list[str]:
    pts = [(ax.px(a), ax.py(b)) for a, b in zip(xs, ys)
           if math.isfinite(a) and math.isfinite(b) and (not ax.logx or a > 0) and (not ax.logy or b > 0)]
    if not pts:
        return []
    path = " ".join(f"{a:.2f},{b:.2f}" for a, b in pts)
    out = [f'<polyline points="{path}" fill="none" stroke="{color}" stroke-width="{width}"/>']
    if dots:
        out += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="2.2" fill="{color}"/>' for a, b in pts]
    return out


def heatmap_svg(x: Sequence[float], y: Sequence[float], values: np.ndarray, *, title: str = "",
                xlabel: str = "", ylabel: str = "", contour_field: Optional[np.ndarray] = None,
                levels: Sequence[float] = (), log_color: bool = False,
                overlays: Sequence[tuple] = (), logx: bool = False, logy: bool = False) -> str:
    """Cells ``values[i, j]`` at ``(x[i], y[j])`` coloured, with optional contours and polylines.

    ``overlays`` holds ``(xs, ys, color)`` triples drawn on top.
    """
    x, y = np.asarray(x, float), np.asarray(y, float)
    vals = np.asarray(values, float)
    shown = np.log10(np.maximum(vals, 1e-300)) if log_color else vals
    finite = shown[np.isfinite(shown)]
    lo, hi = (finite.min(), finite.max()) if finite.size else (0.0, 1.0)
    span = hi - lo if hi > lo else 1.0
    ax = _Axes((x[0], x[-1]), (y[0], y[-1]), logx, logy)
    body = []

    def edges(c, log):
        c = np.log10(c) if log else c
        if c.size == 1:
            return np.array([c[0] - 0.5, c[0] + 0.5])
        mid = (c[1:] + c[:-1]) / 2
        e = np.concatenate([[2 * c[0] - mid[0]], mid, [2 * c[-1] - mid[-1]]])
        return 10 ** e if log else e

    ex, ey = edges(x, logx), edges(y, logy)
    ax.x0, ax.x1 = (math.log10(ex[0]), math.log10(ex[-1])) if logx else (ex[0], ex[-1])
    ax.y0, ax.y1 = (math.log10(ey[0]), math.log10(ey[-1])) if logy else (ey[0], ey[-1])
    for i in range(x.size):
        X0, X1 = ax.px(ex[i]), ax.px(ex[i + 1])
        for j in range(y.size):
            Y0, Y1 = ax.py(ey[j + 1]), ax.py(ey[j])
            body.append(f'<rect x="{X0:.2f}" y="{Y0:.2f}" width="{X1 - X0 + 0.3:.2f}" '
                        f'height="{Y1 - Y0 + 0.3:.2f}" fill="{_color((shown[i, j] - lo) / span)}"/>')
    if contour_field is not None:
        for level in levels:
            for (xa, ya, xb, yb) in marching_squares(x, y, contour_field, level):
                body.append(f'<line x1="{ax.px(xa):.2f}" y1="{ax.py(ya):.2f}" x2="{ax.px(xb):.2f}" '
                            f'y2="{ax.py(yb):.2f}" stroke="#222" stroke-width="0.8"/>')
    for xs, ys, color in overlays:
        body += _polyline(ax, xs, ys, color, 1.6, dots=True)
    body += ax.frame(title, xlabel, ylabel)
    return _doc(body)


def line_plot_svg(series: Sequence[tuple], *, title: str = "", xlabel: str = "", ylabel: str = "",
                  logx: bool = False, logy: bool = False, hlines: Sequence[float] = ()) -> str:
    """``series`` holds ``(label, xs, ys)`` triples; colours follow ``PALETTE``."""
    xs_all = np.concatenate([np.asarray(s[1], float) for s in series])
    ys_all = np.concatenate([np.asarray(s[2], float) for s in series])
    okx = np.isfinite(xs_all) & ((xs_all > 0) if logx else True)
    oky = np.isfinite(ys_all) & ((ys_all > 0) if logy else True)
    xlim = (xs_all[okx].min(), xs_all[okx].max())
    ylim = (ys_all[oky].min(), ys_all[oky].max())
    if logx:
        xlim = (10 ** math.floor(math.log10(xlim[0])), 10 ** math.ceil(math.log10(xlim[1])))
    if logy:
        ylim = (10 ** math.floor(math.log10(ylim[0])), 10 ** math.ceil(math.log10(ylim[1])))
    ax = _Axes(xlim, ylim, logx, logy)
    body = []
    for h in hlines:
        if ylim[0] <= h <= ylim[1]:
            body.append(f'<line x1="{ax.px(xlim[0]):.2f}" y1="{ax.py(h):.2f}" x2="{ax.px(xlim[1]):.2f}" '
                        f'y2="{ax.py(h):.2f}" stroke="#999" stroke-dasharray="4 3"/>')
    for k, (label, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        body += _polyline(ax, xs, ys, color)
        ly = MARGIN["top"] + 14 + 14 * k
        body.append(f'<text x="{WIDTH - MARGIN["right"] - 6}" y="{ly}" font-size="11" '
                    f'text-anchor="end" fill="{color}">{escape(str(label))}</text>')
    body += ax.frame(title, xlabel, ylabel)
    return _doc(body)
