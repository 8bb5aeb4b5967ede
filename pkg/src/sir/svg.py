"""Deterministic SVG emission for benchmark results and spectrum maps.

Fixed canvas, fixed palette, stable element order, fixed-precision floats:
rendering the same input twice yields identical bytes.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["render_curves", "render_map"]

_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")

_W, _H = 640, 440
_ML, _MR, _MT, _MB = 70, 30, 30, 60


def _f(x: float) -> str:
    return f"{float(x):.3f}"


def _ticks(lo: float, hi: float, n: int = 6) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(n - 1, 1)
    mag = 10.0 ** math.floor(math.log10(raw))
    for mult in (1.0, 2.0, 2.5, 5.0, 10.0):
        if raw <= mult * mag:
            step = mult * mag
            break
    else:
        step = 10.0 * mag
    t0 = math.ceil(lo / step) * step
    out = []
    t = t0
    while t <= hi + 1e-12 * step:
        out.append(round(t, 12))
        t += step
    return out


def render_curves(rows, xlabel: str, ylabel: str, title: str = "") -> str:
    """Line chart from rows of (x, series, y, ci95).

    One polyline per series (insertion order of first appearance), CI whiskers
    per point, legend with one entry per series.  Rows whose y is NaN are
    rendered as gaps.
    """
    rows = list(rows)
    if not rows:
        raise ValueError("no rows to render")
    series: dict[str, list] = {}
    for x, name, y, ci in rows:
        series.setdefault(str(name), []).append((float(x), float(y), float(ci)))
    xs = [float(r[0]) for r in rows]
    ys = [r[2] for r in rows if np.isfinite(r[2])]
    cis = [r[3] for r in rows if np.isfinite(r[2]) and np.isfinite(r[3])]
    if not ys:
        raise ValueError("all rows are missing values")
    xlo, xhi = min(xs), max(xs)
    ylo = min(y - c for y, c in zip(ys, cis)) if cis else min(ys)
    yhi = max(y + c for y, c in zip(ys, cis)) if cis else max(ys)
    pad = 0.05 * max(yhi - ylo, 1e-9)
    ylo, yhi = ylo - pad, yhi + pad
    if xhi <= xlo:
        xhi = xlo + 1.0

    def px(x):
        return _ML + (x - xlo) / (xhi - xlo) * (_W - _ML - _MR)

    def py(y):
        return _H - _MB - (y - ylo) / (yhi - ylo) * (_H - _MT - _MB)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
           f'viewBox="0 0 {_W} {_H}">',
           f'<rect width="{_W}" height="{_H}" fill="white"/>']
    if title:
        out.append(f'<text x="{_W // 2}" y="20" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="14">{title}</text>')
    ax = f'stroke="black" stroke-width="1"'
    out.append(f'<line x1="{_ML}" y1="{_H - _MB}" x2="{_W - _MR}" y2="{_H - _MB}" {ax}/>')
    out.append(f'<line x1="{_ML}" y1="{_MT}" x2="{_ML}" y2="{_H - _MB}" {ax}/>')
    for t in _ticks(xlo, xhi):
        if t < xlo - 1e-12 or t > xhi + 1e-12:
            continue
        x = px(t)
        out.append(f'<line x1="{_f(x)}" y1="{_H - _MB}" x2="{_f(x)}" y2="{_H - _MB + 5}" {ax}/>')
        out.append(f'<text x="{_f(x)}" y="{_H - _MB + 20}" text-anchor="middle" '
                   f'font-family="sans-serif" font-size="11">{t:g}</text>')
    for t in _ticks(ylo, yhi):
        if t < ylo - 1e-12 or t > yhi + 1e-12:
            continue
        y = py(t)
        out.append(f'<line x1="{_ML - 5}" y1="{_f(y)}" x2="{_ML}" y2="{_f(y)}" {ax}/>')
        out.append(f'<text x="{_ML - 8}" y="{_f(y + 4)}" text-anchor="end" '
                   f'font-family="sans-serif" font-size="11">{t:g}</text>')
    out.append(f'<text x="{(_ML + _W - _MR) // 2}" y="{_H - 15}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12">{xlabel}</text>')
    out.append(f'<text x="18" y="{(_MT + _H - _MB) // 2}" text-anchor="middle" '
               f'font-family="sans-serif" font-size="12" '
               f'transform="rotate(-90 18 {(_MT + _H - _MB) // 2})">{ylabel}</text>')
    for i, (name, pts) in enumerate(series.items()):
        color = _PALETTE[i % len(_PALETTE)]
        pts = sorted(pts)
        segs: list[list[str]] = [[]]
        for x, y, ci in pts:
            if not np.isfinite(y):
                if segs[-1]:
                    segs.append([])
                continue
            segs[-1].append(f"{_f(px(x))},{_f(py(y))}")
            if np.isfinite(ci) and ci > 0:
                out.append(f'<line x1="{_f(px(x))}" y1="{_f(py(y - ci))}" '
                           f'x2="{_f(px(x))}" y2="{_f(py(y + ci))}" '
                           f'stroke="{color}" stroke-width="1"/>')
        for seg in segs:
            if len(seg) >= 2:
                out.append(f'<polyline points="{" ".join(seg)}" fill="none" '
                           f'stroke="{color}" stroke-width="2"/>')
            elif len(seg) == 1:
                cx, cy = seg[0].split(",")
                out.append(f'<circle cx="{cx}" cy="{cy}" r="3" fill="{color}"/>')
        ly = _MT + 16 + 16 * i
        out.append(f'<line x1="{_W - _MR - 130}" y1="{ly - 4}" x2="{_W - _MR - 105}" '
                   f'y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{_W - _MR - 100}" y="{ly}" font-family="sans-serif" '
                   f'font-size="12">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def render_map(area_km, true_circles, est_circles, points=None,
               labels=None) -> str:
    """Spatial map: sample points colored by state label, true coverage disks
    solid, estimated disks dashed (one per estimate)."""
    w_km, h_km = float(area_km[0]), float(area_km[1])
    if w_km <= 0 or h_km <= 0:
        raise ValueError("area must be positive")
    if not true_circles and not est_circles and points is None:
        raise ValueError("nothing to render")
    size = 520
    m = 40
    scale = (size - 2 * m) / max(w_km, h_km)

    def px(x):
        return m + x * scale

    def py(y):
        return size - m - y * scale

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" '
           f'viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>',
           f'<rect x="{_f(px(0))}" y="{_f(py(h_km))}" width="{_f(w_km * scale)}" '
           f'height="{_f(h_km * scale)}" fill="none" stroke="black" stroke-width="1"/>']
    if points is not None:
        pts = np.asarray(points, float)
        labs = (np.zeros(len(pts), dtype=int) if labels is None
                else np.asarray(labels, dtype=int))
        for i in range(pts.shape[0]):
            color = _PALETTE[int(labs[i]) % len(_PALETTE)]
            out.append(f'<circle cx="{_f(px(pts[i, 0]))}" cy="{_f(py(pts[i, 1]))}" '
                       f'r="1.5" fill="{color}"/>')
    for cx, cy, r, ch in true_circles:
        color = _PALETTE[int(ch) % len(_PALETTE)]
        out.append(f'<circle cx="{_f(px(cx))}" cy="{_f(py(cy))}" r="{_f(r * scale)}" '
                   f'fill="none" stroke="{color}" stroke-width="2"/>')
    for cx, cy, r, ch in est_circles:
        color = _PALETTE[int(ch) % len(_PALETTE)]
        out.append(f'<circle cx="{_f(px(cx))}" cy="{_f(py(cy))}" r="{_f(r * scale)}" '
                   f'fill="none" stroke="{color}" stroke-width="2" '
                   f'stroke-dasharray="6,4"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
