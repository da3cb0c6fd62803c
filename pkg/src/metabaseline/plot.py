"""Dependency-free SVG line plots of base vs novel generalization curves.

Output is a pure function of the input: fixed number formatting and no
timestamps, so identical curves give identical files.
"""

from __future__ import annotations

from pathlib import Path

from .evaluation import GeneralizationCurve

WIDTH, HEIGHT = 640, 400
MARGIN = 56
COLORS = {"base": "#1f77b4", "novel": "#d62728"}


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    step = (hi - lo) / (n - 1)
    return [lo + i * step for i in range(n)]


def curve_svg(curve: GeneralizationCurve, title: str = "") -> str:
    epochs = curve.epochs
    series = {"base": list(curve.base), "novel": list(curve.novel)}
    ys = series["base"] + series["novel"]
    lo, hi = min(ys), max(ys)
    pad = max(0.5, 0.05 * (hi - lo))
    lo, hi = lo - pad, hi + pad
    x0, x1 = min(epochs), max(epochs)
    span = (x1 - x0) or 1

    def px(e):
        return MARGIN + (e - x0) / span * (WIDTH - 2 * MARGIN)

    def py(v):
        return HEIGHT - MARGIN - (v - lo) / (hi - lo) * (HEIGHT - 2 * MARGIN)

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
           f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>']
    if title:
        out.append(f'<text x="{WIDTH / 2:.1f}" y="20" text-anchor="middle" font-size="14">{_esc(title)}</text>')
    out.append(f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>')
    out.append(f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" y2="{HEIGHT - MARGIN}" stroke="black"/>')
    for v in _ticks(lo, hi):
        y = py(v)
        out.append(f'<line x1="{MARGIN - 4}" y1="{y:.1f}" x2="{MARGIN}" y2="{y:.1f}" stroke="black"/>')
        out.append(f'<text x="{MARGIN - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.1f}</text>')
    step = max(1, len(epochs) // 10)
    for e in epochs[::step]:
        x = px(e)
        out.append(f'<line x1="{x:.1f}" y1="{HEIGHT - MARGIN}" x2="{x:.1f}" y2="{HEIGHT - MARGIN + 4}" stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{HEIGHT - MARGIN + 18}" text-anchor="middle">{e}</text>')
    out.append(f'<text x="{WIDTH / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">epoch</text>')
    out.append(f'<text x="16" y="{HEIGHT / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {HEIGHT / 2:.1f})">5-way accuracy (%)</text>')
    for i, (name, vals) in enumerate(series.items()):
        pts = " ".join(f"{px(e):.1f},{py(v):.1f}" for e, v in zip(epochs, vals))
        out.append(f'<polyline fill="none" stroke="{COLORS[name]}" stroke-width="2" points="{pts}"/>')
        ly = MARGIN + 16 * i
        out.append(f'<line x1="{WIDTH - MARGIN - 110}" y1="{ly}" x2="{WIDTH - MARGIN - 90}" y2="{ly}" '
                   f'stroke="{COLORS[name]}" stroke-width="2"/>')
        out.append(f'<text x="{WIDTH - MARGIN - 84}" y="{ly + 4}">{name} classes</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def save_curve_svg(curve: GeneralizationCurve, path, title: str = "") -> None:
    Path(path).write_text(curve_svg(curve, title))
