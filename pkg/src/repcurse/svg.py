"""Self-contained SVG line charts (no external assets, deterministic output)."""

from __future__ import annotations

import math
from typing import Sequence

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")

WIDTH, HEIGHT = 720, 440
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 50, 60


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;").replace('"', "&quot;")


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    if v == int(v) and abs(v) < 1e6:
        return str(int(v))
    return f"{v:.3g}"


def line_chart(
    series: Sequence[tuple[str, Sequence[tuple[float, float]]]],
    title: str,
    x_label: str,
    y_label: str,
    log_x: bool = False,
) -> str:
    """One ``<path class="series">`` per series; points with a ``None`` y are skipped."""
    pts_all = [(x, y) for _, pts in series for x, y in pts if y is not None]
    if not pts_all:
        raise ValueError("nothing to plot")
    tx = (lambda x: math.log2(x)) if log_x else (lambda x: float(x))
    xs = [tx(x) for x, _ in pts_all]
    ys = [float(y) for _, y in pts_all]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(0.0, min(ys)), max(ys)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y1 = y0 + 1.0
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def px(x: float) -> float:
        return LEFT + (tx(x) - x0) / (x1 - x0) * pw

    def py(y: float) -> float:
        return TOP + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>',
        f'<text class="title" x="{WIDTH / 2:.1f}" y="28" text-anchor="middle" font-family="sans-serif" font-size="16">{_esc(title)}</text>',
        f'<line class="axis x-axis" x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="#000"/>',
        f'<line class="axis y-axis" x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="#000"/>',
    ]
    for i in range(5):
        yv = y0 + (y1 - y0) * i / 4
        out.append(
            f'<text class="tick" x="{LEFT - 6}" y="{_fmt(py(yv) + 4)}" text-anchor="end" '
            f'font-family="sans-serif" font-size="11">{_esc(_tick_label(round(yv, 3)))}</text>'
        )
    xticks = sorted({x for x, _ in pts_all})
    if len(xticks) > 10:
        stride = math.ceil(len(xticks) / 10)
        xticks = xticks[::stride]
    for xv in xticks:
        out.append(
            f'<text class="tick" x="{_fmt(px(xv))}" y="{TOP + ph + 16}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="11">{_esc(_tick_label(xv))}</text>'
        )
    out.append(
        f'<text class="axis-label x-label" x="{LEFT + pw / 2:.1f}" y="{HEIGHT - 16}" text-anchor="middle" '
        f'font-family="sans-serif" font-size="13">{_esc(x_label)}</text>'
    )
    cy = TOP + ph / 2
    out.append(
        f'<text class="axis-label y-label" x="18" y="{cy:.1f}" text-anchor="middle" font-family="sans-serif" '
        f'font-size="13" transform="rotate(-90 18 {cy:.1f})">{_esc(y_label)}</text>'
    )
    for i, (label, pts) in enumerate(series):
        color = COLORS[i % len(COLORS)]
        good = sorted((x, y) for x, y in pts if y is not None)
        d = " ".join(f"{'M' if j == 0 else 'L'}{_fmt(px(x))},{_fmt(py(y))}" for j, (x, y) in enumerate(good))
        out.append(f'<path class="series" data-label="{_esc(label)}" d="{d}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = TOP + 16 + 20 * i
        lx = WIDTH - RIGHT + 14
        out.append(f'<line class="legend" x1="{lx}" y1="{ly}" x2="{lx + 22}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(
            f'<text class="legend" x="{lx + 28}" y="{ly + 4}" font-family="sans-serif" font-size="12">{_esc(label)}</text>'
        )
    out.append("</svg>")
    return "\n".join(out) + "\n"
