"""Static SVG rendering of loss curves and gap traces from run CSVs."""
from __future__ import annotations

import csv
import math
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

WIDTH, HEIGHT = 720, 420
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 80, 170, 30, 50
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
           "#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


class EmptyLogSet(ValueError):
    pass


def read_series(paths: Sequence, kind: str = "loss") -> list[tuple[str, list[float], list[float]]]:
    """``(label, xs, ys)`` per run found in the CSVs.

    ``kind="loss"`` plots loss against epoch; ``kind="gap"`` plots the gap
    column against step, skipping rows without a gap.
    """
    if kind not in ("loss", "gap"):
        raise ValueError("kind must be 'loss' or 'gap'")
    series: dict[str, tuple[str, list, list]] = {}
    for path in paths:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                key = row["run_id"]
                if kind == "loss":
                    x, y = row["epoch"], row["loss"]
                else:
                    x, y = row["step"], row["gap"]
                if y == "":
                    continue
                label, xs, ys = series.setdefault(key, (row["method"], [], []))
                xs.append(float(x))
                ys.append(float(y))
    labels = [s[0] for s in series.values()]
    out = []
    for key, (label, xs, ys) in series.items():
        if labels.count(label) > 1:
            label = key
        out.append((label, xs, ys))
    return out


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _tick_label(v: float) -> str:
    return f"{v:.3g}"


def render_plot(paths: Sequence, output, kind: str = "loss") -> str:
    """Write an SVG with one polyline per run; log-scale y for losses, linear for gaps."""
    series = [s for s in read_series(paths, kind) if s[1]]
    if not series:
        raise EmptyLogSet("no plottable rows in the given logs")
    log_y = kind == "loss"
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys]
    if log_y:
        positive = [y for y in ys_all if y > 0]
        floor = min(positive) if positive else 1e-300
        tr = lambda y: math.log10(max(y, floor))
    else:
        tr = lambda y: y
    ty = [tr(y) for y in ys_all]
    x0, x1 = min(xs_all), max(xs_all)
    y0, y1 = min(ty), max(ty)
    if not log_y:
        y1 = max(y1, 0.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pw, ph = WIDTH - MARGIN_L - MARGIN_R, HEIGHT - MARGIN_T - MARGIN_B
    px = lambda x: MARGIN_L + (x - x0) / (x1 - x0) * pw
    py = lambda v: MARGIN_T + (y1 - v) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<g stroke="black" fill="none"><rect x="{MARGIN_L}" y="{MARGIN_T}" width="{pw}" height="{ph}"/></g>',
    ]
    for k in range(5):
        v = y0 + (y1 - y0) * k / 4
        label = _tick_label(10 ** v) if log_y else _tick_label(v)
        parts.append(f'<text x="{MARGIN_L - 6}" y="{_fmt(py(v) + 4)}" text-anchor="end">{label}</text>')
        xv = x0 + (x1 - x0) * k / 4
        parts.append(f'<text x="{_fmt(px(xv))}" y="{HEIGHT - MARGIN_B + 16}" text-anchor="middle">{_tick_label(xv)}</text>')
    xlabel = "epoch" if kind == "loss" else "step"
    ylabel = "training loss (log scale)" if log_y else "gap E(beta) - E(0)"
    parts.append(f'<text x="{MARGIN_L + pw / 2:.2f}" y="{HEIGHT - 12}" text-anchor="middle">{xlabel}</text>')
    parts.append(f'<text x="16" y="{MARGIN_T + ph / 2:.2f}" text-anchor="middle" '
                 f'transform="rotate(-90 16 {MARGIN_T + ph / 2:.2f})">{ylabel}</text>')
    if not log_y and y0 < 0.0 <= y1:
        parts.append(f'<line x1="{MARGIN_L}" x2="{MARGIN_L + pw}" y1="{_fmt(py(0.0))}" y2="{_fmt(py(0.0))}" '
                     f'stroke="#999" stroke-dasharray="4 3"/>')
    for n, (label, xs, ys) in enumerate(series):
        color = PALETTE[n % len(PALETTE)]
        pts = " ".join(f"{_fmt(px(x))},{_fmt(py(tr(y)))}" for x, y in zip(xs, ys))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}">'
                     f'<title>{escape(label)}</title></polyline>')
        ly = MARGIN_T + 14 + 16 * n
        lx = WIDTH - MARGIN_R + 12
        parts.append(f'<line x1="{lx}" x2="{lx + 20}" y1="{ly - 4}" y2="{ly - 4}" stroke="{color}" stroke-width="2"/>')
        parts.append(f'<text x="{lx + 26}" y="{ly}">{escape(label)}</text>')
    parts.append("</svg>")
    svg = "\n".join(parts) + "\n"
    Path(output).parent.mkdir(parents=True, exist_ok=True)
    Path(output).write_text(svg)
    return svg
