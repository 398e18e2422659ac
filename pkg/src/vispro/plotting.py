"""Minimal SVG line plots with the plotted data embedded as comments.

Each series becomes exactly one ``<polyline>``; a band is drawn as a closed
polyline (upper edge then lower edge reversed). :func:`read_series` parses
the data comments back, so tests can check plots structurally.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
MARGIN = 50
COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


@dataclass(frozen=True)
class Series:
    name: str
    x: np.ndarray
    y: np.ndarray
    style: str = "line"  # line | points | band
    lower: np.ndarray | None = None  # band only; y is the upper edge


def _fmt(v: float) -> str:
    return f"{v:.6g}"


def _data_comment(s: Series) -> str:
    cols = [s.x, s.y] if s.lower is None else [s.x, s.y, s.lower]
    rows = ";".join(",".join(_fmt(c[i]) for c in cols) for i in range(len(s.x)))
    return f"<!-- series name={s.name} style={s.style} data={rows} -->"


def render_svg(series: list[Series], title: str = "", xlabel: str = "", ylabel: str = "") -> str:
    xs = np.concatenate([np.asarray(s.x, float) for s in series]) if series else np.zeros(1)
    ys = [np.asarray(s.y, float) for s in series] + [np.asarray(s.lower, float) for s in series if s.lower is not None]
    ys = np.concatenate(ys) if ys else np.zeros(1)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(min(ys.min(), 0.0)), float(ys.max())
    x1 = x1 if x1 > x0 else x0 + 1.0
    y1 = y1 if y1 > y0 else y0 + 1.0

    def px(x):
        return MARGIN + (np.asarray(x, float) - x0) / (x1 - x0) * (WIDTH - 2 * MARGIN)

    def py(y):
        return HEIGHT - MARGIN - (np.asarray(y, float) - y0) / (y1 - y0) * (HEIGHT - 2 * MARGIN)

    def points(xv, yv):
        return " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px(xv), py(yv)))

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<rect x="{MARGIN}" y="{MARGIN}" width="{WIDTH - 2 * MARGIN}" height="{HEIGHT - 2 * MARGIN}" '
        'fill="none" stroke="#444"/>',
        f'<text x="{WIDTH / 2}" y="25" text-anchor="middle" font-size="14">{escape(title)}</text>',
        f'<text x="{WIDTH / 2}" y="{HEIGHT - 12}" text-anchor="middle" font-size="12">{escape(xlabel)} '
        f"[{_fmt(x0)}, {_fmt(x1)}]</text>",
        f'<text x="14" y="{HEIGHT / 2}" font-size="12" transform="rotate(-90 14 {HEIGHT / 2})" '
        f'text-anchor="middle">{escape(ylabel)} [{_fmt(y0)}, {_fmt(y1)}]</text>',
    ]
    for i, s in enumerate(series):
        color = COLORS[i % len(COLORS)]
        out.append(_data_comment(s))
        label = escape(s.name)
        if s.style == "band":
            xv = np.concatenate([s.x, s.x[::-1]])
            yv = np.concatenate([s.y, np.asarray(s.lower)[::-1]])
            out.append(f'<polyline data-series="{label}" points="{points(xv, yv)}" fill="{color}" '
                       'fill-opacity="0.2" stroke="none"/>')
        elif s.style == "points":
            out.append(f'<polyline data-series="{label}" points="{points(s.x, s.y)}" fill="none" stroke="none"/>')
            out += [f'<circle cx="{a:.2f}" cy="{b:.2f}" r="1.5" fill="{color}"/>' for a, b in zip(px(s.x), py(s.y))]
        else:
            out.append(f'<polyline data-series="{label}" points="{points(s.x, s.y)}" fill="none" '
                       f'stroke="{color}" stroke-width="1.5"/>')
        out.append(f'<text x="{WIDTH - MARGIN - 4}" y="{MARGIN + 16 + 14 * i}" text-anchor="end" font-size="11" '
                   f'fill="{color}">{label}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


_COMMENT = re.compile(r"<!-- series name=(\S+) style=(\S+) data=([^ ]*) -->")


def read_series(svg_text: str) -> dict[str, np.ndarray]:
    """Series name -> array of rows (x, y[, lower]) parsed from data comments."""
    out = {}
    for name, _style, data in _COMMENT.findall(svg_text):
        rows = [[float(v) for v in row.split(",")] for row in data.split(";") if row]
        out[name] = np.array(rows)
    return out
