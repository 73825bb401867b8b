"""Deterministic CSV/JSON/SVG writers.

Output must be byte-identical across reruns, so floats are written with
``repr`` (shortest round-trip form), JSON keys are sorted, and the SVG
plots are assembled by hand with fixed-precision coordinates.
"""

import csv
import json
import math
from pathlib import Path

import numpy as np

COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e")


def fmt(x):
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return "NA" if math.isnan(x) else repr(float(x))
    return str(x)


def write_table(path, header, rows, config_hash=None):
    """CSV with an optional ``# config_sha256=...`` comment line before the header."""
    with open(path, "w", newline="") as fh:
        if config_hash:
            fh.write(f"# config_sha256={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])


def read_table(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    return rows[0], rows[1:]


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        return None if math.isnan(obj) else float(obj)
    return obj


def write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


# SVG

W, H = 480, 320
LEFT, RIGHT, TOP, BOTTOM = 64, 16, 32, 48


def _scale(lo, hi, a, b):
    if hi == lo:
        hi = lo + 1.0
    return lambda v: a + (v - lo) * (b - a) / (hi - lo)


def _tick(v):
    return f"{v:.3g}"


def _frame(title, xlabel, ylabel, xlim, ylim):
    sx = _scale(*xlim, LEFT, W - RIGHT)
    sy = _scale(*ylim, H - BOTTOM, TOP)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
        f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
        f'<rect width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="13">{_esc(title)}</text>',
        f'<line x1="{LEFT}" y1="{H - BOTTOM}" x2="{W - RIGHT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{H - BOTTOM}" stroke="black"/>',
        f'<text x="{(LEFT + W - RIGHT) / 2:.1f}" y="{H - 10}" text-anchor="middle">{_esc(xlabel)}</text>',
        f'<text x="14" y="{(TOP + H - BOTTOM) / 2:.1f}" text-anchor="middle" '
        f'transform="rotate(-90 14 {(TOP + H - BOTTOM) / 2:.1f})">{_esc(ylabel)}</text>',
    ]
    for v in np.linspace(*xlim, 5):
        parts.append(
            f'<text x="{sx(v):.2f}" y="{H - BOTTOM + 14}" text-anchor="middle">{_tick(v)}</text>'
        )
    for v in np.linspace(*ylim, 5):
        parts.append(
            f'<text x="{LEFT - 4}" y="{sy(v) + 4:.2f}" text-anchor="end">{_tick(v)}</text>'
        )
    return parts, sx, sy


def _esc(s):
    return str(s).replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def _limits(values, pad=0.05):
    values = np.asarray([v for v in np.ravel(values) if np.isfinite(v)], dtype=np.float64)
    lo, hi = float(values.min()), float(values.max())
    span = hi - lo or 1.0
    return lo - pad * span, hi + pad * span


def _save(path, parts):
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")


def line_plot(path, x, series, title="", xlabel="", ylabel="", dashed=()):
    """``series`` maps legend label to y values; labels in ``dashed`` are drawn dashed."""
    x = np.asarray(x, dtype=np.float64)
    ylim = _limits(np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()]))
    parts, sx, sy = _frame(title, xlabel, ylabel, _limits(x, 0.02), ylim)
    for n, (label, y) in enumerate(series.items()):
        color = COLORS[n % len(COLORS)]
        pts = " ".join(f"{sx(a):.2f},{sy(b):.2f}" for a, b in zip(x, y))
        dash = ' stroke-dasharray="5,4"' if label in dashed else ""
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>')
        for a, b in zip(x, y):
            parts.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.5" fill="{color}"/>')
        parts.append(
            f'<text x="{W - RIGHT - 4}" y="{TOP + 14 * (n + 1)}" text-anchor="end" fill="{color}">{_esc(label)}</text>'
        )
    _save(path, parts)


def scatter_plot(path, x, y, title="", xlabel="", ylabel="", fit=True):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    parts, sx, sy = _frame(title, xlabel, ylabel, _limits(x), _limits(y))
    for a, b in zip(x, y):
        parts.append(f'<circle cx="{sx(a):.2f}" cy="{sy(b):.2f}" r="2.2" fill="{COLORS[0]}" fill-opacity="0.6"/>')
    if fit and np.ptp(x) > 0:
        slope, icpt = np.polyfit(x, y, 1)
        x0, x1 = float(x.min()), float(x.max())
        parts.append(
            f'<line x1="{sx(x0):.2f}" y1="{sy(slope * x0 + icpt):.2f}" x2="{sx(x1):.2f}" '
            f'y2="{sy(slope * x1 + icpt):.2f}" stroke="{COLORS[1]}" stroke-dasharray="5,4"/>'
        )
    _save(path, parts)


def bar_plot(path, edges, counts, title="", xlabel="", ylabel="count", marker=None, overlay=None):
    """Histogram bars; ``overlay`` is a second count series drawn outlined,
    ``marker`` a vertical threshold line."""
    edges = np.asarray(edges, dtype=np.float64)
    series = [np.asarray(counts, dtype=np.float64)]
    if overlay is not None:
        series.append(np.asarray(overlay, dtype=np.float64))
    top = max(float(s.max()) for s in series) or 1.0
    parts, sx, sy = _frame(title, xlabel, ylabel, _limits(edges, 0.02), (0.0, top * 1.05))
    for n, cnt in enumerate(series):
        color = COLORS[n]
        for lo, hi, c in zip(edges[:-1], edges[1:], cnt):
            x0, x1 = sx(lo), sx(hi)
            style = f'fill="{color}" fill-opacity="0.5"' if n == 0 else f'fill="none" stroke="{color}"'
            parts.append(
                f'<rect x="{x0:.2f}" y="{sy(c):.2f}" width="{max(x1 - x0, 0.5):.2f}" '
                f'height="{sy(0.0) - sy(c):.2f}" {style}/>'
            )
    if marker is not None and np.isfinite(marker):
        parts.append(
            f'<line x1="{sx(marker):.2f}" y1="{TOP}" x2="{sx(marker):.2f}" y2="{H - BOTTOM}" '
            f'stroke="black" stroke-dasharray="4,3"/>'
        )
    _save(path, parts)
