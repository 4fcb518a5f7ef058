"""CSV and SVG report writers shared by the theory and benchmark tools.

CSV files start with one ``#`` comment line naming the schema version, the
report kind and what the metric columns mean, followed by a header row.
"""
from __future__ import annotations

import csv
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from xml.sax.saxutils import escape

from maskdiff.errors import InvalidArgument

CSV_SCHEMA = "maskdiff-csv/1"


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse(s: str):
    if s in ("true", "false"):
        return s == "true"
    for kind in (int, float):
        try:
            return kind(s)
        except ValueError:
            pass
    return s


def emit_csv(rows: list[dict], path, kind: str, note: str = "", columns: list[str] | None = None) -> Path:
    """Write ``rows`` with a fixed column order; refuses to create empty files."""
    if not rows:
        raise InvalidArgument("no rows to write")
    columns = list(columns or rows[0].keys())
    for r in rows:
        if set(r) != set(columns):
            raise InvalidArgument(f"row keys {sorted(r)} differ from columns {columns}")
    buf = io.StringIO()
    buf.write(f"# {CSV_SCHEMA} kind={kind}" + (f"; {note}" if note else "") + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in columns])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def parse_csv(path) -> tuple[list[dict], dict]:
    """Inverse of :func:`emit_csv`. Returns ``(rows, header_info)``."""
    lines = Path(path).read_text().splitlines()
    info = {}
    body = []
    for line in lines:
        if line.startswith("#"):
            head = line[1:].strip()
            first, _, note = head.partition(";")
            parts = first.split()
            info["schema"] = parts[0] if parts else ""
            for p in parts[1:]:
                k, _, v = p.partition("=")
                info[k] = v
            info["note"] = note.strip()
        else:
            body.append(line)
    if info.get("schema") != CSV_SCHEMA:
        raise InvalidArgument(f"{path}: unsupported CSV schema {info.get('schema')!r}")
    reader = csv.reader(body)
    columns = next(reader)
    rows = [{c: _parse(v) for c, v in zip(columns, rec)} for rec in reader]
    return rows, info


# --- SVG ---------------------------------------------------------------------

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf")


@dataclass
class Axes:
    x_label: str
    y_label: str
    title: str = ""
    log_x: bool = False
    width: int = 640
    height: int = 400
    margin: dict = field(default_factory=lambda: {"l": 70, "r": 150, "t": 40, "b": 55})


def _ticks(lo, hi, n=5):
    if hi <= lo:
        return [lo]
    step = 10 ** math.floor(math.log10((hi - lo) / n))
    for mult in (1, 2, 5, 10):
        if (hi - lo) / (step * mult) <= n:
            step *= mult
            break
    start = math.ceil(lo / step) * step
    out, v = [], start
    while v <= hi + 1e-12 * abs(hi):
        out.append(round(v, 12))
        v += step
    return out


def emit_svg_plot(series: dict[str, list[tuple[float, float]]], axes: Axes, path) -> Path:
    """One polyline per series with axes, ticks and a legend."""
    pts = [(x, y) for s in series.values() for x, y in s if math.isfinite(y)]
    if not pts:
        raise InvalidArgument("nothing to plot")
    tx = (lambda x: math.log2(x)) if axes.log_x else (lambda x: x)
    if axes.log_x and any(x <= 0 for x, _ in pts):
        raise InvalidArgument("log x axis needs positive x values")
    xs = [tx(x) for x, _ in pts]
    ys = [y for _, y in pts]
    x0, x1 = min(xs), max(xs)
    y0, y1 = min(ys), max(ys)
    if x1 == x0:
        x0, x1 = x0 - 1, x1 + 1
    if y1 == y0:
        y0, y1 = y0 - 1, y1 + 1
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    m = axes.margin
    pw, ph = axes.width - m["l"] - m["r"], axes.height - m["t"] - m["b"]

    def px(x):
        return m["l"] + (tx(x) - x0) / (x1 - x0) * pw

    def py(y):
        return m["t"] + (1 - (y - y0) / (y1 - y0)) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{axes.width}" height="{axes.height}" '
           f'viewBox="0 0 {axes.width} {axes.height}" font-family="sans-serif" font-size="12">',
           f'<rect x="0" y="0" width="{axes.width}" height="{axes.height}" fill="white"/>']
    if axes.title:
        out.append(f'<text x="{m["l"] + pw / 2:.1f}" y="{m["t"] / 2 + 5:.1f}" text-anchor="middle" '
                   f'font-size="14">{escape(axes.title)}</text>')
    bx, by = m["l"], m["t"] + ph
    out.append(f'<line x1="{bx}" y1="{by}" x2="{bx + pw}" y2="{by}" stroke="black"/>')
    out.append(f'<line x1="{bx}" y1="{m["t"]}" x2="{bx}" y2="{by}" stroke="black"/>')
    xticks = sorted({x for x, _ in pts}) if axes.log_x else _ticks(x0, x1)
    for xv in xticks:
        X = px(xv)
        out.append(f'<line x1="{X:.1f}" y1="{by}" x2="{X:.1f}" y2="{by + 5}" stroke="black"/>')
        out.append(f'<text x="{X:.1f}" y="{by + 18}" text-anchor="middle">{escape(f"{xv:g}")}</text>')
    for yv in _ticks(y0, y1):
        Y = py(yv)
        out.append(f'<line x1="{bx - 5}" y1="{Y:.1f}" x2="{bx}" y2="{Y:.1f}" stroke="black"/>')
        out.append(f'<text x="{bx - 8}" y="{Y + 4:.1f}" text-anchor="end">{escape(f"{yv:g}")}</text>')
    out.append(f'<text x="{bx + pw / 2:.1f}" y="{axes.height - 12}" text-anchor="middle">'
               f'{escape(axes.x_label)}</text>')
    out.append(f'<text x="16" y="{m["t"] + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {m["t"] + ph / 2:.1f})">{escape(axes.y_label)}</text>')
    for k, (name, s) in enumerate(series.items()):
        color = PALETTE[k % len(PALETTE)]
        coords = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in s if math.isfinite(y))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{coords}"/>')
        for x, y in s:
            if math.isfinite(y):
                out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="{color}"/>')
        ly = m["t"] + 10 + 18 * k
        lx = m["l"] + pw + 15
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{lx + 25}" y="{ly + 4}">{escape(name)}</text>')
    out.append("</svg>")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text("\n".join(out) + "\n")
    os.replace(tmp, path)
    return path
