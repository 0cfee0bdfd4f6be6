"""Minimal hand-written SVG: side-by-side scatter and segment panels.

Each panel is a ``<g>`` whose transform maps data coordinates to pixels, so
every ``circle``/``line`` carries raw data coordinates (``repr`` formatted,
hence exactly recoverable).
"""

from html import escape

import numpy as np

PANEL = 320
MARGIN = 24
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _num(v):
    return repr(float(v))


def _bounds(panels):
    pts = []
    for panel in panels:
        for layer in panel["layers"]:
            pts.append(np.asarray(layer["points"]).reshape(-1, 2))
    allp = np.concatenate(pts) if pts else np.zeros((1, 2))
    lo, hi = allp.min(axis=0), allp.max(axis=0)
    span = float(max(hi[0] - lo[0], hi[1] - lo[1], 1e-9))
    centre = (lo + hi) / 2.0
    half = 0.55 * span
    return centre - half, centre + half


def render_panels(panels, title=""):
    """SVG text for a row of panels.

    ``panels`` is a list of ``{"title": str, "layers": [...]}``; a layer is
    ``{"kind": "points", "points": (n, 2), "color": str}`` or
    ``{"kind": "segments", "points": (n, 2, 2), "color": str}``.
    """
    lo, hi = _bounds(panels)
    scale = (PANEL - 2 * MARGIN) / float(hi[0] - lo[0])
    width = PANEL * max(len(panels), 1)
    height = PANEL + 28
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        f'<title>{escape(title)}</title>',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    for p, panel in enumerate(panels):
        x_off = p * PANEL
        out.append(
            f'<text x="{x_off + PANEL / 2}" y="18" text-anchor="middle" font-family="sans-serif" '
            f'font-size="13">{escape(panel["title"])}</text>'
        )
        out.append(
            f'<rect x="{x_off + MARGIN}" y="{28 + MARGIN}" width="{PANEL - 2 * MARGIN}" '
            f'height="{PANEL - 2 * MARGIN}" fill="none" stroke="#999"/>'
        )
        # data (x, y) -> pixel (x_off + MARGIN + s (x - lo_x), 28 + MARGIN + s (hi_y - y))
        out.append(
            f'<g class="panel" data-index="{p}" transform="translate({_num(x_off + MARGIN)},'
            f'{_num(28 + MARGIN + scale * (hi[1] - lo[1]))}) scale({_num(scale)},{_num(-scale)}) '
            f'translate({_num(-lo[0])},{_num(-lo[1])})">'
        )
        for layer in panel["layers"]:
            color = layer.get("color", PALETTE[0])
            pts = np.asarray(layer["points"], dtype=np.float64)
            if layer["kind"] == "points":
                r = _num(2.0 / scale)
                out.append(f'<g class="points" fill="{color}" fill-opacity="0.5">')
                out.extend(f'<circle cx="{_num(x)}" cy="{_num(y)}" r="{r}"/>' for x, y in pts)
            elif layer["kind"] == "segments":
                out.append(
                    f'<g class="segments" stroke="{color}" stroke-opacity="0.4" '
                    f'stroke-width="1" vector-effect="non-scaling-stroke">'
                )
                out.extend(
                    f'<line x1="{_num(a[0])}" y1="{_num(a[1])}" x2="{_num(b[0])}" y2="{_num(b[1])}" '
                    f'vector-effect="non-scaling-stroke"/>'
                    for a, b in pts
                )
            else:
                raise ValueError(f"unknown layer kind {layer['kind']!r}")
            out.append("</g>")
        out.append("</g>")
    out.append("</svg>")
    return "\n".join(out) + "\n"
