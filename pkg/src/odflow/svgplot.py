"""Tiny deterministic SVG line plots; no plotting dependency, identical
bytes for identical inputs."""

import math

WIDTH, HEIGHT = 640, 400
MARGIN = 50
PALETTE = ["#2a9d3f", "#d62828", "#1f5fd6", "#7a1fa2", "#e08f00"]


def _scale(values, lo, hi, out_lo, out_hi, log):
    if log:
        lo = math.log10(max(lo, 1e-12))
        hi = math.log10(max(hi, 1e-12))
    span = (hi - lo) or 1.0

    def f(v):
        if log:
            v = math.log10(max(v, 1e-12))
        return out_lo + (v - lo) / span * (out_hi - out_lo)

    return f


def line_plot(series, path, title="", x_label="", y_label="", log_y=False):
    """series: list of (name, xs, ys).  Writes a standalone SVG."""
    xs_all = [x for _, xs, _ in series for x in xs]
    ys_all = [y for _, _, ys in series for y in ys if not log_y or y > 0]
    if not xs_all or not ys_all:
        raise ValueError("nothing to plot")
    fx = _scale(xs_all, min(xs_all), max(xs_all), MARGIN, WIDTH - MARGIN, False)
    fy = _scale(ys_all, min(ys_all), max(ys_all), HEIGHT - MARGIN, MARGIN, log_y)
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" '
             f'height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">',
             f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
             f'<text x="{WIDTH // 2}" y="24" text-anchor="middle" '
             f'font-family="sans-serif" font-size="15">{title}</text>',
             f'<line x1="{MARGIN}" y1="{HEIGHT - MARGIN}" x2="{WIDTH - MARGIN}" '
             f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
             f'<line x1="{MARGIN}" y1="{MARGIN}" x2="{MARGIN}" '
             f'y2="{HEIGHT - MARGIN}" stroke="black"/>',
             f'<text x="{WIDTH // 2}" y="{HEIGHT - 12}" text-anchor="middle" '
             f'font-family="sans-serif" font-size="12">{x_label}</text>',
             f'<text x="16" y="{HEIGHT // 2}" text-anchor="middle" '
             f'font-family="sans-serif" font-size="12" '
             f'transform="rotate(-90 16 {HEIGHT // 2})">{y_label}'
             f'{" (log scale)" if log_y else ""}</text>']
    for k, (name, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(f"{fx(x):.2f},{fy(y):.2f}" for x, y in zip(xs, ys)
                       if not log_y or y > 0)
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(f'<text x="{WIDTH - MARGIN + 4}" y="{MARGIN + 16 * k}" '
                     f'font-family="sans-serif" font-size="11" '
                     f'fill="{color}">{name}</text>')
    parts.append("</svg>\n")
    with open(path, "w") as f:
        f.write("\n".join(parts))
