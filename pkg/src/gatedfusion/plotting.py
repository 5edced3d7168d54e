"""Dependency-free SVG rendering of the train/val loss curve."""

from __future__ import annotations

from xml.sax.saxutils import escape

WIDTH, HEIGHT = 640, 400
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 70, 20, 30, 50
COLORS = {"train": "#1f77b4", "val": "#d62728"}


def _ticks(lo, hi, n=5):
    if hi == lo:
        return [lo]
    return [lo + (hi - lo) * i / (n - 1) for i in range(n)]


def loss_curve_svg(history, title: str = "Training loss") -> str:
    """Epoch vs mean loss, one polyline per split present in ``history``."""
    series = {s: history.epoch_means(s) for s in ("train", "val")}
    series = {s: pts for s, pts in series.items() if pts}
    points = [(e, v) for pts in series.values() for e, v in pts.items()]

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2}" y="18" text-anchor="middle" font-size="14">{escape(title)}</text>',
    ]
    x0, x1 = MARGIN_L, WIDTH - MARGIN_R
    y0, y1 = HEIGHT - MARGIN_B, MARGIN_T
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    out.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    out.append(f'<text x="{(x0 + x1) / 2}" y="{HEIGHT - 12}" text-anchor="middle">Epoch</text>')
    out.append(
        f'<text x="16" y="{(y0 + y1) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(y0 + y1) / 2})">Loss value</text>'
    )

    if points:
        e_lo, e_hi = min(p[0] for p in points), max(p[0] for p in points)
        l_lo, l_hi = 0.0, max(p[1] for p in points)
        e_span = (e_hi - e_lo) or 1
        l_span = (l_hi - l_lo) or 1.0

        def sx(e):
            return x0 + (e - e_lo) / e_span * (x1 - x0)

        def sy(v):
            return y0 - (v - l_lo) / l_span * (y0 - y1)

        for e in _ticks(e_lo, e_hi):
            out.append(f'<text x="{sx(e):.1f}" y="{y0 + 16}" text-anchor="middle">{e:.0f}</text>')
        for v in _ticks(l_lo, l_hi):
            out.append(f'<text x="{x0 - 6}" y="{sy(v) + 4:.1f}" text-anchor="end">{v:.2f}</text>')
        for k, (split, pts) in enumerate(series.items()):
            coords = " ".join(f"{sx(e):.2f},{sy(v):.2f}" for e, v in sorted(pts.items()))
            out.append(
                f'<polyline fill="none" stroke="{COLORS[split]}" stroke-width="1.5" '
                f'points="{coords}" data-split="{split}"/>'
            )
            out.append(
                f'<text x="{x1 - 60}" y="{y1 + 16 * (k + 1)}" fill="{COLORS[split]}">{split}</text>'
            )
    out.append("</svg>")
    return "\n".join(out) + "\n"
