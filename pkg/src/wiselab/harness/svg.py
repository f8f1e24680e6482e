"""Hand-written SVG scatter plots on logit-scaled accuracy axes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence
from xml.sax.saxutils import escape

from ..errors import RenderError
from ..metrics import RobustnessFit, logit, sigmoid

TICKS = (0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.98, 0.99)
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


@dataclass(frozen=True)
class ScatterPoint:
    label: str
    x: float
    y: float
    x_ci: tuple[float, float] | None = None
    y_ci: tuple[float, float] | None = None


@dataclass(frozen=True)
class LogitAxis:
    """Maps probability p to pixel ``origin + sign * scale * (logit(p) - lo)``."""

    lo: float
    hi: float
    scale: float
    origin: float
    sign: int = 1

    @classmethod
    def fit(cls, probs: Sequence[float], length: float, origin: float, sign: int = 1) -> "LogitAxis":
        ts = [logit(min(max(p, 1e-4), 1 - 1e-4)) for p in probs]
        lo, hi = min(ts), max(ts)
        pad = max(0.15 * (hi - lo), 0.2)
        lo, hi = lo - pad, hi + pad
        return cls(lo, hi, length / (hi - lo), origin, sign)

    def pos(self, p: float) -> float:
        return self.origin + self.sign * self.scale * (logit(min(max(p, 1e-9), 1 - 1e-9)) - self.lo)

    def ticks(self) -> list[float]:
        return [p for p in TICKS if self.lo <= logit(p) <= self.hi]


def _f(v: float) -> str:
    return f"{v:.2f}"


def render_scatter_svg(
    points: Sequence[ScatterPoint],
    fit: RobustnessFit | None = None,
    curve: Sequence[tuple[float, float, float]] | None = None,
    title: str = "",
    x_label: str = "reference accuracy",
    y_label: str = "shift accuracy",
    width: int = 640,
    height: int = 480,
) -> str:
    """Scatter of (reference, shift) accuracies with a baseline line and an alpha curve.

    ``curve`` holds ``(alpha, acc_ref, acc_shift)`` triples drawn as connected
    markers.  Output depends only on the inputs.
    """
    if not points:
        raise RenderError("no points to plot")
    curve = list(curve or [])
    margin_l, margin_r, margin_t, margin_b = 70, 20, 40, 60
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b
    xs = [p.x for p in points] + [c[1] for c in curve]
    ys = [p.y for p in points] + [c[2] for c in curve]
    for p in points:
        xs.extend(p.x_ci or ())
        ys.extend(p.y_ci or ())
    xa = LogitAxis.fit(xs, plot_w, margin_l, 1)
    ya = LogitAxis.fit(ys, plot_h, margin_t + plot_h, -1)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">',
        f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{width / 2:.2f}" y="22" text-anchor="middle" font-size="14">{escape(title)}</text>')
    x0, x1 = margin_l, margin_l + plot_w
    y0, y1 = margin_t + plot_h, margin_t
    out.append(f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
    out.append(f'<line class="axis" x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
    for p in xa.ticks():
        x = xa.pos(p)
        out.append(f'<line class="xtick" x1="{_f(x)}" y1="{y0}" x2="{_f(x)}" y2="{y0 + 5}" stroke="black"/>')
        out.append(f'<line x1="{_f(x)}" y1="{y0}" x2="{_f(x)}" y2="{y1}" stroke="#eeeeee"/>')
        out.append(f'<text x="{_f(x)}" y="{y0 + 18}" text-anchor="middle">{p * 100:g}</text>')
    for p in ya.ticks():
        y = ya.pos(p)
        out.append(f'<line class="ytick" x1="{x0 - 5}" y1="{_f(y)}" x2="{x0}" y2="{_f(y)}" stroke="black"/>')
        out.append(f'<line x1="{x0}" y1="{_f(y)}" x2="{x1}" y2="{_f(y)}" stroke="#eeeeee"/>')
        out.append(f'<text x="{x0 - 8}" y="{_f(y + 4)}" text-anchor="end">{p * 100:g}</text>')
    out.append(f'<text x="{(x0 + x1) / 2:.2f}" y="{height - 15}" text-anchor="middle">{escape(x_label)} (%, logit scale)</text>')
    out.append(
        f'<text x="18" y="{(y0 + y1) / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 18 {(y0 + y1) / 2:.2f})">{escape(y_label)} (%, logit scale)</text>'
    )

    # y = x reference line and the fitted baseline, both straight in logit space
    lo = max(xa.lo, ya.lo)
    hi = min(xa.hi, ya.hi)
    if lo < hi:
        out.append(
            f'<line class="diagonal" x1="{_f(xa.pos(sigmoid(lo)))}" y1="{_f(ya.pos(sigmoid(lo)))}" '
            f'x2="{_f(xa.pos(sigmoid(hi)))}" y2="{_f(ya.pos(sigmoid(hi)))}" stroke="#999999" stroke-dasharray="4 3"/>'
        )
    if fit is not None:
        segs = []
        for t in (xa.lo, xa.hi):
            segs.append((xa.pos(sigmoid(t)), ya.pos(sigmoid(fit.slope * t + fit.intercept))))
        out.append(
            f'<line class="baseline" x1="{_f(segs[0][0])}" y1="{_f(segs[0][1])}" '
            f'x2="{_f(segs[1][0])}" y2="{_f(segs[1][1])}" stroke="#555555" stroke-width="1.5"/>'
        )
    if curve:
        pts = " ".join(f"{_f(xa.pos(c[1]))},{_f(ya.pos(c[2]))}" for c in curve)
        out.append(f'<polyline class="alpha-curve" points="{pts}" fill="none" stroke="#ff7f0e"/>')
        for alpha, cx, cy in curve:
            out.append(
                f'<circle class="curve" cx="{_f(xa.pos(cx))}" cy="{_f(ya.pos(cy))}" r="3" fill="#ff7f0e">'
                f"<title>alpha={alpha:g}</title></circle>"
            )
    for i, p in enumerate(points):
        color = PALETTE[i % len(PALETTE)]
        px, py = xa.pos(p.x), ya.pos(p.y)
        if p.x_ci is not None:
            out.append(
                f'<line class="ci" x1="{_f(xa.pos(p.x_ci[0]))}" y1="{_f(py)}" '
                f'x2="{_f(xa.pos(p.x_ci[1]))}" y2="{_f(py)}" stroke="{color}"/>'
            )
        if p.y_ci is not None:
            out.append(
                f'<line class="ci" x1="{_f(px)}" y1="{_f(ya.pos(p.y_ci[0]))}" '
                f'x2="{_f(px)}" y2="{_f(ya.pos(p.y_ci[1]))}" stroke="{color}"/>'
            )
        out.append(
            f'<circle class="point" cx="{_f(px)}" cy="{_f(py)}" r="5" fill="{color}">'
            f"<title>{escape(p.label)}</title></circle>"
        )
        if p.label:
            out.append(f'<text x="{_f(px + 7)}" y="{_f(py - 7)}">{escape(p.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"
