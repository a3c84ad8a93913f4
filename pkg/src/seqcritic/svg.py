"""Tiny static SVG scatter/line renderer; CSV stays the canonical artifact."""

from __future__ import annotations

import numpy as np

WIDTH, HEIGHT = 640, 440
MARGIN_L, MARGIN_R, MARGIN_T, MARGIN_B = 60, 20, 36, 48
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def _axis(lo: float, hi: float) -> tuple[float, float]:
    if lo == hi:
        pad = 1.0 if lo == 0 else abs(lo) * 0.1
        return lo - pad, hi + pad
    pad = (hi - lo) * 0.05
    return lo - pad, hi + pad


def _fmt(x: float) -> str:
    return f"{x:.6g}"


class _Plot:
    def __init__(self, title: str, xlabel: str, ylabel: str,
                 xs_all: np.ndarray, ys_all: np.ndarray):
        self.parts: list[str] = []
        self.x0, self.x1 = _axis(float(np.min(xs_all)), float(np.max(xs_all)))
        self.y0, self.y1 = _axis(float(np.min(ys_all)), float(np.max(ys_all)))
        self.parts.append(
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">'
        )
        self.parts.append(f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>')
        self.parts.append(
            f'<text x="{WIDTH / 2}" y="20" text-anchor="middle" font-size="14">{title}</text>'
        )
        self._frame(xlabel, ylabel)

    def px(self, x: float) -> float:
        return MARGIN_L + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - MARGIN_L - MARGIN_R)

    def py(self, y: float) -> float:
        return HEIGHT - MARGIN_B - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - MARGIN_T - MARGIN_B)

    def _frame(self, xlabel: str, ylabel: str) -> None:
        left, right = MARGIN_L, WIDTH - MARGIN_R
        top, bottom = MARGIN_T, HEIGHT - MARGIN_B
        self.parts.append(
            f'<rect x="{left}" y="{top}" width="{right - left}" height="{bottom - top}" '
            f'fill="none" stroke="#444"/>'
        )
        for i in range(5):
            fx = self.x0 + (self.x1 - self.x0) * i / 4
            fy = self.y0 + (self.y1 - self.y0) * i / 4
            xx, yy = self.px(fx), self.py(fy)
            self.parts.append(
                f'<line x1="{xx:.1f}" y1="{bottom}" x2="{xx:.1f}" y2="{bottom + 4}" stroke="#444"/>'
                f'<text x="{xx:.1f}" y="{bottom + 18}" text-anchor="middle">{_fmt(fx)}</text>'
            )
            self.parts.append(
                f'<line x1="{left - 4}" y1="{yy:.1f}" x2="{left}" y2="{yy:.1f}" stroke="#444"/>'
                f'<text x="{left - 8}" y="{yy + 4:.1f}" text-anchor="end">{_fmt(fy)}</text>'
            )
        self.parts.append(
            f'<text x="{(left + right) / 2}" y="{HEIGHT - 10}" text-anchor="middle">{xlabel}</text>'
        )
        self.parts.append(
            f'<text x="16" y="{(top + bottom) / 2}" text-anchor="middle" '
            f'transform="rotate(-90 16 {(top + bottom) / 2})">{ylabel}</text>'
        )

    def finish(self) -> str:
        return "".join(self.parts) + "</svg>\n"


def render_scatter(
    path: str,
    xs,
    ys,
    title: str,
    xlabel: str,
    ylabel: str,
    groups=None,
) -> None:
    """Scatter plot; optional integer group per point sets the color."""
    xs = np.asarray(xs, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    plot = _Plot(title, xlabel, ylabel, xs, ys)
    for i in range(len(xs)):
        color = PALETTE[int(groups[i]) % len(PALETTE)] if groups is not None else PALETTE[0]
        plot.parts.append(
            f'<circle cx="{plot.px(xs[i]):.1f}" cy="{plot.py(ys[i]):.1f}" r="3" '
            f'fill="{color}" fill-opacity="0.6"/>'
        )
    with open(path, "w") as f:
        f.write(plot.finish())


def render_lines(
    path: str,
    series: list[tuple[str, list, list]],
    title: str,
    xlabel: str,
    ylabel: str,
) -> None:
    """One polyline per (name, xs, ys) series, with a small legend."""
    all_x = np.concatenate([np.asarray(s[1], dtype=np.float64) for s in series])
    all_y = np.concatenate([np.asarray(s[2], dtype=np.float64) for s in series])
    finite = np.isfinite(all_y)
    plot = _Plot(title, xlabel, ylabel, all_x, all_y[finite] if finite.any() else np.zeros(1))
    for k, (name, xs, ys) in enumerate(series):
        color = PALETTE[k % len(PALETTE)]
        pts = " ".join(
            f"{plot.px(float(x)):.1f},{plot.py(float(y)):.1f}"
            for x, y in zip(xs, ys)
            if np.isfinite(y)
        )
        plot.parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5"/>'
        )
        ly = MARGIN_T + 16 + 16 * k
        plot.parts.append(
            f'<line x1="{WIDTH - 150}" y1="{ly - 4}" x2="{WIDTH - 130}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
            f'<text x="{WIDTH - 124}" y="{ly}">{name}</text>'
        )
    with open(path, "w") as f:
        f.write(plot.finish())
