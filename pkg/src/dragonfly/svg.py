"""Tiny dependency-free SVG writer for histograms and bar charts.

Output is byte-stable: fixed number formatting and element order.
"""

from __future__ import annotations

from xml.sax.saxutils import escape


def _f(x: float) -> str:
    return f"{x:.2f}"


class Canvas:
    def __init__(self, width: int = 480, height: int = 320):
        self.width = width
        self.height = height
        self.items: list[str] = []

    def rect(self, x, y, w, h, fill="#4a78b5", stroke="none"):
        self.items.append(f'<rect x="{_f(x)}" y="{_f(y)}" width="{_f(w)}" height="{_f(h)}" '
                          f'fill="{fill}" stroke="{stroke}"/>')

    def line(self, x1, y1, x2, y2, stroke="#000000", width=1.0):
        self.items.append(f'<line x1="{_f(x1)}" y1="{_f(y1)}" x2="{_f(x2)}" y2="{_f(y2)}" '
                          f'stroke="{stroke}" stroke-width="{_f(width)}"/>')

    def text(self, x, y, s, size=11, anchor="middle"):
        self.items.append(f'<text x="{_f(x)}" y="{_f(y)}" font-family="sans-serif" font-size="{size}" '
                          f'text-anchor="{anchor}">{escape(str(s))}</text>')

    def render(self) -> str:
        head = (f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
                f'viewBox="0 0 {self.width} {self.height}">')
        body = "\n".join(["  " + i for i in self.items])
        return f'{head}\n  <rect width="100%" height="100%" fill="#ffffff"/>\n{body}\n</svg>\n'


def bar_chart(heights, labels=None, title: str = "", xlabel: str = "", ylabel: str = "",
              edges=None, width: int = 480, height: int = 320) -> str:
    """Vertical bars; ``edges`` (len n+1) adds numeric tick labels under bar boundaries."""
    left, right, top, bottom = 50, 15, 30, 45
    c = Canvas(width, height)
    n = len(heights)
    pw, ph = width - left - right, height - top - bottom
    peak = max(max(heights, default=0), 1e-12)
    bw = pw / max(n, 1)
    for i, v in enumerate(heights):
        h = ph * v / peak
        c.rect(left + i * bw + 0.5, top + ph - h, max(bw - 1.0, 0.5), h)
    c.line(left, top + ph, left + pw, top + ph)
    c.line(left, top, left, top + ph)
    for frac in (0.0, 0.5, 1.0):
        y = top + ph * (1 - frac)
        c.line(left - 4, y, left, y)
        c.text(left - 6, y + 4, f"{peak * frac:.3g}", size=10, anchor="end")
    if edges is not None:
        step = max(1, (len(edges) - 1) // 5)
        for i in range(0, len(edges), step):
            x = left + i * bw
            c.line(x, top + ph, x, top + ph + 4)
            c.text(x, top + ph + 15, f"{edges[i]:.2f}", size=10)
    elif labels is not None:
        for i, lab in enumerate(labels):
            c.text(left + (i + 0.5) * bw, top + ph + 15, lab, size=10)
    if title:
        c.text(width / 2, 18, title, size=13)
    if xlabel:
        c.text(left + pw / 2, height - 8, xlabel)
    if ylabel:
        c.items.append(f'<text x="14" y="{_f(top + ph / 2)}" font-family="sans-serif" font-size="11" '
                       f'text-anchor="middle" transform="rotate(-90 14 {_f(top + ph / 2)})">{escape(ylabel)}</text>')
    return c.render()
