"""Dependency-free SVG drawing used by the report and diagnostic plots."""

from __future__ import annotations

import math
from pathlib import Path


def _fmt(x: float) -> str:
    return f"{x:.2f}".rstrip("0").rstrip(".")


class SvgCanvas:
    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self._parts: list[str] = []

    def rect(self, x, y, w, h, fill="none", stroke="none", stroke_width=1.0, opacity=1.0):
        self._parts.append(
            f'<rect x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" height="{_fmt(h)}" '
            f'fill="{fill}" stroke="{stroke}" stroke-width="{_fmt(stroke_width)}" '
            f'opacity="{_fmt(opacity)}"/>'
        )

    def line(self, x1, y1, x2, y2, stroke="black", stroke_width=1.0, dashed=False):
        dash = ' stroke-dasharray="4 3"' if dashed else ""
        self._parts.append(
            f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{stroke}" stroke-width="{_fmt(stroke_width)}"{dash}/>'
        )

    def polygon(self, points, fill, stroke="none", opacity=1.0):
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        self._parts.append(
            f'<polygon points="{pts}" fill="{fill}" stroke="{stroke}" opacity="{_fmt(opacity)}"/>'
        )

    def polyline(self, points, stroke="black", stroke_width=1.5):
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in points)
        self._parts.append(
            f'<polyline points="{pts}" fill="none" stroke="{stroke}" '
            f'stroke-width="{_fmt(stroke_width)}"/>'
        )

    def circle(self, cx, cy, r, fill="black", opacity=1.0):
        self._parts.append(
            f'<circle cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(r)}" fill="{fill}" '
            f'opacity="{_fmt(opacity)}"/>'
        )

    def text(self, x, y, content, size=12, anchor="start", bold=False, fill="black"):
        weight = ' font-weight="bold"' if bold else ""
        self._parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{_fmt(size)}" '
            f'font-family="sans-serif" text-anchor="{anchor}" fill="{fill}"{weight}>'
            f"{content}</text>"
        )

    def pie(self, cx, cy, r, fractions, colors, stroke="white"):
        """Pie chart from fractions summing to ~1, clockwise from 12 o'clock."""
        angle = -math.pi / 2
        for frac, color in zip(fractions, colors):
            if frac <= 0:
                continue
            if frac >= 1.0 - 1e-9:
                self.circle(cx, cy, r, fill=color)
                continue
            sweep = 2 * math.pi * frac
            x1, y1 = cx + r * math.cos(angle), cy + r * math.sin(angle)
            x2, y2 = cx + r * math.cos(angle + sweep), cy + r * math.sin(angle + sweep)
            large = 1 if sweep > math.pi else 0
            self._parts.append(
                f'<path d="M {_fmt(cx)} {_fmt(cy)} L {_fmt(x1)} {_fmt(y1)} '
                f'A {_fmt(r)} {_fmt(r)} 0 {large} 1 {_fmt(x2)} {_fmt(y2)} Z" '
                f'fill="{color}" stroke="{stroke}" stroke-width="0.5"/>'
            )
            angle += sweep

    def to_string(self) -> str:
        body = "\n".join(self._parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" '
            f'height="{self.height}" viewBox="0 0 {self.width} {self.height}">\n'
            f'<rect x="0" y="0" width="{self.width}" height="{self.height}" fill="white"/>\n'
            f"{body}\n</svg>\n"
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_string())
