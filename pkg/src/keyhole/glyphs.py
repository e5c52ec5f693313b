"""Binary stroke glyphs used as stand-in test objects (handwritten-symbol style)."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageDraw

# Polylines in unit coordinates, (0, 0) top-left.
GLYPHS = {
    "K": [[(0.25, 0.15), (0.25, 0.85)], [(0.72, 0.15), (0.25, 0.55)], [(0.38, 0.45), (0.75, 0.85)]],
    "E": [[(0.7, 0.15), (0.3, 0.15), (0.3, 0.85), (0.72, 0.85)], [(0.3, 0.5), (0.62, 0.5)]],
    "Y": [[(0.22, 0.15), (0.5, 0.5), (0.8, 0.15)], [(0.5, 0.5), (0.5, 0.85)]],
    "F": [[(0.72, 0.15), (0.3, 0.15), (0.3, 0.85)], [(0.3, 0.48), (0.6, 0.48)]],
    "L": [[(0.3, 0.15), (0.3, 0.85), (0.75, 0.85)]],
    "P": [[(0.3, 0.85), (0.3, 0.15), (0.62, 0.15), (0.72, 0.25), (0.72, 0.4), (0.62, 0.5), (0.3, 0.5)]],
    "J": [[(0.4, 0.15), (0.75, 0.15)], [(0.62, 0.15), (0.62, 0.75), (0.52, 0.85), (0.35, 0.85), (0.25, 0.72)]],
    "4": [[(0.62, 0.85), (0.62, 0.15), (0.22, 0.62), (0.8, 0.62)]],
    "7": [[(0.22, 0.15), (0.78, 0.15), (0.4, 0.85)], [(0.38, 0.5), (0.68, 0.5)]],
}


def glyph(name: str, size: int = 64, stroke: float = 0.1) -> np.ndarray:
    """Rasterize glyph ``name`` to a ``size x size`` binary float image."""
    if name not in GLYPHS:
        raise ValueError(f"unknown glyph {name!r}; choose from {sorted(GLYPHS)}")
    img = Image.new("L", (size, size), 0)
    draw = ImageDraw.Draw(img)
    width = max(1, int(round(stroke * size)))
    for line in GLYPHS[name]:
        pts = [(x * (size - 1), y * (size - 1)) for x, y in line]
        draw.line(pts, fill=255, width=width, joint="curve")
        r = width / 2
        for x, y in (pts[0], pts[-1]):
            draw.ellipse((x - r, y - r, x + r, y + r), fill=255)
    return (np.asarray(img) >= 128).astype(float)
