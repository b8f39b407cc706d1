"""Rasterise single-point B-line origin annotations into binary label maps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import H, W
from .errors import InvalidAnnotationError, InvalidSpacingError

DISC_DIAMETER_MM = 4.0


@dataclass
class LabelMap:
    grid: np.ndarray  # uint8, 0/1
    source: tuple[str, int] | None = None

    def save_png(self, path: str | Path) -> None:
        from PIL import Image

        Image.fromarray((self.grid * 255).astype(np.uint8)).save(path)


def mm_to_px(length_mm: float, px_spacing_mm: float) -> float:
    if not px_spacing_mm > 0:
        raise InvalidSpacingError(f"pixel spacing must be positive, got {px_spacing_mm}")
    return length_mm / px_spacing_mm


def render_label_map(origins: Sequence[tuple[float, float]], px_spacing_mm: float,
                     h: int = H, w: int = W, diameter_mm: float = DISC_DIAMETER_MM,
                     source: tuple[str, int] | None = None) -> LabelMap:
    """Pixel (r, c) is foreground iff its center is within ``diameter_mm / 2``
    of an origin (inclusive). Discs are unioned and clipped at the borders."""
    radius = mm_to_px(diameter_mm / 2.0, px_spacing_mm)
    grid = np.zeros((h, w), dtype=np.uint8)
    for r, c in origins:
        if not (0 <= r <= h - 1 and 0 <= c <= w - 1):
            raise InvalidAnnotationError(f"origin ({r}, {c}) outside {h}x{w} frame")
        r0, r1 = max(int(np.floor(r - radius)), 0), min(int(np.ceil(r + radius)), h - 1)
        c0, c1 = max(int(np.floor(c - radius)), 0), min(int(np.ceil(c + radius)), w - 1)
        rr = np.arange(r0, r1 + 1)[:, None]
        cc = np.arange(c0, c1 + 1)[None, :]
        inside = (rr - r) ** 2 + (cc - c) ** 2 <= radius ** 2
        grid[r0:r1 + 1, c0:c1 + 1] |= inside.astype(np.uint8)
    return LabelMap(grid, source)
