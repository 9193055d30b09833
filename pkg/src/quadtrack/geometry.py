"""Boxes and square context crops.

Coordinates are continuous and 0-based: pixel ``i`` covers ``[i, i + 1)`` so
its center sits at ``i + 0.5``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "BoundingBox":
        return cls(cx - w / 2, cy - h / 2, w, h)

    def scaled(self, s: float) -> "BoundingBox":
        return BoundingBox(self.x * s, self.y * s, self.w * s, self.h * s)

    def is_valid(self) -> bool:
        return self.w > 0 and self.h > 0 and all(math.isfinite(v) for v in (self.x, self.y, self.w, self.h))


def context_side(w: float, h: float) -> float:
    """Side of the square exemplar region: target plus half-perimeter context."""
    p = (w + h) / 2
    return math.sqrt((w + p) * (h + p))


def _bilinear_matrix(start: float, step: float, n_out: int, lo: int, n_src: int) -> np.ndarray:
    # rows: output samples; columns: source pixels lo .. lo + n_src - 1
    q = start + (np.arange(n_out) + 0.5) * step - 0.5 - lo
    i0 = np.floor(q).astype(int)
    frac = q - i0
    m = np.zeros((n_out, n_src))
    rows = np.arange(n_out)
    np.add.at(m, (rows, np.clip(i0, 0, n_src - 1)), 1 - frac)
    np.add.at(m, (rows, np.clip(i0 + 1, 0, n_src - 1)), frac)
    return m


def crop_and_resize(
    image: np.ndarray,
    cx: float,
    cy: float,
    side: float,
    out_size: int,
    fill: np.ndarray | None = None,
) -> np.ndarray:
    """Bilinear resample of the ``side``-wide square centered at (cx, cy) to ``out_size``.

    ``image`` is (C, H, W); regions outside the frame take ``fill`` (per
    channel, default the frame mean).
    """
    c, h, w = image.shape
    if fill is None:
        fill = image.mean(axis=(1, 2))
    step = side / out_size
    x0, y0 = cx - side / 2, cy - side / 2
    # integer source range touched by the bilinear taps
    lo_x = int(math.floor(x0 - 0.5)) - 1
    hi_x = int(math.floor(x0 + side - 0.5)) + 2
    lo_y = int(math.floor(y0 - 0.5)) - 1
    hi_y = int(math.floor(y0 + side - 0.5)) + 2
    pw, ph = hi_x - lo_x + 1, hi_y - lo_y + 1
    patch = np.empty((c, ph, pw), dtype=np.float64)
    patch[:] = np.asarray(fill, dtype=np.float64)[:, None, None]
    sx0, sx1 = max(lo_x, 0), min(hi_x, w - 1)
    sy0, sy1 = max(lo_y, 0), min(hi_y, h - 1)
    if sx0 <= sx1 and sy0 <= sy1:
        patch[:, sy0 - lo_y:sy1 - lo_y + 1, sx0 - lo_x:sx1 - lo_x + 1] = image[:, sy0:sy1 + 1, sx0:sx1 + 1]
    ry = _bilinear_matrix(y0, step, out_size, lo_y, ph)
    rx = _bilinear_matrix(x0, step, out_size, lo_x, pw)
    out = np.einsum("oy,cyx,px->cop", ry, patch, rx, optimize=True)
    return out.astype(np.float32)
