"""Label maps, balanced/adapted pair weights and hard positive/negative selection."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_RADIUS = 2.0


@dataclass(frozen=True)
class MiningResult:
    pos_index: tuple[int, int]
    neg_index: tuple[int, int]
    weights: np.ndarray | None = None


def build_label_map(map_size: int, radius: float = DEFAULT_RADIUS) -> np.ndarray:
    """+1 within Euclidean ``radius`` (cells) of the center, -1 elsewhere."""
    if map_size < 1 or map_size % 2 == 0:
        raise ValueError(f"map size must be odd so the center is a cell, got {map_size}")
    if not 0 < radius < map_size / 2:
        raise ValueError(f"radius must lie in (0, {map_size / 2}), got {radius}")
    c = map_size // 2
    d = np.arange(map_size) - c
    dist2 = d[:, None] ** 2 + d[None, :] ** 2
    return np.where(dist2 <= radius * radius, 1.0, -1.0)


def _check_both(y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pos = y > 0
    neg = ~pos
    if not pos.any() or not neg.any():
        raise ValueError("label map must contain both positive and negative cells")
    return pos, neg


def init_balance_weights(y: np.ndarray) -> np.ndarray:
    """Each class gets half the total mass, spread uniformly within the class."""
    pos, neg = _check_both(y)
    return np.where(pos, 1.0 / (2 * pos.sum()), 1.0 / (2 * neg.sum()))


def uniform_weights(y: np.ndarray) -> np.ndarray:
    return np.full(y.shape, 1.0 / y.size)


def adapt_weights(v: np.ndarray, y: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Double the weight of every negative scoring strictly above the weakest positive, renormalize."""
    if not (v.shape == y.shape == w.shape):
        raise ValueError(f"shape mismatch: scores {v.shape}, labels {y.shape}, weights {w.shape}")
    pos, neg = _check_both(y)
    weakest = v[pos].min()
    doubled = np.where(neg & (v > weakest), 2.0 * w, w).astype(np.float64)
    return doubled / math.fsum(doubled.ravel())


def _first(flat_mask: np.ndarray, values: np.ndarray, pick) -> int:
    idx = np.flatnonzero(flat_mask)
    return int(idx[pick(values[idx])])  # argmin/argmax return the first hit


def select_hard_pair(v: np.ndarray, y: np.ndarray, mode: str = "tracking") -> MiningResult:
    """Hard positive/negative cells.

    ``general``: lowest-scoring positive and highest-scoring negative.
    ``tracking``: the center cell and the highest-scoring negative.
    """
    pos, neg = _check_both(y)
    flat_v = v.ravel()
    neg_i = _first(neg.ravel(), flat_v, np.argmax)
    if mode == "general":
        pos_i = _first(pos.ravel(), flat_v, np.argmin)
        pos_index = divmod(pos_i, v.shape[1])
    elif mode == "tracking":
        pos_index = (v.shape[0] // 2, v.shape[1] // 2)
    else:
        raise ValueError(f"unknown mining mode {mode!r}")
    return MiningResult(tuple(int(a) for a in pos_index), tuple(int(a) for a in divmod(neg_i, v.shape[1])))
