"""Weighted logistic pair loss, softmax triplet loss and the learned-weight combination.

All arithmetic is float64 regardless of the score dtype; the triplet gradient
carries a cubic factor in the softmax outputs and underflows quickly in float32.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

DEFAULT_THRESHOLD = 0.01


@dataclass(frozen=True)
class LossWeights:
    w1: float = 0.9
    w2: float = 0.1
    threshold: float = DEFAULT_THRESHOLD

    def as_array(self) -> np.ndarray:
        return np.array([self.w1, self.w2])


class TripletOutput(NamedTuple):
    s_plus: float
    s_minus: float
    loss: float
    d_plus: float
    d_minus: float


class CombinedOutput(NamedTuple):
    loss: float
    d_l1: float
    d_l2: float
    d_w1: float
    d_w2: float


def pair_loss(v: np.ndarray, y: np.ndarray, w: np.ndarray) -> tuple[float, np.ndarray]:
    """``sum w * log(1 + exp(-y v))`` and its gradient with respect to ``v``."""
    v = np.asarray(v, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    if not (v.shape == y.shape == w.shape):
        raise ValueError(f"shape mismatch: scores {v.shape}, labels {y.shape}, weights {w.shape}")
    total = math.fsum(w.ravel())
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"pair weights must sum to 1, got {total!r}")
    t = y * v
    per_cell = np.log1p(np.exp(-np.abs(t))) + np.maximum(0.0, -t)
    loss = float(np.sum(w * per_cell))
    # sigma(-t) evaluated without overflow for either sign of t
    e = np.exp(-np.abs(t))
    sig_neg = np.where(t >= 0, e / (1.0 + e), 1.0 / (1.0 + e))
    return loss, -w * y * sig_neg


def triplet_loss(f_plus: float, f_minus: float) -> TripletOutput:
    """Squared distance between softmax(f_plus, f_minus) and the ideal (1, 0)."""
    if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
        raise ValueError(f"triplet scores must be finite, got {f_plus}, {f_minus}")
    m = max(f_plus, f_minus)
    ep = math.exp(f_plus - m)
    en = math.exp(f_minus - m)
    s_minus = en / (ep + en)
    s_plus = 1.0 - s_minus  # keeps s_plus + s_minus == 1 exactly
    loss = (s_plus - 1.0) ** 2 + s_minus ** 2
    g = 4.0 * s_plus * s_minus * s_minus
    return TripletOutput(s_plus, s_minus, loss, -g, g)


def combine_loss(l1: float, l2: float, weights: LossWeights) -> CombinedOutput:
    w1, w2, t = weights.w1, weights.w2, weights.threshold
    if w1 < t or w2 < t:
        raise ValueError(f"loss weights ({w1}, {w2}) below threshold {t}; clamp first")
    ws = w1 + w2
    mix = w1 * l1 + w2 * l2
    return CombinedOutput(
        mix / ws,
        w1 / ws,
        w2 / ws,
        (ws * l1 - mix) / (ws * ws),
        (ws * l2 - mix) / (ws * ws),
    )


def clamp_weights(weights: LossWeights) -> LossWeights:
    t = weights.threshold
    return LossWeights(max(t, weights.w1), max(t, weights.w2), t)
