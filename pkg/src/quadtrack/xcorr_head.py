"""Similarity head: score map = exemplar feature cross-correlated over search feature + b."""
from __future__ import annotations

import numpy as np

from . import tensor_core as tc
from .embed_net import EmbedNet


def score_map(net: EmbedNet, exemplar_feat: np.ndarray, search_feat: np.ndarray) -> np.ndarray:
    """Score grid(s); (C,h,w)/(C,H,W) give a 2-D map, batched features a stack."""
    return tc.cross_correlate(exemplar_feat, search_feat) + np.asarray(net.score_bias, dtype=exemplar_feat.dtype)


def score_map_grad(
    upstream: np.ndarray, exemplar_feat: np.ndarray, search_feat: np.ndarray
) -> tuple[np.ndarray, np.ndarray, float]:
    """Returns (d_exemplar, d_search, d_bias) for the scalar ``sum(upstream * score)``."""
    dz, dx = tc.cross_correlate_grad(exemplar_feat, search_feat, upstream)
    return dz, dx, float(np.sum(upstream, dtype=np.float64))
