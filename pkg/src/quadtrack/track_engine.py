"""One-shot tracking: embed the exemplar once, then search three scales per frame."""
from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import embed_net as en
from . import tensor_core as tc
from .embed_net import EmbedNet
from .geometry import BoundingBox, context_side, crop_and_resize
from .xcorr_head import score_map

__all__ = ["BoundingBox", "TrackerConfig", "TrackState", "track_init", "track_step", "track_sequence", "Tracker"]


@dataclass(frozen=True)
class TrackerConfig:
    scale_step: float = 1.0375
    scale_lr: float = 0.59
    upsample: int = 16
    total_stride: int = en.TOTAL_STRIDE
    exemplar_size: int = en.EXEMPLAR_SIZE
    search_size: int = en.SEARCH_SIZE
    # raised-cosine penalty on the response; off by default (raw argmax)
    window_influence: float = 0.0

    @property
    def scales(self) -> tuple[float, float, float]:
        return (1 / self.scale_step, 1.0, self.scale_step)


@dataclass(frozen=True)
class TrackState:
    net: EmbedNet
    exemplar_feat: np.ndarray
    cx: float
    cy: float
    base_w: float
    base_h: float
    scale: float
    config: TrackerConfig
    exemplar_forwards: int = 1

    @property
    def w(self) -> float:
        return self.base_w * self.scale

    @property
    def h(self) -> float:
        return self.base_h * self.scale

    @property
    def box(self) -> BoundingBox:
        return BoundingBox.from_center(self.cx, self.cy, self.w, self.h)

    @property
    def search_side(self) -> float:
        return context_side(self.w, self.h) * self.config.search_size / self.config.exemplar_size


def track_init(net: EmbedNet, frame: np.ndarray, box: BoundingBox, config: TrackerConfig | None = None) -> TrackState:
    """Crop the exemplar around ``box`` in ``frame`` (3, H, W) and cache its embedding."""
    config = config or TrackerConfig()
    if not box.is_valid():
        raise ValueError(f"degenerate initial box {box}")
    frame = frame[0] if frame.ndim == 4 else frame
    crop = crop_and_resize(frame, box.cx, box.cy, context_side(box.w, box.h), config.exemplar_size)
    feat = en.embed(net, crop[None])[0]
    return TrackState(net, feat, box.cx, box.cy, box.w, box.h, 1.0, config)


def _hann(n: int) -> np.ndarray:
    h = np.hanning(n + 2)[1:-1]
    w = np.outer(h, h)
    return w / w.sum()


def response_maps(state: TrackState, frame: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Raw score maps (S, m, m) and their bicubic upsampling (S, M, M) for every search scale."""
    cfg = state.config
    fill = frame.mean(axis=(1, 2))
    side = state.search_side
    crops = np.stack(
        [crop_and_resize(frame, state.cx, state.cy, side * s, cfg.search_size, fill) for s in cfg.scales]
    )
    feats = en.embed(state.net, crops)
    z = np.broadcast_to(state.exemplar_feat, (len(cfg.scales),) + state.exemplar_feat.shape)
    maps = score_map(state.net, z, feats)
    m = maps.shape[-1]
    ry = tc.bicubic_matrix(m, m * cfg.upsample)
    up = np.einsum("ij,sjk,lk->sil", ry, maps.astype(np.float64), ry, optimize=True)
    return maps, up


def displacement(peak: tuple[int, int], up_size: int, total_stride: int, upsample: int) -> tuple[float, float]:
    """(dy, dx) in search-image pixels of an upsampled-map peak from the map center."""
    c = (up_size - 1) / 2
    return ((peak[0] - c) * total_stride / upsample, (peak[1] - c) * total_stride / upsample)


def _choose(up: np.ndarray, scales: tuple[float, ...]) -> tuple[int, tuple[int, int]]:
    # scale preference on ties: s = 1 first, then smaller, then larger
    order = sorted(range(len(scales)), key=lambda i: (scales[i] != 1.0, scales[i]))
    best, best_val = order[0], up[order[0]].max()
    for i in order[1:]:
        if up[i].max() > best_val:
            best, best_val = i, up[i].max()
    flat = int(np.argmax(up[best]))
    return best, divmod(flat, up.shape[-1])


def track_step(state: TrackState, frame: np.ndarray) -> tuple[BoundingBox, TrackState]:
    frame = frame[0] if frame.ndim == 4 else frame
    cfg = state.config
    _, up = response_maps(state, frame)
    if cfg.window_influence > 0:
        win = _hann(up.shape[-1])
        up = (1 - cfg.window_influence) * (up - up.min()) / max(np.ptp(up), 1e-12) + cfg.window_influence * win / win.max()
    k, peak = _choose(up, cfg.scales)
    s = cfg.scales[k]
    dy, dx = displacement(peak, up.shape[-1], cfg.total_stride, cfg.upsample)
    to_frame = state.search_side * s / cfg.search_size
    _, h, w = frame.shape
    cx = min(max(state.cx + dx * to_frame, 0.0), float(w))
    cy = min(max(state.cy + dy * to_frame, 0.0), float(h))
    scale = (1 - cfg.scale_lr) * state.scale + cfg.scale_lr * state.scale * s
    new = replace(state, cx=cx, cy=cy, scale=scale)
    return new.box, new


def track_sequence(net: EmbedNet, frames, init_box: BoundingBox, config: TrackerConfig | None = None) -> list[BoundingBox]:
    if len(frames) < 1:
        raise ValueError("need at least one frame")
    it = iter(frames)
    state = track_init(net, next(it), init_box, config)
    boxes = [init_box]
    for frame in it:
        box, state = track_step(state, frame)
        boxes.append(box)
    return boxes


class Tracker:
    """Callable ``(frames, init_box) -> boxes`` wrapper used by the evaluation drivers."""

    def __init__(self, net: EmbedNet, config: TrackerConfig | None = None, name: str = "quad"):
        self.net = net
        self.config = config or TrackerConfig()
        self.name = name

    def __call__(self, frames, init_box: BoundingBox) -> list[BoundingBox]:
        return track_sequence(self.net, frames, init_box, self.config)


def static_tracker(frames, init_box: BoundingBox) -> list[BoundingBox]:
    """Baseline that never moves the initial box."""
    return [init_box] * len(frames)


def scale_bound(k: int, step: float = 1.0375) -> tuple[float, float]:
    return step ** -k, step ** k
