"""Dense tensor kernels: valid cross-correlation, pooling, ReLU, bicubic resize.

Tensors are plain ``numpy`` arrays laid out as (batch, channels, height, width).
Every kernel preserves the dtype of its input so the same code path runs in
float32 for training/tracking and float64 for gradient checking.
"""
from __future__ import annotations

from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view

DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible for an operation."""


def _check4(name: str, t: np.ndarray) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{name} must be 4-D (N, C, H, W), got shape {t.shape}")


def conv_output_size(size: int, k: int, stride: int) -> int:
    return (size - k) // stride + 1


def _windows(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    # (N, C, OH, OW, k, k) strided view, no copy
    return sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def _im2col(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    """(N*OH*OW, k*k*C) patch matrix, rows in (n, i, j) order, columns in (di, dj, c) order."""
    n, c, h, w = x.shape
    oh = conv_output_size(h, k, stride)
    ow = conv_output_size(w, k, stride)
    xh = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    sn, sh, sw, sc = xh.strides
    cols = as_strided(xh, (n, oh, ow, k, k, c), (sn, sh * stride, sw * stride, sh, sw, sc), writeable=False)
    return cols.reshape(n * oh * ow, k * k * c), oh, ow


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int) -> None:
    _check4("input", x)
    _check4("kernels", w)
    if stride < 1:
        raise ShapeError(f"stride must be positive, got {stride}")
    if w.shape[1] != x.shape[1] or w.shape[2] != w.shape[3]:
        raise ShapeError(f"kernels {w.shape} incompatible with input {x.shape}")
    if w.shape[2] > x.shape[2] or w.shape[2] > x.shape[3]:
        raise ShapeError(f"kernels {w.shape} larger than input {x.shape}")


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int = 1) -> np.ndarray:
    """Valid (unpadded) cross-correlation of ``x`` (N,C,H,W) with ``w`` (O,C,k,k)."""
    _check_conv(x, w, stride)
    if b.shape != (w.shape[0],):
        raise ShapeError(f"bias {b.shape} does not match kernels {w.shape}")
    k = w.shape[2]
    cols, oh, ow = _im2col(x, k, stride)
    out = cols @ w.transpose(2, 3, 1, 0).reshape(-1, w.shape[0])
    out += b
    return np.ascontiguousarray(out.reshape(x.shape[0], oh, ow, -1).transpose(0, 3, 1, 2))


def conv2d_grad(
    x: np.ndarray,
    w: np.ndarray,
    grad_out: np.ndarray,
    stride: int = 1,
    need_input_grad: bool = True,
) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of ``sum(grad_out * conv2d(x, w, b, stride))``.

    Returns ``(grad_input, grad_kernels, grad_bias)``; ``grad_input`` is None
    when ``need_input_grad`` is False (first layer of a network).
    """
    _check_conv(x, w, stride)
    n, c = x.shape[:2]
    o, k = w.shape[0], w.shape[2]
    oh = conv_output_size(x.shape[2], k, stride)
    ow = conv_output_size(x.shape[3], k, stride)
    expected = (n, o, oh, ow)
    if grad_out.shape != expected:
        raise ShapeError(f"upstream grad {grad_out.shape} does not match output shape {expected}")
    cols, _, _ = _im2col(x, k, stride)
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, o)
    grad_w = (cols.T @ g).reshape(k, k, c, o).transpose(3, 2, 0, 1)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    if not need_input_grad:
        return None, np.ascontiguousarray(grad_w), grad_b
    dcols = (g @ w.transpose(2, 3, 1, 0).reshape(-1, o).T).reshape(n, oh, ow, k, k, c)
    grad_x = np.zeros((n, x.shape[2], x.shape[3], c), dtype=x.dtype)
    span_h = stride * (oh - 1) + 1
    span_w = stride * (ow - 1) + 1
    for i in range(k):
        for j in range(k):
            grad_x[:, i:i + span_h:stride, j:j + span_w:stride, :] += dcols[:, :, :, i, j, :]
    return np.ascontiguousarray(grad_x.transpose(0, 3, 1, 2)), np.ascontiguousarray(grad_w), grad_b


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    return np.where(x > 0, upstream, 0).astype(upstream.dtype, copy=False)


def max_pool(x: np.ndarray, window: int, stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Max pooling; returns the pooled tensor and flat argmax indices into H*W.

    Ties go to the first position of the window in row-major order.
    """
    _check4("input", x)
    if window < 1 or stride < 1:
        raise ShapeError(f"window and stride must be positive, got {window}, {stride}")
    h, wd = x.shape[2:]
    if window > h or window > wd:
        raise ShapeError(f"pool window {window} larger than input {x.shape}")
    oh = conv_output_size(h, window, stride)
    ow = conv_output_size(wd, window, stride)
    span_h = stride * (oh - 1) + 1
    span_w = stride * (ow - 1) + 1
    def tap(i: int, j: int) -> np.ndarray:
        return x[:, :, i:i + span_h:stride, j:j + span_w:stride]

    out = tap(0, 0).copy()
    for i in range(window):
        for j in range(window):
            np.maximum(out, tap(i, j), out=out)
    # scan backwards so the first row-major maximum wins ties
    local = np.zeros(out.shape, dtype=np.intp)
    for pos in reversed(range(window * window)):
        i, j = divmod(pos, window)
        local = np.where(tap(i, j) == out, pos, local)
    di, dj = np.divmod(local, window)
    rows = np.arange(oh)[:, None] * stride + di
    cols = np.arange(ow)[None, :] * stride + dj
    return out, rows * wd + cols


def max_pool_grad(x_shape: tuple[int, ...], argmax: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Route ``upstream`` back to the stored argmax positions (summing overlaps)."""
    if upstream.shape != argmax.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match pooled shape {argmax.shape}")
    n, c, h, w = x_shape
    plane = h * w
    offsets = (np.arange(n * c) * plane).reshape(n, c, 1, 1)
    idx = (argmax + offsets).ravel()
    grad = np.bincount(idx, weights=upstream.ravel(), minlength=n * c * plane)
    return grad.reshape(x_shape).astype(upstream.dtype, copy=False)


def cross_correlate(exemplar: np.ndarray, search: np.ndarray) -> np.ndarray:
    """Sliding inner product of a (C,h,w) exemplar over a (C,H,W) search map.

    Batched inputs (N,C,h,w) / (N,C,H,W) are correlated pairwise and return
    (N, H-h+1, W-w+1); unbatched inputs return a 2-D grid.
    """
    batched = exemplar.ndim == 4
    z = exemplar if batched else exemplar[None]
    x = search if search.ndim == 4 else search[None]
    if z.ndim != 4 or x.ndim != 4:
        raise ShapeError(f"features must be (C,H,W) or (N,C,H,W), got {exemplar.shape} and {search.shape}")
    if z.shape[1] != x.shape[1]:
        raise ShapeError(f"channel mismatch: exemplar {exemplar.shape} vs search {search.shape}")
    if z.shape[0] != x.shape[0]:
        raise ShapeError(f"batch mismatch: exemplar {exemplar.shape} vs search {search.shape}")
    h, w = z.shape[2:]
    if h > x.shape[2] or w > x.shape[3]:
        raise ShapeError(f"exemplar {exemplar.shape} larger than search {search.shape}")
    win = sliding_window_view(x, (h, w), axis=(2, 3))  # (N, C, OH, OW, h, w)
    out = np.einsum("ncijhw,nchw->nij", win, z, optimize=True)
    return out if batched else out[0]


def cross_correlate_grad(
    exemplar: np.ndarray, search: np.ndarray, upstream: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of ``sum(upstream * cross_correlate(exemplar, search))``."""
    batched = exemplar.ndim == 4
    z = exemplar if batched else exemplar[None]
    x = search if batched else search[None]
    g = upstream if batched else upstream[None]
    h, w = z.shape[2:]
    oh, ow = x.shape[2] - h + 1, x.shape[3] - w + 1
    if g.shape != (z.shape[0], oh, ow):
        raise ShapeError(f"upstream {upstream.shape} does not match score shape {(oh, ow)}")
    win = sliding_window_view(x, (h, w), axis=(2, 3))
    dz = np.einsum("ncijhw,nij->nchw", win, g, optimize=True).astype(z.dtype, copy=False)
    dx = np.zeros_like(x)
    for i in range(h):
        for j in range(w):
            dx[:, :, i:i + oh, j:j + ow] += z[:, :, i, j][:, :, None, None] * g[:, None]
    if batched:
        return dz, dx
    return dz[0], dx[0]


def _cubic_weight(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    t = np.abs(t)
    w = np.zeros_like(t)
    near = t <= 1
    far = (t > 1) & (t < 2)
    w[near] = (a + 2) * t[near] ** 3 - (a + 3) * t[near] ** 2 + 1
    w[far] = a * t[far] ** 3 - 5 * a * t[far] ** 2 + 8 * a * t[far] - 4 * a
    return w


def bicubic_matrix(n_in: int, n_out: int, a: float = -0.5) -> np.ndarray:
    """(n_out, n_in) Catmull-Rom interpolation matrix, half-pixel aligned, edge clamped."""
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    m = np.zeros((n_out, n_in))
    rows = np.arange(n_out)
    for off in (-1, 0, 1, 2):
        idx = base + off
        wt = _cubic_weight(src - idx, a)
        np.add.at(m, (rows, np.clip(idx, 0, n_in - 1)), wt)
    return m


def bicubic_resize(grid: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize a 2-D grid with the Catmull-Rom cubic (a = -0.5), clamp-to-edge."""
    if out_h <= 0 or out_w <= 0:
        raise ShapeError(f"requested size must be positive, got {out_h}x{out_w}")
    if grid.ndim != 2 or min(grid.shape) < 2:
        raise ShapeError(f"bicubic_resize needs a 2-D grid of at least 2x2, got {grid.shape}")
    ry = bicubic_matrix(grid.shape[0], out_h)
    rx = bicubic_matrix(grid.shape[1], out_w)
    return (ry @ grid.astype(np.float64) @ rx.T).astype(grid.dtype, copy=False)


def finite_diff_grad(
    f: Callable[[np.ndarray], float],
    point: np.ndarray,
    epsilon: float = 1e-6,
    indices: np.ndarray | None = None,
) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``point`` in float64.

    If ``indices`` (flat positions) is given only those coordinates are
    estimated; the rest of the returned array is zero.
    """
    x = np.array(point, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    todo = range(flat.size) if indices is None else indices
    for i in todo:
        old = flat[i]
        flat[i] = old + epsilon
        fp = float(f(x))
        flat[i] = old - epsilon
        fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * epsilon)
    return grad


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Norm-wise relative error ``|a-b| / max(|a|, |b|)`` (0 when both vanish)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b))
    if denom == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)
