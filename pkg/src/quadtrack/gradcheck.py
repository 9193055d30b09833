"""Analytic-vs-central-difference gradient checks for every differentiable piece.

Finite differences always run in float64. In 64-bit mode the analytic side is
float64 too; in 32-bit mode it comes from the float32 compute path.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import embed_net as en
from . import hard_mining as hm
from . import loss_stack as ls
from . import tensor_core as tc
from .train_engine import TrainConfig, loss_and_grads
from .xcorr_head import score_map, score_map_grad

DEFAULT_TOL = {64: 1e-6, 32: 1e-3}


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(self.error <= self.tol)


def _fd(f: Callable[[np.ndarray], float], x: np.ndarray, eps: float, idx=None) -> np.ndarray:
    return tc.finite_diff_grad(f, x, eps, idx)


def _sample(rng: np.random.Generator, size: int, k: int) -> np.ndarray:
    return np.sort(rng.choice(size, size=min(k, size), replace=False))


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin, x)


def _cmp(analytic: np.ndarray, numeric: np.ndarray, idx=None) -> float:
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    if idx is not None:
        a, n = a[idx], n[idx]
    return tc.rel_error(a, n)


def check_pair_loss(rng, dt):
    y = hm.build_label_map(17)
    v = rng.standard_normal((17, 17)) * 3
    w = hm.adapt_weights(v, y, hm.init_balance_weights(y))
    _, g = ls.pair_loss(v.astype(dt), y, w)
    return _cmp(g, _fd(lambda t: ls.pair_loss(t, y, w)[0], v, 1e-6))


def check_triplet_loss(rng, dt):
    f = rng.standard_normal(2)
    f32 = f.astype(dt)
    out = ls.triplet_loss(float(f32[0]), float(f32[1]))
    num = _fd(lambda t: ls.triplet_loss(t[0], t[1]).loss, f32.astype(np.float64), 1e-6)
    return _cmp([out.d_plus, out.d_minus], num)


def check_combine_loss(rng, dt):
    p = np.array([rng.uniform(0, 3), rng.uniform(0, 1), rng.uniform(0.2, 1), rng.uniform(0.05, 0.5)])

    def f(t):
        return ls.combine_loss(t[0], t[1], ls.LossWeights(t[2], t[3])).loss

    out = ls.combine_loss(p[0], p[1], ls.LossWeights(p[2], p[3]))
    return _cmp(out[1:], _fd(f, p, 1e-6))


def check_score_map(rng, dt):
    z = rng.standard_normal((4, 3, 3))
    x = rng.standard_normal((4, 7, 7))
    u = rng.standard_normal((5, 5))
    net = en.EmbedNet([], [], score_bias=0.3)
    dz, dx, db = score_map_grad(u.astype(dt), z.astype(dt), x.astype(dt))
    e_z = _cmp(dz, _fd(lambda t: np.sum(u * score_map(net, t, x)), z, 1e-6))
    e_x = _cmp(dx, _fd(lambda t: np.sum(u * score_map(net, z, t)), x, 1e-6))
    e_b = _cmp([db], [np.sum(u)])
    return max(e_z, e_x, e_b)


def check_conv(rng, dt):
    x = rng.standard_normal((2, 3, 9, 9))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    u = rng.standard_normal((2, 4, 4, 4))
    gx, gw, gb = tc.conv2d_grad(x.astype(dt), w.astype(dt), u.astype(dt), stride=2)
    errs = [
        _cmp(gx, _fd(lambda t: np.sum(u * tc.conv2d(t, w, b, 2)), x, 1e-6)),
        _cmp(gw, _fd(lambda t: np.sum(u * tc.conv2d(x, t, b, 2)), w, 1e-6)),
        _cmp(gb, _fd(lambda t: np.sum(u * tc.conv2d(x, w, t, 2)), b, 1e-6)),
    ]
    return max(errs)


def check_relu(rng, dt):
    x = _away_from_zero(rng, (2, 3, 5, 5))
    u = rng.standard_normal(x.shape)
    g = tc.relu_grad(x.astype(dt), u.astype(dt))
    return _cmp(g, _fd(lambda t: np.sum(u * tc.relu(t)), x, 1e-6))


def check_max_pool(rng, dt):
    # distinct, well-separated values so no perturbation can change a window's winner
    x = rng.permutation(2 * 3 * 9 * 9).reshape(2, 3, 9, 9) * 0.01
    u = rng.standard_normal((2, 3, 4, 4))
    out, arg = tc.max_pool(x.astype(dt), 3, 2)
    g = tc.max_pool_grad(x.shape, arg, u.astype(dt))
    return _cmp(g, _fd(lambda t: np.sum(u * tc.max_pool(t, 3, 2)[0]), x, 1e-6))


def _desk_problem(rng, seed: int):
    net = en.init_params(en.DESK_SPECS, seed).astype(np.float64)
    # shrink the He-initialized kernels so the softmax in the triplet term is not saturated
    net = net.with_params([p * 0.5 for p in net.params], 0.1)
    z = rng.uniform(0, 1, (1, 3, en.EXEMPLAR_SIZE, en.EXEMPLAR_SIZE))
    x = rng.uniform(0, 1, (1, 3, en.SEARCH_SIZE, en.SEARCH_SIZE))
    return net, ls.LossWeights(0.9, 0.1), z, x, TrainConfig(mode="quad_learned")


def _pattern(net: en.EmbedNet, z: np.ndarray, x: np.ndarray, cfg: TrainConfig) -> bytes:
    """Every discrete choice the loss depends on: ReLU signs, pool winners, mining picks."""
    parts = []
    feats = []
    for img in (z, x):
        f, cache = en.forward(net, img)
        feats.append(f)
        for spec, inp, am in zip(net.specs, cache.inputs, cache.argmax):
            if spec.kind == "relu":
                parts.append(np.packbits(inp > 0).tobytes())
            elif am is not None:
                parts.append(am.tobytes())
    v = score_map(net, feats[0], feats[1])
    y = hm.build_label_map(v.shape[-1], cfg.radius)
    for vk in v.astype(np.float64):
        parts.append(hm.adapt_weights(vk, y, hm.init_balance_weights(y)).tobytes())
        pick = hm.select_hard_pair(vk, y, "tracking")
        parts.append(repr((pick.pos_index, pick.neg_index)).encode())
    return b"".join(parts)


def check_training_step(rng, dt, seed: int = 0, per_tensor: int = 2, eps: float = 1e-6):
    """Sampled coordinates of every parameter tensor, the score bias and the loss weights.

    The loss is only piecewise smooth. A coordinate whose central difference
    straddles a switch (checked on both sides) gets a smaller step; if even
    the smallest step straddles one, another coordinate is drawn.
    """
    net, weights, z, x, cfg = _desk_problem(rng, seed)
    _, grads, db, dwbar, _ = loss_and_grads(net.astype(dt), weights, z.astype(dt), x.astype(dt), cfg)
    base = _pattern(net, z, x, cfg)

    def loss(params, bias):
        return loss_and_grads(net.with_params(params, bias), weights, z, x, cfg)[0]

    def smooth_diff(params, i, j):
        for step in (eps, eps / 10, eps / 100):
            sides = []
            for sign in (1, -1):
                moved = list(params)
                moved[i] = params[i].copy()
                moved[i].flat[j] += sign * step
                if _pattern(net.with_params(moved, net.score_bias), z, x, cfg) != base:
                    break
                sides.append(loss(moved, net.score_bias))
            if len(sides) == 2:
                return (sides[0] - sides[1]) / (2 * step)
        return None

    analytic, numeric = [], []
    for i, p in enumerate(net.params):
        a, n = [], []
        for j in rng.permutation(p.size):
            d = smooth_diff(net.params, i, int(j))
            if d is not None:
                a.append(grads[i].flat[j])
                n.append(d)
            if len(a) == per_tensor:
                break
        analytic.append(a)
        numeric.append(n)
    nb = _fd(lambda t: loss(net.params, t[0]), np.array([net.score_bias]), eps)
    nw = _fd(lambda t: loss_and_grads(net, ls.LossWeights(t[0], t[1]), z, x, cfg)[0], weights.as_array(), eps)
    analytic += [[db], dwbar]
    numeric += [nb, nw]
    return max(_cmp(a, n) for a, n in zip(analytic, numeric))


def check_training_direction(rng, dt, seed: int = 0, eps: float = 1e-6):
    """Directional derivative along a random direction through every parameter at once."""
    net, weights, z, x, cfg = _desk_problem(rng, seed)
    _, grads, db, _, _ = loss_and_grads(net.astype(dt), weights, z.astype(dt), x.astype(dt), cfg)
    dirs = [rng.standard_normal(p.shape) for p in net.params]
    d_b = rng.standard_normal()
    norm = np.sqrt(sum(np.sum(d * d) for d in dirs) + d_b * d_b)
    dirs = [d / norm for d in dirs]
    d_b /= norm
    analytic = sum(np.sum(g.astype(np.float64) * d) for g, d in zip(grads, dirs)) + db * d_b

    def f(t):
        moved = [p + t[0] * d for p, d in zip(net.params, dirs)]
        return loss_and_grads(net.with_params(moved, net.score_bias + t[0] * d_b), weights, z, x, cfg)[0]

    numeric = _fd(f, np.zeros(1), eps)[0]
    return _cmp([analytic], [numeric])


CHECKS: list[tuple[str, Callable]] = [
    ("pair_loss", check_pair_loss),
    ("triplet_loss", check_triplet_loss),
    ("combine_loss", check_combine_loss),
    ("score_map", check_score_map),
    ("conv2d", check_conv),
    ("relu", check_relu),
    ("max_pool", check_max_pool),
    ("train_step_sampled", check_training_step),
    ("train_step_direction", check_training_direction),
]


def run_suite(seed: int = 0, bits: int = 64, tol: float | None = None, names=None) -> list[CheckResult]:
    if bits not in DEFAULT_TOL:
        raise ValueError(f"bits must be 32 or 64, got {bits}")
    tol = DEFAULT_TOL[bits] if tol is None else tol
    dt = np.float64 if bits == 64 else np.float32
    out = []
    for k, (name, fn) in enumerate(CHECKS):
        if names is not None and name not in names:
            continue
        rng = np.random.default_rng([seed, k])
        out.append(CheckResult(name, float(fn(rng, dt)), tol))
    return out


def format_table(results: list[CheckResult], bits: int) -> str:
    lines = [f"{'check':<24}{'bits':>5}{'rel_error':>12}{'tol':>10}  result"]
    for r in results:
        lines.append(f"{r.name:<24}{bits:>5}{r.error:>12.3e}{r.tol:>10.0e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)
