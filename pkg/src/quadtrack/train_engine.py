"""Training: precompute (mining) then forward/backward, SGD with momentum.

Modes, from weakest to full model:

- ``pair_only``      balanced logistic pair loss (plain Siamese training)
- ``adaptive_pair``  pair loss with violation-doubled weights
- ``quad_const``     adaptive pair loss + triplet loss, fixed combination weights
- ``quad_learned``   as above with the combination weights learned by SGD
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import embed_net as en
from . import hard_mining as hm
from . import loss_stack as ls
from . import tensor_core as tc
from .data_io import Sequence
from .embed_net import EmbedNet
from .geometry import context_side, crop_and_resize
from .loss_stack import LossWeights
from .track_engine import displacement
from .xcorr_head import score_map, score_map_grad

log = logging.getLogger(__name__)

MODES = ("pair_only", "adaptive_pair", "quad_const", "quad_learned")


class DivergenceError(RuntimeError):
    """Raised when a loss or gradient stops being finite."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2
    pairs_per_epoch: int = 2000
    batch_size: int = 8
    # raw (unnormalized) scores on a from-scratch net: larger rates blow up or kill the features
    lr_start: float = 1e-5
    lr_end: float = 1e-6
    momentum: float = 0.9
    weight_decay: float = 0.0
    w1: float = 0.9
    w2: float = 0.1
    threshold: float = ls.DEFAULT_THRESHOLD
    grayscale_prob: float = 0.25
    validation_fraction: float = 0.1
    mode: str = "quad_learned"
    seed: int = 0
    radius: float = hm.DEFAULT_RADIUS
    max_frame_gap: int = 10
    pair_weighting: str = "balanced"  # or "uniform"
    preset: str = "desk"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError(f"need lr_start >= lr_end > 0, got {self.lr_start}, {self.lr_end}")
        if not 0 <= self.grayscale_prob <= 1:
            raise ValueError(f"grayscale_prob must be in [0, 1], got {self.grayscale_prob}")
        if not 0 < self.validation_fraction < 1:
            raise ValueError(f"validation_fraction must be in (0, 1), got {self.validation_fraction}")
        if self.epochs < 1 or self.pairs_per_epoch < 1 or self.batch_size < 1:
            raise ValueError("epochs, pairs_per_epoch and batch_size must be positive")
        if self.pair_weighting not in ("balanced", "uniform"):
            raise ValueError(f"pair_weighting must be balanced or uniform, got {self.pair_weighting!r}")
        if self.preset not in ("desk", "reference"):
            raise ValueError(f"preset must be desk or reference, got {self.preset!r}")

    @property
    def uses_triplet(self) -> bool:
        return self.mode in ("quad_const", "quad_learned")

    @property
    def adapts_weights(self) -> bool:
        return self.mode != "pair_only"

    def specs(self) -> list[en.LayerSpec]:
        return en.DESK_SPECS if self.preset == "desk" else en.REFERENCE_SPECS


def learning_rate(config: TrainConfig, epoch: int) -> float:
    """Geometric decay from ``lr_start`` at epoch 0 to ``lr_end`` at the last epoch."""
    if config.epochs == 1:
        return config.lr_start
    return config.lr_start * (config.lr_end / config.lr_start) ** (epoch / (config.epochs - 1))


@dataclass
class Pair:
    exemplar: np.ndarray  # (3, 127, 127)
    search: np.ndarray  # (3, 255, 255)
    target_center: tuple[float, float]  # (x, y) in search-image pixels


def to_grayscale(img: np.ndarray) -> np.ndarray:
    luma = 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]
    return np.repeat(luma[None], 3, axis=0).astype(img.dtype)


def sample_pair(dataset: list[Sequence], rng: np.random.Generator, config: TrainConfig) -> Pair:
    usable = [s for s in dataset if len(s) >= 2]
    if not usable:
        raise ValueError("dataset has no sequence with at least 2 frames")
    seq = usable[int(rng.integers(len(usable)))]
    n = len(seq)
    i = int(rng.integers(n))
    lo, hi = max(0, i - config.max_frame_gap), min(n - 1, i + config.max_frame_gap)
    j = int(rng.integers(lo, hi))
    j = j + 1 if j >= i else j  # nearby frame, never the same one
    fz, fx = seq.frames[i], seq.frames[j]
    bz, bx = seq.boxes[i], seq.boxes[j]
    z = crop_and_resize(fz, bz.cx, bz.cy, context_side(bz.w, bz.h), en.EXEMPLAR_SIZE)
    side_x = context_side(bx.w, bx.h) * en.SEARCH_SIZE / en.EXEMPLAR_SIZE
    x = crop_and_resize(fx, bx.cx, bx.cy, side_x, en.SEARCH_SIZE)
    if rng.random() < config.grayscale_prob:
        z, x = to_grayscale(z), to_grayscale(x)
    c = en.SEARCH_SIZE / 2
    return Pair(z, x, (c, c))


def sample_pairs(dataset: list[Sequence], rng: np.random.Generator, config: TrainConfig, n: int) -> list[Pair]:
    usable = [s for s in dataset if len(s) >= 2]
    return [sample_pair(usable, rng, config) for _ in range(n)]


@dataclass
class StepStats:
    loss: float
    l1: float
    l2: float


def loss_and_grads(
    net: EmbedNet,
    weights: LossWeights,
    exemplars: np.ndarray,
    searches: np.ndarray,
    config: TrainConfig,
) -> tuple[float, list[np.ndarray], float, np.ndarray, StepStats]:
    """Mean loss over the batch and its gradients.

    Returns ``(loss, d_params, d_score_bias, d_loss_weights, stats)``.
    """
    zf, zcache = en.forward(net, exemplars)
    xf, xcache = en.forward(net, searches)
    v = score_map(net, zf, xf)  # (B, m, m)
    b, m = v.shape[0], v.shape[-1]
    y = hm.build_label_map(m, config.radius)
    init_w = hm.init_balance_weights(y) if config.pair_weighting == "balanced" else hm.uniform_weights(y)
    dv = np.zeros(v.shape, dtype=np.float64)
    dwbar = np.zeros(2)
    total = l1_sum = l2_sum = 0.0
    for k in range(b):
        vk = v[k].astype(np.float64)
        if not np.isfinite(vk).all():
            raise DivergenceError("non-finite score map")
        # precompute phase: weights and hard pair from the current scores
        w = hm.adapt_weights(vk, y, init_w) if config.adapts_weights else init_w
        l1, g1 = ls.pair_loss(vk, y, w)
        if not config.uses_triplet:
            total += l1
            l1_sum += l1
            dv[k] = g1
            continue
        pick = hm.select_hard_pair(vk, y, "tracking")
        f_plus, f_minus = float(vk[pick.pos_index]), float(vk[pick.neg_index])
        if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
            raise DivergenceError(f"non-finite triplet scores {f_plus}, {f_minus}")
        trip = ls.triplet_loss(f_plus, f_minus)
        comb = ls.combine_loss(l1, trip.loss, weights)
        dv[k] = comb.d_l1 * g1
        dv[k][pick.pos_index] += comb.d_l2 * trip.d_plus
        dv[k][pick.neg_index] += comb.d_l2 * trip.d_minus
        dwbar += (comb.d_w1, comb.d_w2)
        total += comb.loss
        l1_sum += l1
        l2_sum += trip.loss
    loss = total / b
    if not math.isfinite(loss):
        raise DivergenceError(f"non-finite training loss {loss}")
    dv = (dv / b).astype(net.dtype)
    dz, dx, db = score_map_grad(dv, zf, xf)
    gz = en.backward(net, zcache, dz)
    gx = en.backward(net, xcache, dx)
    grads = [a + c for a, c in zip(gz, gx)]
    return loss, grads, db, dwbar / b, StepStats(loss, l1_sum / b, l2_sum / b)


@dataclass
class SGDState:
    velocity: list[np.ndarray]
    bias_velocity: float = 0.0
    weight_velocity: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def zeros_like(cls, net: EmbedNet) -> "SGDState":
        return cls([np.zeros_like(p) for p in net.params])


def train_step(
    net: EmbedNet,
    weights: LossWeights,
    pairs: list[Pair],
    config: TrainConfig,
    opt: SGDState,
    lr: float,
) -> tuple[EmbedNet, LossWeights, float]:
    """One precompute + forward/backward + momentum-SGD update on a batch of pairs."""
    z = np.stack([p.exemplar for p in pairs])
    x = np.stack([p.search for p in pairs])
    loss, grads, db, dwbar, _ = loss_and_grads(net, weights, z, x, config)
    if not all(np.isfinite(g).all() for g in grads) or not math.isfinite(db):
        raise DivergenceError("non-finite gradient")
    mu = config.momentum
    new_params = []
    for p, g, vel in zip(net.params, grads, opt.velocity):
        if config.weight_decay:
            g = g + config.weight_decay * p
        vel *= mu
        vel += g
        new_params.append((p - lr * vel).astype(p.dtype))
    opt.bias_velocity = mu * opt.bias_velocity + db
    new_net = net.with_params(new_params, net.score_bias - lr * opt.bias_velocity)
    if config.mode == "quad_learned":
        opt.weight_velocity = mu * opt.weight_velocity + dwbar
        w = weights.as_array() - lr * opt.weight_velocity
        weights = ls.clamp_weights(LossWeights(float(w[0]), float(w[1]), weights.threshold))
    return new_net, weights, loss


def peak_error(score: np.ndarray, target_center: tuple[float, float], stride: int, upsample: int = 16) -> float:
    """Distance (search pixels) from the upsampled score peak to ``target_center`` (x, y)."""
    m = score.shape[-1]
    r = tc.bicubic_matrix(m, m * upsample)
    up = r @ score.astype(np.float64) @ r.T
    peak = divmod(int(np.argmax(up)), up.shape[1])
    dy, dx = displacement(peak, up.shape[0], stride, upsample)
    c = en.SEARCH_SIZE / 2
    return math.hypot(c + dx - target_center[0], c + dy - target_center[1])


def validate(net: EmbedNet, pairs: list[Pair], upsample: int = 16, batch: int = 8) -> float:
    """Mean distance (search pixels) between the upsampled score peak and the true target center."""
    if not pairs:
        raise ValueError("validation needs at least one pair")
    errors = []
    stride = en.total_stride(net.specs)
    for start in range(0, len(pairs), batch):
        chunk = pairs[start:start + batch]
        zf = en.embed(net, np.stack([p.exemplar for p in chunk]))
        xf = en.embed(net, np.stack([p.search for p in chunk]))
        v = score_map(net, zf, xf)
        errors += [peak_error(vk, p.target_center, stride, upsample) for vk, p in zip(v, chunk)]
    return float(np.mean(errors))


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    train_loss: float
    val_error: float
    w1: float
    w2: float


@dataclass
class TrainReport:
    mode: str
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    final_weights: tuple[float, float] = (0.0, 0.0)
    weight_trajectory: list[tuple[float, float]] = field(default_factory=list)
    wall_clock: float = 0.0

    def to_lines(self) -> str:
        """JSON lines: one ``epoch`` record per epoch, then a ``summary`` record."""
        lines = [json.dumps({"type": "epoch", **asdict(r)}) for r in self.epochs]
        summary = {
            "type": "summary",
            "mode": self.mode,
            "best_epoch": self.best_epoch,
            "final_weights": list(self.final_weights),
            "min_weight": min((min(w) for w in self.weight_trajectory), default=None),
            "steps": len(self.weight_trajectory),
        }
        lines.append(json.dumps(summary))
        lines.append(json.dumps({"type": "timing", "wall_clock_s": round(self.wall_clock, 3)}))
        return "\n".join(lines) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_lines())


def train(
    dataset: list[Sequence],
    config: TrainConfig,
    net: EmbedNet | None = None,
) -> tuple[EmbedNet, LossWeights, TrainReport]:
    """Run ``config.epochs`` epochs and return the snapshot with the lowest validation error."""
    if not dataset:
        raise ValueError("empty dataset")
    skipped = sum(len(s) < 2 for s in dataset)
    if skipped:
        log.warning("skipping %d sequence(s) shorter than 2 frames", skipped)
    t0 = time.perf_counter()
    net = net if net is not None else en.init_params(config.specs(), config.seed)
    weights = LossWeights(config.w1, config.w2, config.threshold)
    opt = SGDState.zeros_like(net)
    report = TrainReport(config.mode)
    best = (math.inf, net, weights)
    for epoch in range(config.epochs):
        lr = learning_rate(config, epoch)
        # validation pairs come from their own stream; training pairs are drawn batch by batch
        n_val = max(1, int(round(config.validation_fraction * config.pairs_per_epoch)))
        val = sample_pairs(dataset, np.random.default_rng([config.seed, epoch, 1]), config, n_val)
        rng = np.random.default_rng([config.seed, epoch])
        n_train = max(1, config.pairs_per_epoch - n_val)
        losses = []
        for step, start in enumerate(range(0, n_train, config.batch_size)):
            batch = sample_pairs(dataset, rng, config, min(config.batch_size, n_train - start))
            try:
                net, weights, loss = train_step(net, weights, batch, config, opt, lr)
            except DivergenceError as exc:
                raise DivergenceError(f"epoch {epoch}, step {step}: {exc}") from None
            losses.append(loss)
            report.weight_trajectory.append((weights.w1, weights.w2))
        err = validate(net, val)
        rec = EpochRecord(epoch, lr, float(np.mean(losses)), err, weights.w1, weights.w2)
        report.epochs.append(rec)
        log.info("epoch %d lr %.2e loss %.4f val %.2fpx w=(%.3f, %.3f)", epoch, lr, rec.train_loss, err, weights.w1, weights.w2)
        if err < best[0]:
            best = (err, net, weights)
            report.best_epoch = epoch
    report.final_weights = (weights.w1, weights.w2)
    report.wall_clock = time.perf_counter() - t0
    return best[1], best[2], report
