"""OTB-style evaluation: precision/success curves and the OPE, SRE and TRE drivers."""
from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .data_io import Sequence
from .geometry import BoundingBox

PRECISION_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
SUCCESS_THRESHOLDS = np.round(np.arange(0, 21) * 0.05, 2)
REPORT_FORMAT = "quadtrack-eval/1"

TrackerFn = Callable[[object, BoundingBox], list[BoundingBox]]


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ix = max(0.0, min(a.x + a.w, b.x + b.w) - max(a.x, b.x))
    iy = max(0.0, min(a.y + a.h, b.y + b.h) - max(a.y, b.y))
    inter = ix * iy
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


def center_error(a: BoundingBox, b: BoundingBox) -> float:
    return math.hypot(a.cx - b.cx, a.cy - b.cy)


@dataclass
class Curves:
    precision: np.ndarray  # over PRECISION_THRESHOLDS
    success: np.ndarray  # over SUCCESS_THRESHOLDS
    mean_iou: float
    frames: int

    @property
    def precision_at_20(self) -> float:
        return float(self.precision[20])

    @property
    def success_at_05(self) -> float:
        return float(self.success[10])

    @property
    def auc(self) -> float:
        return float(self.success.mean())

    def headline(self) -> dict[str, float]:
        return {
            "precision@20": self.precision_at_20,
            "success@0.5": self.success_at_05,
            "auc": self.auc,
            "mean_iou": self.mean_iou,
        }


def curves(pred: list[BoundingBox], gt: list[BoundingBox]) -> Curves:
    """Precision counts ``error <= t``; success counts ``IoU > tau`` (strict)."""
    if len(pred) != len(gt):
        raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth boxes")
    if not gt:
        raise ValueError("cannot score an empty trajectory")
    err = np.array([center_error(p, g) for p, g in zip(pred, gt)])
    ov = np.array([iou(p, g) for p, g in zip(pred, gt)])
    precision = (err[None, :] <= PRECISION_THRESHOLDS[:, None]).mean(axis=1)
    success = (ov[None, :] > SUCCESS_THRESHOLDS[:, None]).mean(axis=1)
    return Curves(precision, success, float(ov.mean()), len(gt))


def mean_curves(items: list[Curves], weights: list[float] | None = None) -> Curves:
    """Weighted average; weights are applied unnormalized and divided out once at the end."""
    if not items:
        raise ValueError("nothing to average")
    if len(items) == 1:
        return items[0]
    w = np.ones(len(items)) if weights is None else np.asarray(weights, dtype=np.float64)
    total = w.sum()
    return Curves(
        np.sum([wi * c.precision for wi, c in zip(w, items)], axis=0) / total,
        np.sum([wi * c.success for wi, c in zip(w, items)], axis=0) / total,
        float(np.sum([wi * c.mean_iou for wi, c in zip(w, items)]) / total),
        sum(c.frames for c in items),
    )


@dataclass
class EvalResult:
    protocol: str
    aggregate: Curves
    per_sequence: dict[str, Curves] = field(default_factory=dict)
    runs: int = 0
    fps: float | None = None


class _Timed:
    def __init__(self, tracker: TrackerFn):
        self.tracker = tracker
        self.frames = 0
        self.seconds = 0.0

    def __call__(self, frames, box):
        t = time.perf_counter()
        out = self.tracker(frames, box)
        self.seconds += time.perf_counter() - t
        self.frames += len(frames)
        return out

    @property
    def fps(self) -> float | None:
        return self.frames / self.seconds if self.seconds > 0 else None


def _map(fn, items, threads: int):
    if threads > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))  # results keep input order
    return [fn(i) for i in items]


def _finish(protocol: str, per_seq: dict[str, Curves], runs: int, timer: _Timed) -> EvalResult:
    return EvalResult(protocol, mean_curves(list(per_seq.values())), per_seq, runs, timer.fps)


def run_ope(tracker: TrackerFn, sequences: list[Sequence], threads: int = 1) -> EvalResult:
    """One run per sequence from the first-frame ground truth."""
    if not sequences:
        raise ValueError("no sequences to evaluate")
    timer = _Timed(tracker)
    per = _map(lambda s: curves(timer(s.frames, s.boxes[0]), s.boxes), sequences, threads)
    return _finish("ope", {s.name: c for s, c in zip(sequences, per)}, len(sequences), timer)


def _clamp_inside(b: BoundingBox, width: int, height: int) -> BoundingBox:
    w, h = min(b.w, width), min(b.h, height)
    x = min(max(b.x, 0.0), width - w)
    y = min(max(b.y, 0.0), height - h)
    return BoundingBox(x, y, w, h)


def sre_perturbations(box: BoundingBox, width: int, height: int) -> list[BoundingBox]:
    """8 shifts by 10% of the box size (axes and diagonals) and 4 rescalings about the center."""
    out = []
    for dx, dy in ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (1, -1), (-1, 1), (1, 1)):
        out.append(BoundingBox(box.x + 0.1 * dx * box.w, box.y + 0.1 * dy * box.h, box.w, box.h))
    for s in (0.8, 0.9, 1.1, 1.2):
        out.append(BoundingBox.from_center(box.cx, box.cy, box.w * s, box.h * s))
    return [_clamp_inside(b, width, height) for b in out]


def run_sre(tracker: TrackerFn, sequences: list[Sequence], threads: int = 1) -> EvalResult:
    if not sequences:
        raise ValueError("no sequences to evaluate")
    timer = _Timed(tracker)

    def one(seq: Sequence) -> Curves:
        first = seq.frames[0]
        height, width = first.shape[-2:]
        runs = [curves(timer(seq.frames, b), seq.boxes) for b in sre_perturbations(seq.boxes[0], width, height)]
        return mean_curves(runs)

    per = _map(one, sequences, threads)
    return _finish("sre", {s.name: c for s, c in zip(sequences, per)}, 12 * len(sequences), timer)


def tre_starts(n_frames: int, segments: int = 20) -> list[int]:
    return sorted({(k * n_frames) // segments for k in range(segments)})


def run_tre(tracker: TrackerFn, sequences: list[Sequence], threads: int = 1, segments: int = 20) -> EvalResult:
    """Restart from ``segments`` evenly spaced frames; curves weighted by segment length."""
    if not sequences:
        raise ValueError("no sequences to evaluate")
    timer = _Timed(tracker)

    def one(seq: Sequence) -> tuple[Curves, int]:
        runs, lengths = [], []
        for start in tre_starts(len(seq), segments):
            frames = seq.frames[start:]
            runs.append(curves(timer(frames, seq.boxes[start]), seq.boxes[start:]))
            lengths.append(len(seq) - start)
        return mean_curves(runs, lengths), len(runs)

    per = _map(one, sequences, threads)
    return _finish("tre", {s.name: c for s, (c, _) in zip(sequences, per)}, sum(n for _, n in per), timer)


PROTOCOLS = {"ope": run_ope, "sre": run_sre, "tre": run_tre}


def _curves_json(c: Curves) -> dict:
    return {
        **c.headline(),
        "frames": c.frames,
        "precision_curve": {"thresholds": PRECISION_THRESHOLDS.tolist(), "values": c.precision.tolist()},
        "success_curve": {"thresholds": SUCCESS_THRESHOLDS.tolist(), "values": c.success.tolist()},
    }


def report(results: dict[str, EvalResult], path: str | Path | None = None, extra: dict | None = None) -> dict:
    """Structured (JSON) report keyed by tracker name; timing lives in its own block."""
    doc: dict = {"format": REPORT_FORMAT, "trackers": {}, "timing": {}}
    for name, r in results.items():
        doc["trackers"][name] = {
            "protocol": r.protocol,
            "runs": r.runs,
            **_curves_json(r.aggregate),
            "sequences": {k: _curves_json(v) for k, v in r.per_sequence.items()},
        }
        doc["timing"][name] = {"fps": r.fps}
    if extra:
        doc.update(extra)
    if path is not None:
        write_report(doc, path)
    return doc


def write_report(doc: dict, path: str | Path) -> None:
    Path(path).write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _curves_from_json(d: dict) -> Curves:
    return Curves(
        np.array(d["precision_curve"]["values"]),
        np.array(d["success_curve"]["values"]),
        d["mean_iou"],
        d["frames"],
    )


def load_report(path: str | Path) -> dict[str, EvalResult]:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != REPORT_FORMAT:
        raise ValueError(f"{path}: not a {REPORT_FORMAT} report")
    out = {}
    for name, t in doc["trackers"].items():
        out[name] = EvalResult(
            t["protocol"],
            _curves_from_json(t),
            {k: _curves_from_json(v) for k, v in t["sequences"].items()},
            t["runs"],
            doc.get("timing", {}).get(name, {}).get("fps"),
        )
    return out
