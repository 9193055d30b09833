"""Train every loss mode on the same data and compare them under OPE against a static box."""
from __future__ import annotations

import logging
from dataclasses import replace

from . import eval_bench as eb
from .data_io import Sequence
from .track_engine import Tracker, static_tracker
from .train_engine import MODES, TrainConfig, TrainReport, train

log = logging.getLogger(__name__)


def split(dataset: list[Sequence], test_sequences: int) -> tuple[list[Sequence], list[Sequence]]:
    """The last ``test_sequences`` sequences are held out for evaluation."""
    if not 0 < test_sequences < len(dataset):
        raise ValueError(f"cannot hold out {test_sequences} of {len(dataset)} sequences")
    return dataset[:-test_sequences], dataset[-test_sequences:]


def run_ablation(
    train_set: list[Sequence],
    test_set: list[Sequence],
    config: TrainConfig,
    modes: tuple[str, ...] = MODES,
    threads: int = 1,
    models: dict | None = None,
) -> tuple[dict[str, eb.EvalResult], dict[str, TrainReport]]:
    """Train and evaluate each mode; trained nets are stored in ``models`` when given."""
    results: dict[str, eb.EvalResult] = {}
    reports: dict[str, TrainReport] = {}
    for mode in modes:
        net, _, rep = train(train_set, replace(config, mode=mode))
        reports[mode] = rep
        if models is not None:
            models[mode] = net
        results[mode] = eb.run_ope(Tracker(net, name=mode), test_set, threads)
        log.info("%s: mean IoU %.3f", mode, results[mode].aggregate.mean_iou)
    results["static"] = eb.run_ope(static_tracker, test_set, threads)
    return results, reports


def ablation_report(results: dict[str, eb.EvalResult], reports: dict[str, TrainReport], path=None) -> dict:
    training = {
        mode: {
            "final_weights": list(r.final_weights),
            "min_weight": min((min(w) for w in r.weight_trajectory), default=None),
            "val_error": [e.val_error for e in r.epochs],
        }
        for mode, r in reports.items()
    }
    modes = {k: v for k, v in results.items() if k in reports}
    baselines = {k: v for k, v in results.items() if k not in reports}
    ranking = sorted(results, key=lambda k: -results[k].aggregate.mean_iou)
    # baselines get their own block so the tracker table holds exactly the trained modes
    base_doc = eb.report(baselines)
    extra = {
        "baselines": base_doc["trackers"],
        "training": training,
        "ranking_by_mean_iou": ranking,
    }
    doc = eb.report(modes, None, extra)
    doc["timing"].update(base_doc["timing"])
    if path is not None:
        eb.write_report(doc, path)
    return doc
