import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from quadtrack import eval_bench as eb
from quadtrack.data_io import Sequence
from quadtrack.geometry import BoundingBox

B = BoundingBox
boxes = st.builds(B, st.floats(-50, 50), st.floats(-50, 50), st.floats(0.5, 60), st.floats(0.5, 60))


def brute_force(pred, gt):
    """Per-threshold loops over exact rationals."""
    err = [eb.center_error(p, g) for p, g in zip(pred, gt)]
    ov = [eb.iou(p, g) for p, g in zip(pred, gt)]
    n = len(gt)
    prec = [Fraction(sum(e <= t for e in err), n) for t in range(51)]
    succ = [Fraction(sum(o > k / 20 for o in ov), n) for k in range(21)]
    return prec, succ


def still_sequence(name, n, box=B(10, 10, 20, 20), size=100):
    frame = np.zeros((3, size, size), np.float32)
    return Sequence(name, [frame] * n, [box] * n)


class Recorder:
    """Static tracker that logs every call."""

    def __init__(self):
        self.calls = []

    def __call__(self, frames, box):
        self.calls.append((len(frames), box))
        return [box] * len(frames)


# ---------------------------------------------------------------- metrics

def test_iou_examples():
    assert eb.iou(B(0, 0, 10, 10), B(0, 0, 10, 10)) == 1.0
    assert eb.iou(B(0, 0, 10, 10), B(20, 20, 5, 5)) == 0.0
    assert eb.iou(B(0, 0, 10, 10), B(5, 5, 10, 10)) == pytest.approx(25 / 175)


def test_iou_one_seventh():
    assert eb.iou(B(0, 0, 2, 2), B(1, 1, 2, 2)) == pytest.approx(1 / 7)


def test_center_error_three_four_five():
    assert eb.center_error(B(0, 0, 4, 4), B(3, 4, 4, 4)) == 5.0


@given(a=boxes, b=boxes)
def test_iou_symmetric_and_bounded(a, b):
    v = eb.iou(a, b)
    assert v == eb.iou(b, a) and 0.0 <= v <= 1.0 + 1e-12


def test_curves_half_right():
    gt = [B(0, 0, 10, 10)] * 2
    c = eb.curves([B(0, 0, 10, 10), B(100, 100, 10, 10)], gt)
    assert c.precision_at_20 == 0.5 and c.success_at_05 == 0.5
    assert c.auc == pytest.approx(10 / 21, abs=1e-15)


def test_curves_shifted_by_half_width():
    c = eb.curves([B(5, 0, 10, 10)], [B(0, 0, 10, 10)])  # error 5, IoU 1/3
    assert c.precision[4] == 0 and c.precision[5] == 1 and c.precision_at_20 == 1
    assert c.success_at_05 == 0
    assert c.auc == pytest.approx(7 / 21, abs=1e-15)


def test_curves_mixed_three_frames():
    gt = [B(0, 0, 10, 10), B(0, 0, 10, 10), B(0, 0, 20, 20)]
    pred = [B(0, 0, 10, 10), B(5, 0, 10, 10), B(0, 0, 10, 10)]  # IoU 1, 1/3, 1/4
    c = eb.curves(pred, gt)
    assert c.precision_at_20 == 1.0
    assert c.success_at_05 == pytest.approx(1 / 3, abs=1e-15)
    assert c.auc == pytest.approx(32 / 63, abs=1e-15)


def test_curves_perfect_prediction_strict_overlap():
    gt = [B(i, 2 * i, 10, 12) for i in range(5)]
    c = eb.curves(gt, gt)
    assert np.all(c.precision == 1)
    # IoU > 1 never holds, so the last success threshold is always 0
    assert np.all(c.success[:-1] == 1) and c.success[-1] == 0
    assert c.auc == pytest.approx(20 / 21, abs=1e-15)


@given(data=st.lists(st.tuples(boxes, boxes), min_size=1, max_size=12))
def test_curves_match_brute_force(data):
    pred, gt = zip(*data)
    c = eb.curves(list(pred), list(gt))
    prec, succ = brute_force(pred, gt)
    np.testing.assert_allclose(c.precision, [float(p) for p in prec], rtol=0, atol=1e-15)
    np.testing.assert_allclose(c.success, [float(s) for s in succ], rtol=0, atol=1e-15)


@given(data=st.lists(st.tuples(boxes, boxes), min_size=1, max_size=12))
def test_curves_monotone(data):
    pred, gt = zip(*data)
    c = eb.curves(list(pred), list(gt))
    assert np.all(np.diff(c.precision) >= 0) and np.all(np.diff(c.success) <= 0)
    assert 0 <= c.auc <= 1


def test_curves_reject_mismatch_and_empty():
    with pytest.raises(ValueError):
        eb.curves([B(0, 0, 1, 1)], [])
    with pytest.raises(ValueError):
        eb.curves([], [])


def test_mean_curves_weighted():
    a = eb.curves([B(0, 0, 10, 10)], [B(0, 0, 10, 10)])
    b = eb.curves([B(100, 0, 10, 10)], [B(0, 0, 10, 10)])
    m = eb.mean_curves([a, b], [3, 1])
    assert m.precision_at_20 == 0.75 and m.frames == 2


def test_mean_curves_of_equal_items_is_exact():
    a = eb.curves([B(0, 0, 10, 10)] * 3, [B(0, 0, 10, 10)] * 3)
    assert eb.mean_curves([a] * 7).precision_at_20 == 1.0


# ---------------------------------------------------------------- protocols

def test_ope_perfect_tracker():
    seqs = [still_sequence("a", 5), still_sequence("b", 3)]
    rec = Recorder()
    r = eb.run_ope(rec, seqs)
    assert r.runs == 2 and len(rec.calls) == 2
    assert r.aggregate.precision_at_20 == 1.0 and r.aggregate.success_at_05 == 1.0
    assert set(r.per_sequence) == {"a", "b"}
    assert r.fps is None or r.fps > 0


def test_ope_threads_preserve_results():
    seqs = [still_sequence(f"s{i}", 4 + i) for i in range(5)]
    a = eb.run_ope(eb_static, seqs, threads=1)
    b = eb.run_ope(eb_static, seqs, threads=3)
    assert list(a.per_sequence) == list(b.per_sequence)
    np.testing.assert_array_equal(a.aggregate.success, b.aggregate.success)


def eb_static(frames, box):
    return [box] * len(frames)


def test_sre_twelve_runs_per_sequence():
    rec = Recorder()
    box = B(10, 10, 20, 20)
    r = eb.run_sre(rec, [still_sequence("a", 4, box)])
    assert r.runs == 12 and len(rec.calls) == 12
    inits = [b for _, b in rec.calls]
    assert inits[:8] == [B(8, 10, 20, 20), B(12, 10, 20, 20), B(10, 8, 20, 20), B(10, 12, 20, 20),
                         B(8, 8, 20, 20), B(12, 8, 20, 20), B(8, 12, 20, 20), B(12, 12, 20, 20)]
    for s, b in zip((0.8, 0.9, 1.1, 1.2), inits[8:]):
        assert (b.cx, b.cy, b.w) == pytest.approx((box.cx, box.cy, 20 * s))


def test_sre_perturbations_stay_inside_frame():
    for b in eb.sre_perturbations(B(0, 0, 30, 30), 32, 32):
        assert b.x >= 0 and b.y >= 0 and b.x + b.w <= 32 + 1e-9 and b.y + b.h <= 32 + 1e-9


def test_tre_twenty_runs_of_decreasing_length():
    rec = Recorder()
    r = eb.run_tre(rec, [still_sequence("a", 20)])
    assert r.runs == 20
    assert [n for n, _ in rec.calls] == list(range(20, 0, -1))


def test_tre_short_sequence_deduplicates_starts():
    assert eb.tre_starts(5) == [0, 1, 2, 3, 4]
    assert eb.tre_starts(40)[:3] == [0, 2, 4] and len(eb.tre_starts(40)) == 20


def test_tre_weights_by_segment_length():
    # a tracker that is right throughout only when started at frame 0
    seq = Sequence("a", [np.zeros((3, 50, 50), np.float32)] * 4, [B(i, 0, 10, 10) for i in range(4)])

    def tracker(frames, box):
        return seq.boxes if len(frames) == 4 else [box] + [B(40, 40, 5, 5)] * (len(frames) - 1)

    r = eb.run_tre(tracker, [seq], segments=4)
    # runs of length 4, 3, 2, 1; only the first frame of each later run is correct
    expected = (4 * 1 + 3 * (1 / 3) + 2 * (1 / 2) + 1 * 1) / 10
    assert r.aggregate.precision_at_20 == pytest.approx(expected)


@pytest.mark.parametrize("name", ["ope", "sre", "tre"])
def test_protocol_registry_rejects_empty(name):
    with pytest.raises(ValueError):
        eb.PROTOCOLS[name](eb_static, [])


# ---------------------------------------------------------------- report

def test_report_round_trip(tmp_path):
    seqs = [still_sequence("a", 5), still_sequence("b", 3)]
    results = {"static": eb.run_ope(eb_static, seqs), "recorder": eb.run_ope(Recorder(), seqs)}
    doc = eb.report(results, tmp_path / "r.json")
    assert json.loads((tmp_path / "r.json").read_text()) == json.loads(json.dumps(doc))
    back = eb.load_report(tmp_path / "r.json")
    assert set(back) == {"static", "recorder"}
    for k in results:
        np.testing.assert_array_equal(back[k].aggregate.success, results[k].aggregate.success)
        assert back[k].runs == results[k].runs and back[k].protocol == "ope"


def test_report_headline_fields():
    doc = eb.report({"t": eb.run_ope(eb_static, [still_sequence("a", 3)])})
    entry = doc["trackers"]["t"]
    for key in ("precision@20", "success@0.5", "auc", "mean_iou", "runs", "precision_curve", "success_curve"):
        assert key in entry
    assert entry["precision_curve"]["thresholds"] == list(range(51))
    assert "fps" in doc["timing"]["t"]


def test_load_report_rejects_foreign_json(tmp_path):
    (tmp_path / "x.json").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        eb.load_report(tmp_path / "x.json")
