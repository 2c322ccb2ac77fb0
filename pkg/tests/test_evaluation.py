import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
import synth
from cage import evaluation as ev
from cage.evaluation import Detection, GroundTruth


def test_iou_cases():
    assert ev.iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert ev.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert ev.iou((0, 0, 2, 2), (1, 0, 3, 2)) == pytest.approx(1 / 3, abs=1e-15)
    assert ev.iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0  # touching edges


def test_box_and_score_validation():
    with pytest.raises(ValueError):
        Detection("i", "c", (0, 0, 0, 1), 0.5)
    with pytest.raises(ValueError):
        Detection("i", "c", (0, 0, 1, 1), 1.5)
    with pytest.raises(ValueError):
        GroundTruth("i", "c", (2, 0, 1, 1))


def _d(box, s=1.0):
    return Detection("i", "c", box, s)


def _g(box, ignore=False):
    return GroundTruth("i", "c", box, ignore)


def test_match_cases():
    assert ev.match_detections([_d((0, 0, 2, 2))], [_g((0, 0, 2, 2))], 0.5) == [ev.TP]
    two = [_d((0, 0, 2, 2), 0.9), _d((0, 0, 2, 2), 0.8)]
    assert ev.match_detections(two, [_g((0, 0, 2, 2))], 0.5) == [ev.TP, ev.FP]
    # prefers the regular box over a better-overlapping ignored one
    flags = ev.match_detections([_d((0, 0, 2, 2))],
                                [_g((0, 0, 2, 2), ignore=True), _g((0, 0, 2, 2.5))], 0.5)
    assert flags == [ev.TP]
    flags = ev.match_detections([_d((0, 0, 2, 2))], [_g((0, 0, 2, 2), ignore=True)], 0.5)
    assert flags == [ev.IGNORED]


def test_ap_cases():
    assert ev.average_precision([ev.TP], [0.9], 1) == 1.0
    assert ev.average_precision([ev.FP], [0.9], 1) == 0.0
    assert ev.average_precision([ev.TP, ev.FP, ev.TP], [0.9, 0.8, 0.7], 2) == pytest.approx(
        253 / 303, abs=1e-12)
    assert ev.average_precision([], [], 0) is None
    assert ev.average_precision([ev.FP], [0.3], 0) == 0.0
    assert ev.average_precision([], [], 3) == 0.0


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_match_equals_exhaustive_search(seed):
    rng = np.random.default_rng(seed)
    gts = [synth._box(rng) for _ in range(rng.integers(1, 5))]
    ign = [bool(rng.random() < 0.25) for _ in gts]
    dets = [synth._box(rng, gts[rng.integers(len(gts))]) for _ in range(rng.integers(1, 6))]
    for thr in (0.3, 0.5, 0.75):
        got = ev.match_detections([_d(tuple(b)) for b in dets],
                                  [_g(tuple(b), i) for b, i in zip(gts, ign)], thr)
        assert got == oracles.brute_force_flags(dets, gts, ign, thr)


def test_perfect_and_empty():
    gts = [GroundTruth("a", "car", (0, 0, 5, 5)), GroundTruth("b", "bus", (1, 1, 9, 9))]
    dets = [Detection(g.image_id, g.category, g.bbox, 1.0) for g in gts]
    res = ev.evaluate(dets, gts)
    assert res.ap50 == 1.0 and res.map == 1.0
    res = ev.evaluate([], gts)
    assert res.ap50 == 0.0 and res.map == 0.0
    with pytest.raises(ev.EvaluationDomainError):
        ev.evaluate(dets, [])


def test_two_category_synthetic_set():
    gts = [("i1", "car", [0, 0, 10, 10], False), ("i1", "car", [20, 0, 30, 10], False),
           ("i1", "bus", [0, 20, 20, 40], False), ("i2", "car", [5, 5, 15, 15], False),
           ("i2", "bus", [30, 30, 50, 45], False), ("i2", "bus", [60, 60, 70, 70], True)]
    dets = [("i1", "car", [1, 0, 10, 11], 0.9), ("i1", "car", [0, 0, 10, 10], 0.8),
            ("i1", "bus", [2, 22, 20, 38], 0.7), ("i2", "car", [7, 7, 17, 17], 0.95),
            ("i2", "bus", [60, 60, 69, 70], 0.6), ("i2", "bus", [31, 30, 50, 47], 0.4)]
    d, g = synth.to_objects(dets, gts)
    res = ev.evaluate(d, g)
    ap50, m = oracles.brute_force_evaluate(dets, gts, 0.001)
    assert abs(res.ap50 - ap50) < 1e-10 and abs(res.map - m) < 1e-10


def test_score_floor_drops_first():
    gts = [GroundTruth("a", "car", (0, 0, 5, 5))]
    dets = [Detection("a", "car", (0, 0, 5, 5), 0.0005)]
    assert ev.evaluate(dets, gts).ap50 == 0.0
    assert ev.evaluate(dets, gts, score_floor=0.0).ap50 == 1.0


def test_category_vocabulary():
    gts = [GroundTruth("a", "car", (0, 0, 5, 5))]
    dets = [Detection("a", "car", (0, 0, 5, 5), 0.9)]
    res = ev.evaluate(dets, gts, categories=["car", "boat"])
    assert res.per_category["boat"] == [None] * 10 and res.ap50 == 1.0
    with pytest.raises(ValueError):
        ev.evaluate(dets, gts, categories=["boat"])
    # a category with detections but no ground truth scores 0
    stray = dets + [Detection("a", "boat", (0, 0, 5, 5), 0.9)]
    assert ev.evaluate(stray, gts).ap50 == 0.5


def test_max_dets():
    gts = [GroundTruth("a", "car", (0, 0, 5, 5))]
    dets = [Detection("a", "car", (20, 20, 25, 25), 0.9), Detection("a", "car", (0, 0, 5, 5), 0.8)]
    assert ev.evaluate(dets, gts, max_dets=1).ap50 == 0.0
    assert ev.evaluate(dets, gts).ap50 == 0.5


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_evaluate_properties(seed):
    rng = np.random.default_rng(seed)
    dets, gts = synth.micro_dataset(rng)
    d, g = synth.to_objects(dets, gts)
    res = ev.evaluate(d, g)
    ap50, m = oracles.brute_force_evaluate(dets, gts, 0.001)
    assert abs(res.ap50 - ap50) < 1e-10 and abs(res.map - m) < 1e-10
    # monotone score map: rank-only dependence
    d2 = [Detection(x.image_id, x.category, x.bbox, x.score ** 3) for x in d]
    res2 = ev.evaluate(d2, g, score_floor=0.001 ** 3)
    assert res2.ap50 == res.ap50 and res2.map == res.map
    # duplicating every detection cannot help
    res3 = ev.evaluate(d + d, g)
    assert res3.ap50 <= res.ap50 + 1e-12 and res3.map <= res.map + 1e-12
    # AP non-increasing in the IoU threshold, per category
    for aps in res.per_category.values():
        vals = [a for a in aps if a is not None]
        assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))


def test_read_jsonl(tmp_path, fixtures):
    dets = ev.read_jsonl(fixtures / "perfect_dets.jsonl", "det")
    gts = ev.read_jsonl(fixtures / "perfect_gts.jsonl", "gt")
    assert len(dets) == len(gts) == 5
    bad = tmp_path / "bad.jsonl"
    bad.write_text(json.dumps({"image_id": "a", "category": "c", "bbox": [0, 0, 1]}) + "\n")
    with pytest.raises(ValueError, match="bad.jsonl:1"):
        ev.read_jsonl(bad, "gt")


def test_result_dict_and_curves():
    gts = [GroundTruth("a", "car", (0, 0, 5, 5)), GroundTruth("a", "car", (10, 0, 15, 5))]
    dets = [Detection("a", "car", (0, 0, 5, 5), 0.9), Detection("a", "car", (30, 0, 35, 5), 0.5)]
    res = ev.evaluate(dets, gts)
    d = res.to_dict()
    assert d["AP50"] == res.ap50 and len(d["iou_thresholds"]) == 10
    rec, prec = res.curves["car"]
    np.testing.assert_allclose(rec, [0.5, 0.5])
    np.testing.assert_allclose(prec, [1.0, 0.5])
