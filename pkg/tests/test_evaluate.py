import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autolabel.evaluate import (
    DEFAULT_IOU,
    MODE_3D,
    average_precision,
    evaluation_report,
    interpolated_ap,
    match_frame,
    pr_by_range,
)
from autolabel.geometry import PEDESTRIAN, VEHICLE, Box3D, iou_3d
from oracles import brute_match, exhaustive_ap, random_box


def vbox(x, y=0.0, score=0.9, cls=VEHICLE):
    dims = (4.0, 2.0, 1.5) if cls == VEHICLE else (0.7, 0.6, 1.7)
    return Box3D(x, y, 0.0, *dims, 0.0, score=score, class_label=cls)


def test_perfect_predictions():
    gts = [vbox(10.0 * k, 3.0) for k in range(5)]
    m = match_frame(gts, gts)
    assert len(m.tp) == 5 and m.fp == [] and m.fn == []
    table = pr_by_range(gts, gts)
    for row in table[VEHICLE].values():
        if row["n_gt"]:
            assert row["precision"] == 1.0 and row["recall"] == 1.0
    assert average_precision(gts, gts, cls=VEHICLE) == 1.0


def test_one_pred_no_gt():
    m = match_frame([vbox(0)], [])
    assert m.fp == [0] and m.tp == [] and m.fn == []


def test_no_predictions():
    table = pr_by_range([], [vbox(5.0)])
    row = table[VEHICLE]["0-30"]
    assert row["recall"] == 0.0 and row["precision"] is None
    assert table[PEDESTRIAN]["0-30"]["recall"] is None


def test_class_must_match():
    m = match_frame([vbox(0, cls=PEDESTRIAN)], [vbox(0)])
    assert m.fp == [0] and m.fn == [0]


def test_constructed_bin_fixture():
    # 8 TP, 2 FP, 2 FN, all within 30 m
    gts = [vbox(3.0 * k - 12.0, 10.0) for k in range(10)]
    preds = [vbox(g.cx, g.cy) for g in gts[:8]] + [vbox(5.0, -20.0), vbox(-5.0, -20.0)]
    row = pr_by_range(preds, gts)[VEHICLE]["0-30"]
    assert (row["precision"], row["recall"]) == (0.8, 0.8)


def test_matching_matches_brute_force():
    rng = np.random.default_rng(12)
    for _ in range(50):
        gts = [random_box(rng, spread=6.0) for _ in range(30)]
        preds = [random_box(rng, spread=6.0) for _ in range(30)]
        thr = {VEHICLE: 0.3, PEDESTRIAN: 0.2}
        m = match_frame(preds, gts, thr)
        assert (m.tp, m.fp, m.fn) == brute_match(preds, gts, thr)
        m3 = match_frame(preds, gts, thr, MODE_3D)
        assert (m3.tp, m3.fp, m3.fn) == brute_match(preds, gts, thr, iou_3d)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_bin_counts_conserve_boxes(seed):
    rng = np.random.default_rng(seed)
    frames_p = {f: [random_box(rng, spread=60.0) for _ in range(15)] for f in range(3)}
    frames_g = {f: [random_box(rng, spread=60.0) for _ in range(15)] for f in range(3)}
    bins = ((0.0, 30.0), (30.0, 50.0), (50.0, 1e9))
    table = pr_by_range(frames_p, frames_g, bins=bins, iou_thresh={VEHICLE: 0.1, PEDESTRIAN: 0.1})
    for cls in (VEHICLE, PEDESTRIAN):
        n_pred = sum(b.class_label == cls for v in frames_p.values() for b in v)
        n_gt = sum(b.class_label == cls for v in frames_g.values() for b in v)
        assert sum(r["tp_pred"] + r["fp"] for r in table[cls].values()) == n_pred
        assert sum(r["tp_gt"] + r["fn"] for r in table[cls].values()) == n_gt


def _ap_fixture():
    # GT at 5 places; predictions: TP .9, TP .8, FP .7, TP .6, TP .5 (one GT missed)
    gts = [vbox(10.0 * k, 0.0) for k in range(5)]
    preds = [vbox(0.0, 0.0, 0.9), vbox(10.0, 0.0, 0.8), vbox(0.0, 15.0, 0.7), vbox(20.0, 0.0, 0.6),
             vbox(30.0, 0.0, 0.5)]
    return preds, gts


def test_ap_hand_fixture():
    preds, gts = _ap_fixture()
    scored = [(0.9, True), (0.8, True), (0.7, False), (0.6, True), (0.5, True)]
    expected = exhaustive_ap(scored, 5)
    assert expected == pytest.approx(0.72, abs=1e-12)
    assert abs(average_precision(preds, gts, cls=VEHICLE) - expected) <= 1e-9


def test_ap_zero_tp_and_empty():
    assert average_precision([vbox(50.0)], [vbox(0.0)], cls=VEHICLE) == 0.0
    assert average_precision([], [vbox(0.0)], cls=VEHICLE) == 0.0
    assert average_precision([vbox(0.0)], [], cls=VEHICLE) == 0.0


def test_ap_equal_scores_form_one_operating_point():
    gts = [vbox(0.0), vbox(10.0)]
    preds = [vbox(0.0, score=0.5), vbox(40.0, score=0.5), vbox(10.0, score=0.5)]
    assert average_precision(preds, gts, cls=VEHICLE) == pytest.approx(2.0 / 3.0)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0.01, 1.0), st.booleans()), min_size=1, max_size=12), st.integers(0, 4))
def test_interpolated_ap_matches_exhaustive(scored, extra_gt):
    n_gt = sum(t for _, t in scored) + extra_gt
    if n_gt == 0:
        return
    scores = np.array([s for s, _ in scored])
    hits = np.array([t for _, t in scored], dtype=float)
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    last = np.r_[scores[1:] != scores[:-1], True]
    tp, fp = np.cumsum(hits)[last], np.cumsum(1 - hits)[last]
    got = interpolated_ap(tp / n_gt, tp / (tp + fp))
    assert got == pytest.approx(exhaustive_ap(scored, n_gt), abs=1e-12)


def test_swap_tp_below_fp_does_not_raise_ap():
    preds, gts = _ap_fixture()
    base = average_precision(preds, gts, cls=VEHICLE)
    swapped = list(preds)
    swapped[0], swapped[2] = preds[0].with_(score=0.7), preds[2].with_(score=0.9)
    assert average_precision(swapped, gts, cls=VEHICLE) <= base


def test_tiny_threshold_full_coverage_gives_one():
    gts = [vbox(10.0 * k) for k in range(4)]
    preds = [vbox(10.0 * k + 1.0, score=0.5 + 0.1 * k) for k in range(4)]
    assert average_precision(preds, gts, iou_thresh=1e-9, cls=VEHICLE) == 1.0


def test_report_structure():
    rep = evaluation_report({0: [vbox(5.0)]}, {0: [vbox(5.0)]})
    assert set(rep) == {"pr_by_range", "ap_bev", "ap_3d"}
    assert rep["ap_bev"][VEHICLE] == 1.0 and rep["ap_3d"][VEHICLE] == 1.0
    assert DEFAULT_IOU[VEHICLE] == 0.7
