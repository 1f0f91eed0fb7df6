"""Matching, range-binned precision/recall and 40-point interpolated AP."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .geometry import CLASSES, PEDESTRIAN, VEHICLE, Box3D, bev_iou, candidate_pairs, iou_3d

BEV = "BEV"
MODE_3D = "3D"
DEFAULT_BINS = ((0.0, 30.0), (30.0, 50.0), (50.0, 80.0))
DEFAULT_IOU = {VEHICLE: 0.7, PEDESTRIAN: 0.5}
N_RECALL_POINTS = 40


def _iou_fn(mode: str):
    if mode == BEV:
        return bev_iou
    if mode == MODE_3D:
        return iou_3d
    raise ValueError(f"unknown IoU mode {mode!r}")


def _thresh(iou_thresh, cls: str) -> float:
    return iou_thresh[cls] if isinstance(iou_thresh, Mapping) else float(iou_thresh)


@dataclass
class FrameMatch:
    tp: list[tuple[int, int]]  # (pred index, gt index)
    fp: list[int]
    fn: list[int]


def match_frame(preds: Sequence[Box3D], gts: Sequence[Box3D], iou_thresh=None, mode: str = BEV) -> FrameMatch:
    """Greedy matching in descending prediction score.

    Each prediction takes the unmatched same-class GT with the highest IoU, if
    that IoU reaches the class threshold.
    """
    iou_thresh = DEFAULT_IOU if iou_thresh is None else iou_thresh
    fn_iou = _iou_fn(mode)
    cand: dict[int, list[int]] = {}
    for i, j in candidate_pairs(preds, gts):
        if preds[i].class_label == gts[j].class_label:
            cand.setdefault(int(i), []).append(int(j))
    taken = set()
    tp, fp = [], []
    for i in sorted(range(len(preds)), key=lambda k: (-preds[k].score, k)):
        thr = _thresh(iou_thresh, preds[i].class_label)
        best, best_iou = None, -1.0
        for j in cand.get(i, []):
            if j in taken:
                continue
            v = fn_iou(preds[i], gts[j])
            if v >= thr and v > best_iou:
                best, best_iou = j, v
        if best is None:
            fp.append(i)
        else:
            taken.add(best)
            tp.append((i, best))
    fn = [j for j in range(len(gts)) if j not in taken]
    return FrameMatch(tp, fp, fn)


def _as_frames(boxes) -> dict:
    if isinstance(boxes, Mapping):
        return dict(boxes)
    return {0: list(boxes)}


def _bin_of(box: Box3D, bins) -> int | None:
    r = box.bev_range
    for k, (lo, hi) in enumerate(bins):
        if lo <= r < hi:
            return k
    return None


def bin_label(b) -> str:
    return f"{b[0]:g}-{b[1]:g}"


def pr_by_range(preds, gts, bins=DEFAULT_BINS, iou_thresh=None, mode: str = BEV) -> dict:
    """Precision/recall per class and range bin.

    ``preds``/``gts`` are per-frame mappings (or a single frame's list). Predictions
    are binned by their own range and GTs by theirs, so TP+FP equals the
    predictions in a bin and TP+FN the GTs in it. Empty denominators yield ``None``.
    """
    preds, gts = _as_frames(preds), _as_frames(gts)
    counts = {c: [dict(tp_pred=0, fp=0, tp_gt=0, fn=0) for _ in bins] for c in CLASSES}
    for fid in sorted(set(preds) | set(gts)):
        p, g = preds.get(fid, []), gts.get(fid, [])
        m = match_frame(p, g, iou_thresh, mode)
        for i, j in m.tp:
            kb = _bin_of(p[i], bins)
            if kb is not None:
                counts[p[i].class_label][kb]["tp_pred"] += 1
            kb = _bin_of(g[j], bins)
            if kb is not None:
                counts[g[j].class_label][kb]["tp_gt"] += 1
        for i in m.fp:
            kb = _bin_of(p[i], bins)
            if kb is not None:
                counts[p[i].class_label][kb]["fp"] += 1
        for j in m.fn:
            kb = _bin_of(g[j], bins)
            if kb is not None:
                counts[g[j].class_label][kb]["fn"] += 1

    table = {}
    for cls in CLASSES:
        table[cls] = {}
        for b, c in zip(bins, counts[cls]):
            n_pred = c["tp_pred"] + c["fp"]
            n_gt = c["tp_gt"] + c["fn"]
            table[cls][bin_label(b)] = {
                "precision": c["tp_pred"] / n_pred if n_pred else None,
                "recall": c["tp_gt"] / n_gt if n_gt else None,
                "n_pred": n_pred,
                "n_gt": n_gt,
                **c,
            }
    return table


def interpolated_ap(recall: np.ndarray, precision: np.ndarray, n_points: int = N_RECALL_POINTS) -> float:
    """Mean of max-precision-at-recall->=r over r = 1/n, 2/n, ..., 1."""
    if len(recall) == 0:
        return 0.0
    # suffix maximum of precision, indexed by curve position
    env = np.maximum.accumulate(precision[::-1])[::-1]
    total = 0.0
    for k in range(1, n_points + 1):
        r = k / n_points
        idx = np.searchsorted(recall, r, side="left")
        if idx < len(recall):
            total += env[idx]
    return total / n_points


def average_precision(preds, gts, iou_thresh=None, mode: str = BEV, cls: str | None = None) -> float | dict:
    """R40 interpolated AP for one class, or a dict over classes when ``cls`` is None.

    A class with no GT boxes scores 0.
    """
    if cls is None:
        return {c: average_precision(preds, gts, iou_thresh, mode, c) for c in CLASSES}
    preds, gts = _as_frames(preds), _as_frames(gts)
    scored: list[tuple[float, bool]] = []
    n_gt = 0
    for fid in sorted(set(preds) | set(gts)):
        p = [b for b in preds.get(fid, []) if b.class_label == cls]
        g = [b for b in gts.get(fid, []) if b.class_label == cls]
        n_gt += len(g)
        m = match_frame(p, g, iou_thresh, mode)
        tp_idx = {i for i, _ in m.tp}
        scored.extend((p[i].score, i in tp_idx) for i in range(len(p)))
    if n_gt == 0 or not scored:
        return 0.0
    scores = np.array([s for s, _ in scored])
    hits = np.array([t for _, t in scored], dtype=float)
    order = np.argsort(-scores, kind="stable")
    scores, hits = scores[order], hits[order]
    tp = np.cumsum(hits)
    fp = np.cumsum(1.0 - hits)
    # operating points only at distinct score thresholds
    last_of_score = np.r_[scores[1:] != scores[:-1], True]
    tp, fp = tp[last_of_score], fp[last_of_score]
    recall = tp / n_gt
    precision = tp / (tp + fp)
    return interpolated_ap(recall, precision)


def evaluation_report(preds, gts, bins=DEFAULT_BINS, iou_thresh=None) -> dict:
    """Class -> bin -> P/R table plus AP_BEV and AP_3D per class."""
    return {
        "pr_by_range": pr_by_range(preds, gts, bins, iou_thresh, BEV),
        "ap_bev": average_precision(preds, gts, iou_thresh, BEV),
        "ap_3d": average_precision(preds, gts, iou_thresh, MODE_3D),
    }
