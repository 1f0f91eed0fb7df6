"""End-to-end acceptance checks, one test per criterion."""

import math
import subprocess
import sys
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from autolabel.ensemble import EnsembleSpec, assemble_frame_proposals
from autolabel.evaluate import average_precision, match_frame
from autolabel.geometry import PEDESTRIAN, VEHICLE, Box3D, bev_iou, iou_3d, nms_bev
from autolabel.kbf import KbfConfig, fuse_cluster, kde_mode
from autolabel.pipeline import RoundConfig, SequenceInputs, run_round
from autolabel.refine import RefineConfig, refine_pedestrians, refine_static_vehicle, retroactive_filter
from autolabel.synth import DYNAMIC_PEDESTRIAN, POLE, SceneSpec, generate_scene, simulate_round
from autolabel.tracking import (
    DYNAMIC,
    INTERPOLATED,
    OBSERVED,
    PED_ALL,
    STATIC,
    VEH_ALL,
    Observation,
    Track,
    classify_motion,
    classify_tracks,
    default_stream_configs,
    run_tracker,
)
from oracles import brute_kde_mode, brute_match, brute_nms, exhaustive_ap, monte_carlo_iou, random_box

SCENE_SEED = 0
BINS = ("0-30", "30-50", "50-80")


def vbox(x, y, yaw=0.0, score=0.9, cls=VEHICLE):
    dims = (4.5, 1.9, 1.6) if cls == VEHICLE else (0.7, 0.6, 1.7)
    return Box3D(x, y, 0.0, *dims, yaw, score=score, class_label=cls)


def _cluster(rng, n):
    base = rng.uniform(-40, 40, 2)
    return [Box3D(float(base[0] + rng.normal(0, 0.4)), float(base[1] + rng.normal(0, 0.4)), float(rng.normal(0, 0.2)),
                  float(rng.uniform(3.5, 5.5)), float(rng.uniform(1.6, 2.2)), float(rng.uniform(1.3, 2.0)),
                  float(0.3 + rng.normal(0, 0.1)), score=float(rng.uniform(0.05, 0.99)),
                  provenance=(f"s{rng.integers(4)}",))
            for _ in range(n)]


def test_c01_kde_mode_oracle():
    """criterion 1: kde_mode equals exhaustive density evaluation on 100 clusters, under 1 s"""
    rng = np.random.default_rng(101)
    bw = KbfConfig().bandwidth
    attrs = {"cx": "center", "cy": "center", "cz": "center", "l": "dims", "w": "dims", "h": "dims",
             "heading": "heading", "score": "score"}
    cases = []
    for _ in range(100):
        boxes = _cluster(rng, int(rng.integers(3, 11)))
        weights = [float(w) for w in rng.uniform(0.2, 3.0, len(boxes))]
        for attr, group in attrs.items():
            cases.append(([getattr(b, attr) for b in boxes], weights, bw[group]))
    t0 = time.perf_counter()
    got = [kde_mode(s, w, h) for s, w, h in cases]
    elapsed = time.perf_counter() - t0
    expected = [brute_kde_mode(s, w, h) for s, w, h in cases]
    assert got == expected
    assert elapsed < 1.0


@settings(max_examples=1000, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 10), st.floats(1e-6, 1e6))
def test_c02_kbf_identity_and_invariance(seed, n, c):
    """criterion 2: identical boxes fuse bit-exactly; permutation and weight scaling leave output unchanged"""
    rng = np.random.default_rng(seed)
    cfg = KbfConfig()
    boxes = _cluster(rng, n)
    assert fuse_cluster([boxes[0]] * n, None, cfg) == boxes[0]
    weights = [float(w) for w in rng.uniform(0.2, 3.0, n)]
    ref = fuse_cluster(boxes, weights, cfg)
    perm = rng.permutation(n)
    assert fuse_cluster([boxes[i] for i in perm], [weights[i] for i in perm], cfg) == ref
    assert fuse_cluster(boxes, [w * c for w in weights], cfg) == ref


def test_c03_iou_monte_carlo():
    """criterion 3: bev_iou and iou_3d within 0.01 of a 10^6-sample Monte-Carlo estimate on 100 pairs"""
    rng = np.random.default_rng(303)
    worst_bev = worst_3d = 0.0
    n_overlap = 0
    for _ in range(100):
        a = random_box(rng, spread=1.5)
        b = random_box(rng, spread=1.5)
        mc_rng = np.random.default_rng(int(rng.integers(2**32)))
        worst_bev = max(worst_bev, abs(bev_iou(a, b) - monte_carlo_iou(a, b, 1_000_000, mc_rng, "BEV")))
        worst_3d = max(worst_3d, abs(iou_3d(a, b) - monte_carlo_iou(a, b, 1_000_000, mc_rng, "3D")))
        n_overlap += bev_iou(a, b) > 0
    assert n_overlap >= 50  # the sample must exercise real intersections
    assert worst_bev <= 0.01 and worst_3d <= 0.01


def test_c04_nms_and_matching_oracles():
    """criterion 4: nms_bev and match_frame equal O(n^2) references on 200 frames of 50 boxes; nms is idempotent"""
    rng = np.random.default_rng(404)
    for _ in range(200):
        boxes = [random_box(rng, spread=12.0) for _ in range(50)]
        gts = [random_box(rng, spread=12.0) for _ in range(50)]
        thresh = float(rng.uniform(0.05, 0.9))
        kept = nms_bev(boxes, thresh)
        assert kept == brute_nms(boxes, thresh)
        assert nms_bev(kept, thresh) == kept
        thr = {VEHICLE: float(rng.uniform(0.1, 0.7)), PEDESTRIAN: float(rng.uniform(0.1, 0.5))}
        m = match_frame(boxes, gts, thr)
        assert (m.tp, m.fp, m.fn) == brute_match(boxes, gts, thr)


def _cv_objects(rng, n_obj=10):
    objs = []
    for k in range(n_obj):
        speed = float(rng.uniform(0.3, 1.5))
        heading = 0.0 if k % 2 == 0 else math.pi
        x0 = -60.0 if heading == 0.0 else 60.0
        objs.append((x0, 15.0 * k, speed * math.cos(heading), heading))
    return objs


def test_c05_tracker_fidelity():
    """criterion 5: 10 constant-velocity objects, 100 frames, 0.1 m noise give 10 whole tracks over 20 seeds"""
    cfg = default_stream_configs()[VEH_ALL]
    for seed in range(20):
        rng = np.random.default_rng(seed)
        objs = _cv_objects(rng)
        truth = {}
        frames = []
        for f in range(100):
            boxes = []
            for k, (x0, y0, vx, yaw) in enumerate(objs):
                b = vbox(x0 + vx * f + rng.normal(0, 0.1), y0 + rng.normal(0, 0.1), yaw)
                truth[id(b)] = k
                boxes.append(b)
            frames.append((f, boxes))
        tracks = run_tracker(frames, None, cfg)
        assert len(tracks) == 10
        owners = []
        for t in tracks:
            ids = {truth[id(o.box)] for o in t.observations.values() if o.kind == OBSERVED}
            assert len(ids) == 1  # no identity switch
            assert t.observed_frames() == list(range(100))  # not fragmented
            owners.append(ids.pop())
        assert sorted(owners) == list(range(10))


def _motion_track(rng, dynamic):
    n = int(rng.integers(10, 31))
    start = rng.uniform(-50, 50, 2)
    if dynamic:
        ang = rng.uniform(-math.pi, math.pi)
        step = rng.uniform(0.5, 2.0) * np.array([math.cos(ang), math.sin(ang)])
    else:
        step = np.zeros(2)
    centers = start + np.outer(np.arange(n), step) + rng.normal(0, 0.2, size=(n, 2))
    return Track(0, VEHICLE, {f: Observation(vbox(float(x), float(y)), 0.9) for f, (x, y) in enumerate(centers)})


def test_c06_motion_classification():
    """criterion 6: default thresholds classify >= 99% of 100 static + 100 dynamic noisy tracks"""
    rng = np.random.default_rng(606)
    correct = sum(classify_motion(_motion_track(rng, False)) == STATIC for _ in range(100))
    correct += sum(classify_motion(_motion_track(rng, True)) == DYNAMIC for _ in range(100))
    assert correct >= 198


def test_c07_retroactive_filter_exact():
    """criterion 7: retroactive_filter equals the brute-force confidence predicate on 500 random tracks"""
    rng = np.random.default_rng(707)
    for batch in range(25):
        tracks = []
        for i in range(20):
            cls = VEHICLE if rng.random() < 0.5 else PEDESTRIAN
            obs = {}
            for f in range(int(rng.integers(1, 20))):
                s = float(np.round(rng.random(), 2))
                obs[f] = Observation(vbox(float(f), 0.0, score=s, cls=cls), s,
                                     OBSERVED if rng.random() < 0.8 else INTERPOLATED)
            tracks.append(Track(batch * 20 + i, cls, obs))
        cfg = RefineConfig(s_pos={VEHICLE: float(np.round(rng.random(), 2)), PEDESTRIAN: float(np.round(rng.random(), 2))},
                           n_pos={VEHICLE: int(rng.integers(1, 8)), PEDESTRIAN: int(rng.integers(1, 8))})
        expected = [t for t in tracks
                    if sum(o.kind == OBSERVED and o.score > cfg.s_pos[t.class_label]
                           for o in t.observations.values()) >= cfg.n_pos[t.class_label]]
        assert retroactive_filter(tracks, cfg) == expected


def test_c08_static_refinement_accuracy():
    """criterion 8: static-vehicle fusion beats raw observation error in >= 95 of 100 seeds"""
    wins = 0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        true_xy = rng.uniform(-40, 40, 2)
        obs = {}
        for f in range(10):
            c = true_xy + rng.normal(0, 0.3, 2)
            obs[f] = Observation(vbox(float(c[0]), float(c[1]), 0.3, score=0.8), 0.8)
        refined = refine_static_vehicle(Track(0, VEHICLE, obs, STATIC), RefineConfig(), KbfConfig())
        fused_err = np.mean([np.hypot(b.cx - true_xy[0], b.cy - true_xy[1]) for b in refined.values()])
        raw_err = np.mean([np.hypot(o.box.cx - true_xy[0], o.box.cy - true_xy[1]) for o in obs.values()])
        wins += fused_err < raw_err
    assert wins >= 95


@pytest.fixture(scope="module")
def rounds():
    t0 = time.perf_counter()
    truth = generate_scene(SceneSpec(rng_seed=SCENE_SEED))
    sets = simulate_round(truth, 1, SCENE_SEED)
    r1 = run_round(SequenceInputs(sets, truth.poses, truth.clouds, truth.gt), RoundConfig.for_round(1), write=False)
    elapsed = time.perf_counter() - t0
    sets2 = simulate_round(truth, 2, SCENE_SEED)
    r2 = run_round(SequenceInputs(sets2, truth.poses, truth.clouds, truth.gt), RoundConfig.for_round(2), write=False)
    return truth, r1, r2, elapsed


def test_c09_round1_trend(rounds):
    """criterion 9: round-1 refined recall >= ensemble recall and precision drop <= 0.05 in every bin, under 60 s"""
    truth, r1, _, elapsed = rounds
    assert len(truth.frame_ids) == 200
    ev = r1.report["evaluation"]
    for cls in (VEHICLE, PEDESTRIAN):
        for b in BINS:
            ens = ev["ensemble"]["pr_by_range"][cls][b]
            ref = ev["refined"]["pr_by_range"][cls][b]
            assert ref["recall"] is not None, (cls, b)
            assert ref["recall"] >= ens["recall"], (cls, b, ref, ens)
            assert ref["precision"] is not None and ens["precision"] is not None
            assert ens["precision"] - ref["precision"] <= 0.05, (cls, b, ref, ens)
    assert elapsed < 60.0


def test_c10_round2_pedestrian_recall(rounds):
    """criterion 10: round 2 raises pedestrian recall at 30-80 m with precision drop <= 0.12"""
    _, r1, r2, _ = rounds
    p1 = r1.report["evaluation"]["refined"]["pr_by_range"][PEDESTRIAN]
    p2 = r2.report["evaluation"]["refined"]["pr_by_range"][PEDESTRIAN]
    for b in ("30-50", "50-80"):
        assert p2[b]["recall"] > p1[b]["recall"], (b, p1[b], p2[b])
        assert p1[b]["precision"] - p2[b]["precision"] <= 0.12, (b, p1[b], p2[b])


def test_c11_pole_distractors():
    """criterion 11: with 20 poles, < 10% of refined pedestrian boxes are distractors and >= 80% of pedestrians survive"""
    truth = generate_scene(SceneSpec(n_static_vehicles=0, n_dynamic_vehicles=0, n_dynamic_pedestrians=20,
                                     n_poles=20, rng_seed=SCENE_SEED))
    sets = simulate_round(truth, 1, SCENE_SEED)
    spec = EnsembleSpec([(s.set_id, 1.0) for s in sets])
    frames = [(f, assemble_frame_proposals(f, sets, spec)) for f in truth.frame_ids]
    tracks = classify_tracks(run_tracker(frames, truth.poses, default_stream_configs()[PED_ALL]))
    kept = refine_pedestrians(tracks, RefineConfig(), (truth.frame_ids[0], truth.frame_ids[-1]))
    kept_ids = {t.track_id for t in kept}
    poles = [o.states[0, :2] for o in truth.objects if o.kind == POLE]
    assert len(poles) == 20
    n_box = n_distractor = 0
    for t in kept:
        for o in t.observations.values():
            n_box += 1
            n_distractor += min(np.hypot(o.box.cx - p[0], o.box.cy - p[1]) for p in poles) < 1.0
    assert n_box > 0 and n_distractor / n_box < 0.10
    tracked = retained = 0
    for obj in truth.objects:
        if obj.kind != DYNAMIC_PEDESTRIAN:
            continue
        assoc = [t.track_id for t in tracks
                 if np.median([np.hypot(o.box.cx - obj.states[f, 0], o.box.cy - obj.states[f, 1])
                               for f, o in t.observed()]) < 1.0]
        if assoc:
            tracked += 1
            retained += any(a in kept_ids for a in assoc)
    assert tracked >= 10 and retained / tracked >= 0.80


def test_c12_ap_fixture():
    """criterion 12: average_precision equals an exhaustive PR-curve evaluation on a 5-prediction fixture within 1e-9"""
    gts = [vbox(10.0 * k, 0.0) for k in range(5)]
    preds = [vbox(0.0, 0.0, score=0.9), vbox(10.0, 0.0, score=0.8), vbox(0.0, 15.0, score=0.7),
             vbox(20.0, 0.0, score=0.6), vbox(30.0, 0.0, score=0.5)]
    expected = exhaustive_ap([(0.9, True), (0.8, True), (0.7, False), (0.6, True), (0.5, True)], 5)
    assert abs(average_precision(preds, gts, cls=VEHICLE) - expected) <= 1e-9


def test_c13_cli_round_deterministic(tmp_path):
    """criterion 13: two runs of `autolabel round` produce byte-identical label files"""
    cli = [sys.executable, "-m", "autolabel"]
    seq = tmp_path / "seq"
    subprocess.run([*cli, "synth", "--seed", "3", "--output-dir", str(seq)], check=True)
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        subprocess.run([*cli, "round", "--input-dir", str(seq), "--output-dir", str(out), "--seed", "3"], check=True)
        outs.append(out)
    a, b = ((o / "labels.jsonl").read_bytes() for o in outs)
    assert a and a == b
    assert (outs[0] / "report.json").read_bytes() == (outs[1] / "report.json").read_bytes()
