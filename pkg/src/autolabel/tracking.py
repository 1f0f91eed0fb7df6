"""Constant-velocity Kalman tracking over fused proposals, plus motion classification."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import PEDESTRIAN, VEHICLE, Box3D, FramePose, bev_iou, candidate_pairs, transform_box

PED_ALL = "PedAll"
VEH_ALL = "VehAll"
VEH_STATIC = "VehStatic"
STREAMS = (PED_ALL, VEH_ALL, VEH_STATIC)
STREAM_CLASS = {PED_ALL: PEDESTRIAN, VEH_ALL: VEHICLE, VEH_STATIC: VEHICLE}

OBSERVED = "Observed"
INTERPOLATED = "Interpolated"
EXTRAPOLATED = "Extrapolated"

UNCLASSIFIED = "Unclassified"
STATIC = "Static"
DYNAMIC = "Dynamic"


@dataclass
class TrackerStreamConfig:
    stream_name: str
    input_score_thresh: float
    assoc_iou_thresh: float
    max_coast_frames: int = 5
    min_hits: int = 2
    process_noise: float = 0.01
    measurement_noise: float = 0.04
    assignment: str = "greedy"  # or "hungarian"
    size_smoothing: float = 0.5

    def __post_init__(self):
        if self.stream_name not in STREAMS:
            raise ValueError(f"unknown tracker stream {self.stream_name!r}")
        if not 0.0 <= self.input_score_thresh <= 1.0:
            raise ValueError("input_score_thresh must lie in [0, 1]")
        if not 0.0 < self.assoc_iou_thresh <= 1.0:
            raise ValueError("assoc_iou_thresh must lie in (0, 1]")
        if self.max_coast_frames < 0 or self.min_hits < 1:
            raise ValueError("max_coast_frames must be >= 0 and min_hits >= 1")
        if self.process_noise <= 0 or self.measurement_noise <= 0:
            raise ValueError("noise parameters must be positive")
        if self.assignment not in ("greedy", "hungarian"):
            raise ValueError(f"unknown assignment {self.assignment!r}")

    @property
    def class_label(self) -> str:
        return STREAM_CLASS[self.stream_name]


def default_stream_configs() -> dict[str, TrackerStreamConfig]:
    return {
        PED_ALL: TrackerStreamConfig(PED_ALL, 0.3, 0.1, max_coast_frames=5),
        VEH_ALL: TrackerStreamConfig(VEH_ALL, 0.4, 0.2, max_coast_frames=5),
        VEH_STATIC: TrackerStreamConfig(VEH_STATIC, 0.3, 0.5, max_coast_frames=10),
    }


@dataclass
class Observation:
    box: Box3D
    score: float
    kind: str = OBSERVED


@dataclass
class Track:
    track_id: int
    class_label: str
    observations: dict[int, Observation] = field(default_factory=dict)
    motion: str = UNCLASSIFIED
    stream: str = ""

    def frames(self) -> list[int]:
        return sorted(self.observations)

    def observed_frames(self) -> list[int]:
        return sorted(f for f, o in self.observations.items() if o.kind == OBSERVED)

    def observed(self) -> list[tuple[int, Observation]]:
        return [(f, self.observations[f]) for f in self.observed_frames()]

    @property
    def max_score(self) -> float:
        return max((o.score for o in self.observations.values() if o.kind == OBSERVED), default=0.0)

    @property
    def n_observed(self) -> int:
        return sum(1 for o in self.observations.values() if o.kind == OBSERVED)


class ConstantVelocityKF:
    """Kalman filter over (x, y, yaw) with per-axis constant velocity.

    Time is measured in frames.
    """

    def __init__(self, x: float, y: float, yaw: float, process_noise: float = 0.01,
                 measurement_noise: float = 0.04, init_velocity_var: float = 10.0):
        self.x = np.array([x, y, yaw, 0.0, 0.0, 0.0])
        self.P = np.diag([measurement_noise] * 3 + [init_velocity_var] * 3)
        self.q = process_noise
        self.R = np.eye(3) * measurement_noise
        self.H = np.hstack([np.eye(3), np.zeros((3, 3))])

    def _transition(self, dt: float):
        F = np.eye(6)
        F[0, 3] = F[1, 4] = F[2, 5] = dt
        Q = np.zeros((6, 6))
        q11, q12, q22 = dt**4 / 4.0, dt**3 / 2.0, dt**2
        for i in range(3):
            Q[i, i], Q[i, i + 3], Q[i + 3, i], Q[i + 3, i + 3] = q11, q12, q12, q22
        return F, Q * self.q

    def predict(self, dt: float = 1.0) -> np.ndarray:
        F, Q = self._transition(dt)
        self.x = F @ self.x
        self.P = F @ self.P @ F.T + Q
        return self.x.copy()

    def peek(self, dt: float) -> np.ndarray:
        F, _ = self._transition(dt)
        return F @ self.x

    def update(self, x: float, y: float, yaw: float):
        # boxes are pi-symmetric: take the measured yaw representative nearest the state
        yaw = yaw + round((self.x[2] - yaw) / math.pi) * math.pi
        z = np.array([x, y, yaw])
        S = self.H @ self.P @ self.H.T + self.R
        K = self.P @ self.H.T @ np.linalg.inv(S)
        self.x = self.x + K @ (z - self.H @ self.x)
        self.P = (np.eye(6) - K @ self.H) @ self.P


class _LiveTrack:
    def __init__(self, track_id: int, frame_id: int, box: Box3D, cfg: TrackerStreamConfig):
        self.track = Track(track_id, box.class_label, stream=cfg.stream_name)
        self.kf = ConstantVelocityKF(box.cx, box.cy, box.heading, cfg.process_noise, cfg.measurement_noise)
        self.z, self.l, self.w, self.h = box.cz, box.l, box.w, box.h
        self.alpha = cfg.size_smoothing
        self.last_frame = frame_id
        self.misses = 0
        self.track.observations[frame_id] = Observation(box, box.score)

    def predicted_box(self) -> Box3D:
        x, y, yaw = self.kf.x[:3]
        return Box3D(float(x), float(y), self.z, self.l, self.w, self.h, float(yaw),
                     score=0.0, class_label=self.track.class_label)

    def update(self, frame_id: int, box: Box3D):
        self.kf.update(box.cx, box.cy, box.heading)
        a = self.alpha
        self.z = a * box.cz + (1 - a) * self.z
        self.l = a * box.l + (1 - a) * self.l
        self.w = a * box.w + (1 - a) * self.w
        self.h = a * box.h + (1 - a) * self.h
        self.last_frame = frame_id
        self.misses = 0
        self.track.observations[frame_id] = Observation(box, box.score)


def _pose_lookup(poses) -> dict[int, FramePose] | None:
    if poses is None:
        return None
    if isinstance(poses, Mapping):
        return dict(poses)
    return {p.frame_id: p for p in poses}


def _associate(live: list[_LiveTrack], dets: list[Box3D], cfg: TrackerStreamConfig) -> list[tuple[int, int]]:
    """Returns (track index, detection index) pairs."""
    if not live or not dets:
        return []
    preds = [t.predicted_box() for t in live]
    iou = np.zeros((len(live), len(dets)))
    for ti, di in candidate_pairs(preds, dets):
        iou[ti, di] = bev_iou(preds[ti], dets[di])
    if cfg.assignment == "hungarian":
        rows, cols = linear_sum_assignment(-iou)
        return [(int(r), int(c)) for r, c in zip(rows, cols) if iou[r, c] >= cfg.assoc_iou_thresh]
    pairs = []
    free = set(range(len(live)))
    for di in sorted(range(len(dets)), key=lambda i: (-dets[i].score, i)):
        best = None
        for ti in sorted(free):
            if iou[ti, di] >= cfg.assoc_iou_thresh and (best is None or iou[ti, di] > iou[best, di]):
                best = ti
        if best is not None:
            pairs.append((best, di))
            free.discard(best)
    return pairs


def run_tracker(
    frames: Sequence[tuple[int, Sequence[Box3D]]],
    poses,
    cfg: TrackerStreamConfig,
) -> list[Track]:
    """Track one stream over a sequence.

    ``frames`` holds (frame_id, boxes) in sensor coordinates, ascending. ``poses``
    maps frame ids to sensor-to-world poses (``None`` when boxes are already in
    world coordinates). Track observations are stored in world coordinates.
    """
    ids = [fid for fid, _ in frames]
    if any(b <= a for a, b in zip(ids, ids[1:])):
        raise ValueError("frames must be in strictly ascending frame_id order")
    pose_of = _pose_lookup(poses)

    live: list[_LiveTrack] = []
    finished: list[_LiveTrack] = []
    next_id = 0
    prev_frame = None
    for fid, boxes in frames:
        dets = [b for b in boxes if b.score >= cfg.input_score_thresh and b.class_label == cfg.class_label]
        if pose_of is not None:
            if fid not in pose_of:
                raise ValueError(f"no pose for frame {fid}")
            dets = [transform_box(b, pose_of[fid]) for b in dets]
        dt = 1.0 if prev_frame is None else float(fid - prev_frame)
        prev_frame = fid
        for t in live:
            t.kf.predict(dt)

        matched_tracks, matched_dets = set(), set()
        for ti, di in _associate(live, dets, cfg):
            live[ti].update(fid, dets[di])
            matched_tracks.add(ti)
            matched_dets.add(di)

        still_live = []
        for ti, t in enumerate(live):
            if ti not in matched_tracks:
                t.misses = fid - t.last_frame
                if t.misses > cfg.max_coast_frames:
                    finished.append(t)
                    continue
            still_live.append(t)
        live = still_live

        for di, d in enumerate(dets):
            if di not in matched_dets:
                live.append(_LiveTrack(next_id, fid, d, cfg))
                next_id += 1

    finished.extend(live)
    out = [t.track for t in finished if t.track.n_observed >= cfg.min_hits]
    return sorted(out, key=lambda t: t.track_id)


def classify_motion(track: Track, dist_thresh: float = 2.0, var_thresh: float = 0.5) -> str:
    """Static when begin-to-end centre distance and per-axis centre variance are both small."""
    obs = track.observed()
    if len(obs) < 2:
        return UNCLASSIFIED
    centers = np.array([[o.box.cx, o.box.cy] for _, o in obs])
    travel = float(np.hypot(*(centers[-1] - centers[0])))
    var = centers.var(axis=0)
    if travel < dist_thresh and bool(np.all(var < var_thresh)):
        return STATIC
    return DYNAMIC


def classify_tracks(tracks: Iterable[Track], dist_thresh: float = 2.0, var_thresh: float = 0.5) -> list[Track]:
    """Set ``motion`` on every track in place and return them."""
    tracks = list(tracks)
    for t in tracks:
        t.motion = classify_motion(t, dist_thresh, var_thresh)
    return tracks

