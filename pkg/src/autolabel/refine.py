"""Temporal refinement of tracks: retroactive labeling, static fusion, gap filling."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .geometry import PEDESTRIAN, VEHICLE, Box3D, wrap_angle
from .kbf import KbfConfig, Rejected, fuse_cluster
from .tracking import (
    DYNAMIC,
    EXTRAPOLATED,
    INTERPOLATED,
    OBSERVED,
    STATIC,
    UNCLASSIFIED,
    ConstantVelocityKF,
    Observation,
    Track,
    classify_motion,
)


@dataclass
class RefineConfig:
    s_pos: dict[str, float] = field(default_factory=lambda: {VEHICLE: 0.6, PEDESTRIAN: 0.6})
    n_pos: dict[str, int] = field(default_factory=lambda: {VEHICLE: 3, PEDESTRIAN: 3})
    history_window_H: int = 8
    use_static_pedestrians: bool = False
    extrapolation_limit: int = 3
    dist_thresh: float = 2.0
    var_thresh: float = 0.5

    def __post_init__(self):
        for cls in (VEHICLE, PEDESTRIAN):
            if not 0.0 <= self.s_pos.get(cls, 0.0) <= 1.0:
                raise ValueError(f"s_pos[{cls}] must lie in [0, 1]")
            if self.n_pos.get(cls, 1) < 1:
                raise ValueError(f"n_pos[{cls}] must be >= 1")
        if self.history_window_H < 1:
            raise ValueError("history_window_H must be >= 1")
        if self.extrapolation_limit < 0:
            raise ValueError("extrapolation_limit must be >= 0")


def _confident_count(track: Track, s_pos: float) -> int:
    return sum(1 for o in track.observations.values() if o.kind == OBSERVED and o.score > s_pos)


def retroactive_filter(tracks: Sequence[Track], cfg: RefineConfig) -> list[Track]:
    """Keep whole tracks holding at least ``n_pos`` observed scores above ``s_pos``."""
    return [
        t for t in tracks
        if _confident_count(t, cfg.s_pos[t.class_label]) >= cfg.n_pos[t.class_label]
    ]


def _motion(track: Track, cfg: RefineConfig) -> str:
    if track.motion == UNCLASSIFIED:
        return classify_motion(track, cfg.dist_thresh, cfg.var_thresh)
    return track.motion


def refine_static_vehicle(track: Track, cfg: RefineConfig, kbf: KbfConfig) -> dict[int, Box3D]:
    """Per-frame fused box over the trailing ``H`` frames of observations.

    Every frame of the track span gets a box; frames whose window holds no
    observation take the fused box of the nearest frame that has one.
    """
    if _motion(track, cfg) != STATIC:
        raise ValueError(f"track {track.track_id} is not static")
    observed = track.observed()
    if not observed:
        return {}
    first, last = observed[0][0], observed[-1][0]
    frames = np.array([f for f, _ in observed])
    boxes = [o.box for _, o in observed]
    H = cfg.history_window_H

    fused: dict[int, Box3D] = {}
    for i in range(first, last + 1):
        lo, hi = np.searchsorted(frames, i - H, "left"), np.searchsorted(frames, i, "right")
        if hi <= lo:
            continue
        out = fuse_cluster(boxes[lo:hi], None, kbf)
        if isinstance(out, Rejected):
            continue
        fused[i] = out

    if not fused:
        return {}
    have = np.array(sorted(fused))
    result = {}
    for i in range(first, last + 1):
        if i in fused:
            result[i] = fused[i]
        else:
            # nearest frame with a fused box, earlier frame on ties
            j = int(have[np.argmin(np.abs(have - i) * 2 + (have > i))])
            result[i] = fused[j]
    return result


def _align_pi(angle: float, ref: float) -> float:
    return angle + round((ref - angle) / math.pi) * math.pi


def _lerp_box(a: Box3D, b: Box3D, alpha: float, score: float) -> Box3D:
    yaw_b = _align_pi(b.heading, a.heading)
    return replace(
        a,
        cx=a.cx + alpha * (b.cx - a.cx),
        cy=a.cy + alpha * (b.cy - a.cy),
        cz=a.cz + alpha * (b.cz - a.cz),
        l=0.5 * (a.l + b.l),
        w=0.5 * (a.w + b.w),
        h=0.5 * (a.h + b.h),
        heading=wrap_angle(a.heading + alpha * (yaw_b - a.heading)),
        score=score,
    )


def _extrapolate(observed: list[tuple[int, Observation]], steps: int, score: float) -> list[Box3D]:
    """Constant-velocity Kalman prediction ``1..steps`` frames past the last observation."""
    f0, o0 = observed[0]
    kf = ConstantVelocityKF(o0.box.cx, o0.box.cy, o0.box.heading)
    prev = f0
    for f, o in observed[1:]:
        dt = abs(f - prev)
        kf.predict(dt)
        kf.update(o.box.cx, o.box.cy, o.box.heading)
        prev = f
    last = observed[-1][1].box
    out = []
    for k in range(1, steps + 1):
        x, y, yaw = kf.peek(float(k))[:3]
        out.append(replace(last, cx=float(x), cy=float(y), heading=wrap_angle(float(yaw)), score=score))
    return out


def fill_track(track: Track, cfg: RefineConfig, frame_range: tuple[int, int] | None = None) -> Track:
    """Interpolate gaps and extrapolate both ends; Observed entries are kept as-is."""
    observed = track.observed()
    out = Track(track.track_id, track.class_label, {}, track.motion, track.stream)
    if not observed:
        return out
    score = track.max_score
    for f, o in observed:
        out.observations[f] = o
    for (fa, oa), (fb, ob) in zip(observed, observed[1:]):
        for f in range(fa + 1, fb):
            box = _lerp_box(oa.box, ob.box, (f - fa) / (fb - fa), score)
            out.observations[f] = Observation(box, score, INTERPOLATED)

    n = cfg.extrapolation_limit
    if n > 0 and len(observed) >= 2:
        lo, hi = frame_range if frame_range is not None else (-math.inf, math.inf)
        fwd = _extrapolate(observed, n, score)
        for k, box in enumerate(fwd, start=1):
            f = observed[-1][0] + k
            if f <= hi:
                out.observations[f] = Observation(box, score, EXTRAPOLATED)
        # run the filter backwards in time by mirroring frame ids
        mirrored = [(-f, o) for f, o in reversed(observed)]
        bwd = _extrapolate(mirrored, n, score)
        for k, box in enumerate(bwd, start=1):
            f = observed[0][0] - k
            if f >= lo:
                out.observations[f] = Observation(box, score, EXTRAPOLATED)
    return out


def fill_dynamic_track(track: Track, cfg: RefineConfig, frame_range: tuple[int, int] | None = None) -> Track:
    """Gap-fill a confident dynamic track (see :func:`fill_track`)."""
    if _motion(track, cfg) != DYNAMIC:
        raise ValueError(f"track {track.track_id} is not dynamic")
    return fill_track(track, cfg, frame_range)


def refine_pedestrians(tracks: Sequence[Track], cfg: RefineConfig,
                       frame_range: tuple[int, int] | None = None) -> list[Track]:
    """Confident pedestrian tracks, static ones only when enabled, gap-filled."""
    out = []
    for t in retroactive_filter(tracks, cfg):
        motion = _motion(t, cfg)
        if motion == DYNAMIC:
            out.append(fill_dynamic_track(replace(t, motion=motion), cfg, frame_range))
        elif motion == STATIC and cfg.use_static_pedestrians:
            out.append(fill_track(replace(t, motion=motion), cfg, frame_range))
    return out
