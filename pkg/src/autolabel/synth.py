"""Synthetic driving scenes and simulated detector outputs.

Scenes give exact ground truth, ego poses and sparse point clouds; detector
profiles turn that truth into noisy, miscalibrated detection sets whose recall
falls off with range.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .ensemble import DetectionSet
from .evaluate import DEFAULT_BINS
from .geometry import PEDESTRIAN, VEHICLE, Box3D, FramePose, PointCloud, transform_box, wrap_angle

SENSOR_HEIGHT = 1.8
# points per m^2 of visible side area at 1 m range
POINT_DENSITY = 20000.0

STATIC_VEHICLE = "static_vehicle"
DYNAMIC_VEHICLE = "dynamic_vehicle"
DYNAMIC_PEDESTRIAN = "dynamic_pedestrian"
STATIC_PEDESTRIAN = "static_pedestrian"
POLE = "pole"

KIND_CLASS = {
    STATIC_VEHICLE: VEHICLE,
    DYNAMIC_VEHICLE: VEHICLE,
    DYNAMIC_PEDESTRIAN: PEDESTRIAN,
    STATIC_PEDESTRIAN: PEDESTRIAN,
    POLE: None,
}


@dataclass
class SceneSpec:
    n_frames: int = 200
    frame_dt: float = 0.1
    ego_path: str = "straight"
    ego_speed: float = 8.0  # m/s
    ego_yaw_rate: float = 0.0  # rad/s, arc paths only
    n_static_vehicles: int = 20
    n_dynamic_vehicles: int = 6
    n_dynamic_pedestrians: int = 12
    n_static_pedestrians: int = 0
    n_poles: int = 10
    max_range: float = 80.0
    lateral_range: tuple[float, float] = (8.0, 45.0)
    ground_points: int = 300
    rng_seed: int = 0

    def __post_init__(self):
        counts = (self.n_static_vehicles, self.n_dynamic_vehicles, self.n_dynamic_pedestrians,
                  self.n_static_pedestrians, self.n_poles)
        if any(c < 0 for c in counts):
            raise ValueError("object counts must be >= 0")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        if self.ego_path not in ("straight", "arc"):
            raise ValueError(f"unknown ego_path {self.ego_path!r}")
        self.lateral_range = tuple(self.lateral_range)


@dataclass
class SceneObject:
    obj_id: int
    kind: str
    dims: tuple[float, float, float]
    # world-frame (x, y, z, heading) per frame
    states: np.ndarray

    @property
    def class_label(self) -> str | None:
        return KIND_CLASS[self.kind]

    def world_box(self, k: int, class_label: str | None = None, **extra) -> Box3D:
        x, y, z, yaw = self.states[k]
        l, w, h = self.dims
        return Box3D(float(x), float(y), float(z), l, w, h, float(yaw),
                     class_label=class_label or self.class_label or PEDESTRIAN, **extra)


@dataclass
class SceneTruth:
    spec: SceneSpec
    frame_ids: list[int]
    poses: dict[int, FramePose]
    objects: list[SceneObject]
    gt: dict[int, list[Box3D]] = field(default_factory=dict)
    gt_ids: dict[int, list[int]] = field(default_factory=dict)
    clouds: dict[int, PointCloud] = field(default_factory=dict)

    def object(self, obj_id: int) -> SceneObject:
        return self.objects[obj_id]

    def sensor_box(self, obj: SceneObject, frame_id: int, **extra) -> Box3D:
        k = self.frame_ids.index(frame_id)
        return transform_box(obj.world_box(k, **extra), self.poses[frame_id].inverse())


def _ego_states(spec: SceneSpec) -> np.ndarray:
    """(x, y, yaw) of the ego vehicle per frame."""
    out = np.zeros((spec.n_frames, 3))
    x = y = yaw = 0.0
    rate = spec.ego_yaw_rate if spec.ego_path == "arc" else 0.0
    for k in range(spec.n_frames):
        out[k] = (x, y, yaw)
        x += spec.ego_speed * spec.frame_dt * math.cos(yaw)
        y += spec.ego_speed * spec.frame_dt * math.sin(yaw)
        yaw += rate * spec.frame_dt
    return out


def _along_path(ego: np.ndarray, s: float) -> tuple[float, float, float]:
    """Point on the ego path at arc length ``s`` (extended linearly past the ends)."""
    seg = np.hypot(*np.diff(ego[:, :2], axis=0).T)
    cum = np.r_[0.0, np.cumsum(seg)]
    if s <= 0.0:
        x, y, yaw = ego[0]
        return x + s * math.cos(yaw), y + s * math.sin(yaw), yaw
    if s >= cum[-1]:
        x, y, yaw = ego[-1]
        d = s - cum[-1]
        return x + d * math.cos(yaw), y + d * math.sin(yaw), yaw
    k = int(np.searchsorted(cum, s, side="right") - 1)
    a = (s - cum[k]) / max(seg[k], 1e-9)
    x = ego[k, 0] + a * (ego[k + 1, 0] - ego[k, 0])
    y = ego[k, 1] + a * (ego[k + 1, 1] - ego[k, 1])
    return x, y, ego[k, 2]


def _vehicle_dims(rng) -> tuple[float, float, float]:
    return (float(rng.uniform(4.0, 5.0)), float(rng.uniform(1.8, 2.1)), float(rng.uniform(1.5, 1.8)))


def _pedestrian_dims(rng) -> tuple[float, float, float]:
    return (float(rng.uniform(0.6, 0.9)), float(rng.uniform(0.55, 0.8)), float(rng.uniform(1.6, 1.9)))


def _place(rng, ego, spec: SceneSpec, margin: float = 40.0):
    path_len = float(np.hypot(*np.diff(ego[:, :2], axis=0).T).sum())
    s = rng.uniform(-margin, path_len + margin)
    px, py, yaw = _along_path(ego, s)
    side = rng.choice([-1.0, 1.0])
    lat = side * rng.uniform(*spec.lateral_range)
    return px - lat * math.sin(yaw), py + lat * math.cos(yaw), yaw


def _make_objects(spec: SceneSpec, ego: np.ndarray, rng) -> list[SceneObject]:
    n = spec.n_frames
    t = np.arange(n) * spec.frame_dt
    objects: list[SceneObject] = []

    def add(kind, dims, states):
        objects.append(SceneObject(len(objects), kind, dims, states))

    def static_states(x, y, z, yaw):
        return np.tile([x, y, z, wrap_angle(yaw)], (n, 1)).astype(float)

    def moving_states(x0, y0, z, yaw0, speed, yaw_rate):
        yaw = yaw0 + yaw_rate * t
        if abs(yaw_rate) < 1e-9:
            x = x0 + speed * t * math.cos(yaw0)
            y = y0 + speed * t * math.sin(yaw0)
        else:
            r = speed / yaw_rate
            x = x0 + r * (np.sin(yaw) - math.sin(yaw0))
            y = y0 - r * (np.cos(yaw) - math.cos(yaw0))
        return np.column_stack([x, y, np.full(n, z), [wrap_angle(a) for a in yaw]])

    for _ in range(spec.n_static_vehicles):
        dims = _vehicle_dims(rng)
        x, y, yaw = _place(rng, ego, spec)
        add(STATIC_VEHICLE, dims, static_states(x, y, dims[2] / 2, yaw + rng.normal(0, 0.1) + rng.choice([0, math.pi])))
    for _ in range(spec.n_dynamic_vehicles):
        dims = _vehicle_dims(rng)
        s = rng.uniform(-20.0, spec.ego_speed * n * spec.frame_dt)
        px, py, yaw = _along_path(ego, s)
        lane = rng.choice([-5.25, -1.75, 1.75, 5.25]) * (1.0 if rng.random() < 0.5 else -1.0)
        heading = yaw if lane > 0 else yaw + math.pi
        speed = rng.uniform(5.0, 12.0)
        add(DYNAMIC_VEHICLE, dims, moving_states(px - lane * math.sin(yaw), py + lane * math.cos(yaw),
                                                 dims[2] / 2, heading, speed, rng.normal(0.0, 0.02)))
    for _ in range(spec.n_dynamic_pedestrians):
        dims = _pedestrian_dims(rng)
        x, y, _ = _place(rng, ego, spec, margin=20.0)
        add(DYNAMIC_PEDESTRIAN, dims, moving_states(x, y, dims[2] / 2, rng.uniform(-math.pi, math.pi),
                                                    rng.uniform(1.0, 1.6), rng.normal(0.0, 0.05)))
    for _ in range(spec.n_static_pedestrians):
        dims = _pedestrian_dims(rng)
        x, y, _ = _place(rng, ego, spec, margin=20.0)
        add(STATIC_PEDESTRIAN, dims, static_states(x, y, dims[2] / 2, rng.uniform(-math.pi, math.pi)))
    for _ in range(spec.n_poles):
        x, y, _ = _place(rng, ego, spec, margin=20.0)
        add(POLE, (0.3, 0.3, 3.0), static_states(x, y, 1.5, 0.0))
    return objects


def points_on_surface(box: Box3D, n: int, rng) -> np.ndarray:
    """``n`` points on the side/top faces of a box shrunk by 5%, in the box's frame."""
    u = rng.uniform(-1.0, 1.0, size=(n, 3))
    face = rng.integers(0, 3, size=n)
    sign = np.where(rng.random(n) < 0.5, -1.0, 1.0)
    u[np.arange(n), face] = np.where(face == 2, 1.0, sign)
    local = u * 0.95 * np.array([box.l, box.w, box.h]) / 2.0
    c, s = math.cos(box.heading), math.sin(box.heading)
    x = box.cx + c * local[:, 0] - s * local[:, 1]
    y = box.cy + s * local[:, 0] + c * local[:, 1]
    z = box.cz + local[:, 2]
    return np.column_stack([x, y, z])


def point_budget(box: Box3D, rng_range: float) -> int:
    """Point count proportional to the visible side area over range^2, at least one."""
    side = max(box.l, box.w) * box.h
    return int(max(1, min(400, round(POINT_DENSITY * side / max(rng_range, 1.0) ** 2))))


def generate_scene(spec: SceneSpec) -> SceneTruth:
    """Deterministic scene for ``spec.rng_seed``."""
    rng = np.random.default_rng(spec.rng_seed)
    ego = _ego_states(spec)
    objects = _make_objects(spec, ego, rng)
    frame_ids = list(range(spec.n_frames))
    poses = {f: FramePose.from_xy_yaw(ego[f, 0], ego[f, 1], ego[f, 2], z=SENSOR_HEIGHT, frame_id=f)
             for f in frame_ids}
    truth = SceneTruth(spec, frame_ids, poses, objects)
    for f in frame_ids:
        inv = poses[f].inverse()
        gt, ids, chunks = [], [], []
        for obj in objects:
            box = transform_box(obj.world_box(f), inv)
            r = box.bev_range
            if r >= spec.max_range:
                continue
            chunks.append(points_on_surface(box, point_budget(box, r), rng))
            if obj.kind == POLE:
                continue
            gt.append(box)
            ids.append(obj.obj_id)
        radius = spec.max_range * np.sqrt(rng.random(spec.ground_points))
        ang = rng.uniform(-math.pi, math.pi, spec.ground_points)
        ground = np.column_stack([radius * np.cos(ang), radius * np.sin(ang),
                                  np.full(spec.ground_points, -SENSOR_HEIGHT - 0.05)])
        pts = np.vstack(chunks + [ground]) if chunks else ground
        truth.clouds[f] = PointCloud(np.hstack([pts, np.zeros((len(pts), 1))]), f)
        truth.gt[f] = gt
        truth.gt_ids[f] = ids
    return truth


# --- detectors -------------------------------------------------------------


@dataclass
class ScoreModel:
    mean: float
    sigma: float
    lo: float = 0.01
    hi: float = 0.99

    def draw(self, rng, shift: float = 0.0) -> float:
        v = self.mean + shift + (rng.normal(0.0, self.sigma) if self.sigma > 0 else 0.0)
        return float(min(self.hi, max(self.lo, v)))


@dataclass
class DetectorProfile:
    name: str
    detector_id: str = "sim"
    source_domain: str = "sim"
    t_delta_max: float = 0.0
    tta_variant: str = "none"
    recall_curve: tuple[float, ...] = (0.9, 0.7, 0.4)
    pedestrian_recall_factor: float = 1.0
    center_noise_sigma: float = 0.1
    pedestrian_noise_scale: float = 0.5  # pedestrian centre/size noise relative to vehicles
    dims_noise_sigma: float = 0.05
    heading_noise_sigma: float = 0.03
    heading_flip_prob: float = 0.0
    tp_score: ScoreModel = field(default_factory=lambda: ScoreModel(0.7, 0.1))
    score_range_decay: float = 0.0  # TP score mean drop at max range
    fp_score: ScoreModel = field(default_factory=lambda: ScoreModel(0.3, 0.1))
    fp_rate_per_frame: float = 0.0
    ped_from_pole_prob: float = 0.0
    pole_score: ScoreModel = field(default_factory=lambda: ScoreModel(0.45, 0.08, 0.3, 0.6))

    def __post_init__(self):
        if any(not 0.0 <= r <= 1.0 for r in self.recall_curve):
            raise ValueError("recall values must lie in [0, 1]")
        sigmas = (self.center_noise_sigma, self.dims_noise_sigma, self.heading_noise_sigma)
        if any(s < 0 for s in sigmas) or self.pedestrian_noise_scale < 0:
            raise ValueError("noise sigmas must be >= 0")
        for p in (self.heading_flip_prob, self.ped_from_pole_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError("probabilities must lie in [0, 1]")
        for name in ("tp_score", "fp_score", "pole_score"):
            v = getattr(self, name)
            if not isinstance(v, ScoreModel):
                setattr(self, name, ScoreModel(*v) if not isinstance(v, dict) else ScoreModel(**v))

    def recall_at(self, rng_range: float, class_label: str, bins=DEFAULT_BINS) -> float:
        for (lo, hi), r in zip(bins, self.recall_curve):
            if lo <= rng_range < hi:
                break
        else:
            r = self.recall_curve[-1]
        if class_label == PEDESTRIAN:
            r *= self.pedestrian_recall_factor
        return r


def _perturb(box: Box3D, profile: DetectorProfile, rng) -> Box3D:
    cs, ds, hs = profile.center_noise_sigma, profile.dims_noise_sigma, profile.heading_noise_sigma
    if box.class_label == PEDESTRIAN:
        cs, ds = cs * profile.pedestrian_noise_scale, ds * profile.pedestrian_noise_scale
    dc = rng.normal(0.0, cs, 3) if cs > 0 else np.zeros(3)
    dd = rng.normal(0.0, ds, 3) if ds > 0 else np.zeros(3)
    dh = rng.normal(0.0, hs) if hs > 0 else 0.0
    flip = math.pi if profile.heading_flip_prob > 0 and rng.random() < profile.heading_flip_prob else 0.0
    if cs == 0 and ds == 0 and hs == 0 and flip == 0.0:
        return box
    return box.with_(
        cx=box.cx + dc[0], cy=box.cy + dc[1], cz=box.cz + dc[2],
        l=max(0.1, box.l + dd[0]), w=max(0.1, box.w + dd[1]), h=max(0.1, box.h + dd[2]),
        heading=wrap_angle(box.heading + dh + flip),
    )


def _random_fp(rng, max_range: float, score: float, set_id: str, detector_id: str) -> Box3D:
    r = rng.uniform(3.0, max_range)
    a = rng.uniform(-math.pi, math.pi)
    if rng.random() < 0.5:
        l, w, h = _vehicle_dims(rng)
        cls = VEHICLE
    else:
        l, w, h = _pedestrian_dims(rng)
        cls = PEDESTRIAN
    return Box3D(r * math.cos(a), r * math.sin(a), h / 2 - SENSOR_HEIGHT, l, w, h, rng.uniform(-math.pi, math.pi),
                 score=score, class_label=cls, provenance=(set_id,), detector_id=detector_id)


def simulate_detector(truth: SceneTruth, profile: DetectorProfile, seed: int, set_id: str | None = None) -> DetectionSet:
    """Detection set emulating a cross-domain detector on ``truth``."""
    rng = np.random.default_rng(seed)
    sid = set_id or profile.name
    max_range = truth.spec.max_range
    frames: dict[int, list[Box3D]] = {}
    poles = [o for o in truth.objects if o.kind == POLE]
    for f in truth.frame_ids:
        out = []
        for box in truth.gt[f]:
            r = box.bev_range
            if rng.random() >= profile.recall_at(r, box.class_label):
                continue
            shift = -profile.score_range_decay * r / max_range
            det = _perturb(box, profile, rng)
            out.append(det.with_(score=profile.tp_score.draw(rng, shift), provenance=(sid,),
                                 detector_id=profile.detector_id, source=""))
        if profile.ped_from_pole_prob > 0:
            for pole in poles:
                pbox = truth.sensor_box(pole, f)
                if pbox.bev_range >= max_range or rng.random() >= profile.ped_from_pole_prob:
                    continue
                l, w, h = 0.7, 0.6, 1.75
                det = Box3D(pbox.cx, pbox.cy, h / 2 - SENSOR_HEIGHT, l, w, h, pbox.heading,
                            class_label=PEDESTRIAN)
                det = _perturb(det, profile, rng)
                out.append(det.with_(score=profile.pole_score.draw(rng), provenance=(sid,),
                                     detector_id=profile.detector_id))
        n_fp = rng.poisson(profile.fp_rate_per_frame) if profile.fp_rate_per_frame > 0 else 0
        for _ in range(n_fp):
            out.append(_random_fp(rng, max_range, profile.fp_score.draw(rng), sid, profile.detector_id))
        frames[f] = out
    return DetectionSet(sid, profile.detector_id, profile.source_domain, profile.t_delta_max,
                        profile.tta_variant, frames)


# --- presets ---------------------------------------------------------------


def round1_profiles() -> list[DetectorProfile]:
    """Four pre-trained-style detectors: two from a dense-lidar source, two from a sparse one."""
    common = dict(heading_flip_prob=0.05, fp_rate_per_frame=1.0, score_range_decay=0.35,
                  fp_score=ScoreModel(0.35, 0.12), pedestrian_recall_factor=0.8)
    return [
        DetectorProfile("dense_pvc_t0.0", detector_id="PV-C", source_domain="dense", t_delta_max=0.0,
                        recall_curve=(0.92, 0.7, 0.4), tp_score=ScoreModel(0.8, 0.12),
                        ped_from_pole_prob=0.15, **common),
        DetectorProfile("dense_pvc_t0.4", detector_id="PV-C", source_domain="dense", t_delta_max=0.4,
                        recall_curve=(0.9, 0.68, 0.42), tp_score=ScoreModel(0.8, 0.12),
                        ped_from_pole_prob=0.15, **common),
        DetectorProfile("sparse_vxa_t0.2", detector_id="VX-A", source_domain="sparse", t_delta_max=0.2,
                        recall_curve=(0.85, 0.5, 0.2), tp_score=ScoreModel(0.72, 0.15),
                        center_noise_sigma=0.15, ped_from_pole_prob=0.3, **common),
        DetectorProfile("sparse_vxa_t0.4", detector_id="VX-A", source_domain="sparse", t_delta_max=0.4,
                        recall_curve=(0.83, 0.52, 0.22), tp_score=ScoreModel(0.72, 0.15),
                        center_noise_sigma=0.15, ped_from_pole_prob=0.3, **common),
    ]


def round2_profiles() -> list[DetectorProfile]:
    """Detectors re-trained on round-1 labels: longer range, better-separated scores."""
    common = dict(heading_flip_prob=0.02, fp_rate_per_frame=0.5, score_range_decay=0.2,
                  fp_score=ScoreModel(0.2, 0.08), pedestrian_recall_factor=0.9,
                  ped_from_pole_prob=0.1, pole_score=ScoreModel(0.2, 0.06, 0.05, 0.35))
    return [
        DetectorProfile("target_vxa", detector_id="VX-A", source_domain="target", t_delta_max=0.3,
                        recall_curve=(0.95, 0.82, 0.6), tp_score=ScoreModel(0.82, 0.08), **common),
        DetectorProfile("target_vxc", detector_id="VX-C", source_domain="target", t_delta_max=0.3,
                        recall_curve=(0.94, 0.8, 0.58), tp_score=ScoreModel(0.8, 0.08), **common),
    ]


PRESETS = {1: round1_profiles, 2: round2_profiles}


def simulate_round(truth: SceneTruth, round_index: int, seed: int,
                   profiles: Sequence[DetectorProfile] | None = None) -> list[DetectionSet]:
    profiles = list(profiles) if profiles is not None else PRESETS[min(round_index, max(PRESETS))]()
    ss = np.random.SeedSequence([seed, round_index])
    seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(len(profiles))]
    return [simulate_detector(truth, p, s) for p, s in zip(profiles, seeds)]
