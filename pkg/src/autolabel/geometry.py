"""Oriented-box geometry: BEV/3D IoU, rotated NMS, IoU clustering, point containment."""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

VEHICLE = "Vehicle"
PEDESTRIAN = "Pedestrian"
CLASSES = (VEHICLE, PEDESTRIAN)

TWO_PI = 2.0 * math.pi


def wrap_angle(angle: float) -> float:
    """Map an angle to [-pi, pi). Values already in range are returned untouched."""
    if -math.pi <= angle < math.pi:
        return angle
    wrapped = math.fmod(angle + math.pi, TWO_PI)
    if wrapped < 0.0:
        wrapped += TWO_PI
    wrapped -= math.pi
    # fmod rounding can land exactly on +pi
    if wrapped >= math.pi:
        wrapped -= TWO_PI
    return wrapped


@dataclass(frozen=True)
class Box3D:
    """One oriented 3D box.

    ``provenance`` holds the detection-set ids that produced the box (one id for
    raw detections, several for fused boxes). ``source`` is a free-form tag used
    by the label stage (``fused``, ``static_refined``, ...).
    """

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    heading: float
    score: float = 1.0
    class_label: str = VEHICLE
    provenance: tuple[str, ...] = ()
    detector_id: str = ""
    source: str = ""

    def __post_init__(self):
        if not (self.l > 0 and self.w > 0 and self.h > 0):
            raise ValueError(f"box dimensions must be positive, got {(self.l, self.w, self.h)}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")
        if self.class_label not in CLASSES:
            raise ValueError(f"unknown class label {self.class_label!r}")
        object.__setattr__(self, "heading", wrap_angle(float(self.heading)))
        if isinstance(self.provenance, str):
            object.__setattr__(self, "provenance", (self.provenance,))
        else:
            object.__setattr__(self, "provenance", tuple(self.provenance))

    @property
    def set_id(self) -> str:
        return min(self.provenance) if self.provenance else ""

    @property
    def center(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.cz])

    @property
    def bev_range(self) -> float:
        return math.hypot(self.cx, self.cy)

    def geometry(self) -> tuple[float, ...]:
        return (self.cx, self.cy, self.cz, self.l, self.w, self.h, self.heading)

    def with_(self, **changes) -> "Box3D":
        return replace(self, **changes)

    def corners_bev(self) -> list[tuple[float, float]]:
        """Footprint corners, counter-clockwise."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = self.l / 2.0, self.w / 2.0
        out = []
        for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw)):
            out.append((self.cx + c * dx - s * dy, self.cy + s * dx + c * dy))
        return out


@dataclass
class PointCloud:
    """Points as an (n, 4) array of x, y, z, t with t <= 0 seconds."""

    points: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = np.zeros((0, 4))
        if pts.ndim != 2 or pts.shape[1] not in (3, 4):
            raise ValueError(f"points must be (n, 3) or (n, 4), got {pts.shape}")
        if pts.shape[1] == 3:
            pts = np.hstack([pts, np.zeros((len(pts), 1))])
        if np.any(pts[:, 3] > 0):
            raise ValueError("point time deltas must be <= 0")
        self.points = pts

    def current_frame(self) -> "PointCloud":
        """Slice holding only t == 0 points."""
        return PointCloud(self.points[self.points[:, 3] == 0.0], self.frame_id)

    def __len__(self):
        return len(self.points)


@dataclass
class FramePose:
    """Sensor-to-world transform: p_world = rotation @ p_sensor + translation."""

    rotation: np.ndarray
    translation: np.ndarray
    frame_id: int = 0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=float).reshape(3)
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-6):
            raise ValueError("pose rotation is not orthonormal")

    @classmethod
    def from_xy_yaw(cls, x: float, y: float, yaw: float, z: float = 0.0, frame_id: int = 0):
        c, s = math.cos(yaw), math.sin(yaw)
        rot = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rot, np.array([x, y, z]), frame_id)

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def inverse(self) -> "FramePose":
        rt = self.rotation.T
        return FramePose(rt, -rt @ self.translation, self.frame_id)


def transform_box(box: Box3D, pose: FramePose) -> Box3D:
    """Apply a rigid transform to a box (heading rotates by the pose yaw)."""
    center = pose.rotation @ box.center + pose.translation
    return replace(
        box,
        cx=float(center[0]),
        cy=float(center[1]),
        cz=float(center[2]),
        heading=wrap_angle(box.heading + pose.yaw),
    )


# --- polygon clipping ------------------------------------------------------


def _clip_polygon(subject, clip):
    """Sutherland-Hodgman clipping of ``subject`` by convex CCW polygon ``clip``.

    Points on a clip edge count as inside.
    """
    output = list(subject)
    n = len(clip)
    for i in range(n):
        if not output:
            return []
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay
        inp = output
        output = []
        sx, sy = inp[-1]
        s_side = ex * (sy - ay) - ey * (sx - ax)
        for px, py in inp:
            p_side = ex * (py - ay) - ey * (px - ax)
            if p_side >= 0.0:
                if s_side < 0.0:
                    t = s_side / (s_side - p_side)
                    output.append((sx + t * (px - sx), sy + t * (py - sy)))
                output.append((px, py))
            elif s_side >= 0.0:
                t = s_side / (s_side - p_side)
                output.append((sx + t * (px - sx), sy + t * (py - sy)))
            sx, sy, s_side = px, py, p_side
    return output


def _polygon_area(poly) -> float:
    if len(poly) < 3:
        return 0.0
    acc = 0.0
    x0, y0 = poly[-1]
    for x1, y1 in poly:
        acc += x0 * y1 - x1 * y0
        x0, y0 = x1, y1
    return abs(acc) / 2.0


def _half_diag(box: Box3D) -> float:
    return 0.5 * math.hypot(box.l, box.w)


def _same_footprint(a: Box3D, b: Box3D) -> bool:
    return a.cx == b.cx and a.cy == b.cy and a.l == b.l and a.w == b.w and a.heading == b.heading


def bev_intersection(a: Box3D, b: Box3D) -> float:
    if math.hypot(a.cx - b.cx, a.cy - b.cy) > _half_diag(a) + _half_diag(b):
        return 0.0
    if _same_footprint(a, b):
        return a.l * a.w
    return _polygon_area(_clip_polygon(a.corners_bev(), b.corners_bev()))


def bev_iou(a: Box3D, b: Box3D) -> float:
    """Intersection over union of the rotated BEV footprints."""
    inter = bev_intersection(a, b)
    if inter <= 0.0:
        return 0.0
    union = a.l * a.w + b.l * b.w - inter
    return min(1.0, max(0.0, inter / union))


def iou_3d(a: Box3D, b: Box3D) -> float:
    """Volume IoU: BEV intersection times vertical overlap, over union of volumes."""
    if _same_footprint(a, b) and a.cz == b.cz and a.h == b.h:
        return 1.0
    z_overlap = min(a.cz + a.h / 2, b.cz + b.h / 2) - max(a.cz - a.h / 2, b.cz - b.h / 2)
    if z_overlap <= 0.0:
        return 0.0
    inter = bev_intersection(a, b) * z_overlap
    if inter <= 0.0:
        return 0.0
    union = a.l * a.w * a.h + b.l * b.w * b.h - inter
    return min(1.0, max(0.0, inter / union))


def candidate_pairs(boxes: Sequence[Box3D], others: Sequence[Box3D] | None = None) -> np.ndarray:
    """Index pairs whose circumscribed BEV circles overlap.

    With ``others`` omitted, returns pairs i < j within ``boxes``.
    """
    if not boxes or (others is not None and not others):
        return np.zeros((0, 2), dtype=int)
    a = np.array([[b.cx, b.cy, _half_diag(b)] for b in boxes])
    b = a if others is None else np.array([[o.cx, o.cy, _half_diag(o)] for o in others])
    dist = np.hypot(a[:, None, 0] - b[None, :, 0], a[:, None, 1] - b[None, :, 1])
    near = dist <= a[:, None, 2] + b[None, :, 2]
    if others is None:
        near = np.triu(near, k=1)
    return np.argwhere(near)


def nms_bev(
    boxes: Sequence[Box3D],
    iou_thresh: float,
    tie_key: Callable[[Box3D], object] | None = None,
) -> list[Box3D]:
    """Greedy rotated NMS in BEV.

    Boxes are visited by descending score; equal scores fall back to ``tie_key``
    (default: lowest provenance set id), then to input order. A box is dropped
    when its IoU with an already kept box is >= ``iou_thresh``.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must be in (0, 1], got {iou_thresh}")
    if not boxes:
        return []
    key = tie_key or (lambda b: b.set_id)
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, key(boxes[i]), i))
    neighbours: dict[int, list[int]] = {i: [] for i in range(len(boxes))}
    for i, j in candidate_pairs(boxes):
        neighbours[int(i)].append(int(j))
        neighbours[int(j)].append(int(i))
    kept: list[int] = []
    kept_set: set[int] = set()
    for i in order:
        if any(j in kept_set and bev_iou(boxes[i], boxes[j]) >= iou_thresh for j in neighbours[i]):
            continue
        kept.append(i)
        kept_set.add(i)
    return [boxes[i] for i in kept]


def points_in_box(box: Box3D, cloud: PointCloud | np.ndarray) -> int:
    """Number of points inside the rotated cuboid, boundaries inclusive."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(pts) == 0:
        return 0
    return int(np.count_nonzero(points_in_box_mask(box, pts)))


def points_in_box_mask(box: Box3D, pts: np.ndarray) -> np.ndarray:
    dx = pts[:, 0] - box.cx
    dy = pts[:, 1] - box.cy
    c, s = math.cos(box.heading), math.sin(box.heading)
    local_x = c * dx + s * dy
    local_y = -s * dx + c * dy
    return (
        (np.abs(local_x) <= box.l / 2.0)
        & (np.abs(local_y) <= box.w / 2.0)
        & (np.abs(pts[:, 2] - box.cz) <= box.h / 2.0)
    )


def cluster_indices_by_iou(boxes: Sequence[Box3D], thresh: float) -> list[list[int]]:
    """Like :func:`cluster_by_iou` but returns input indices."""
    parent = list(range(len(boxes)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in candidate_pairs(boxes):
        i, j = int(i), int(j)
        if bev_iou(boxes[i], boxes[j]) >= thresh:
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[max(ri, rj)] = min(ri, rj)

    groups: dict[int, list[int]] = {}
    for i in range(len(boxes)):
        groups.setdefault(find(i), []).append(i)
    return [groups[k] for k in sorted(groups)]


def cluster_by_iou(boxes: Sequence[Box3D], thresh: float) -> list[list[Box3D]]:
    """Connected components of the graph linking boxes with BEV IoU >= ``thresh``.

    Clusters are ordered by their first member's input index, members keep
    input order.
    """
    return [[boxes[i] for i in group] for group in cluster_indices_by_iou(boxes, thresh)]
