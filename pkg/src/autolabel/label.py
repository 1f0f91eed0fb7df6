"""Final pseudo-label assembly and filtering for one frame."""

from __future__ import annotations

from typing import Mapping, Sequence

from .geometry import CLASSES, Box3D, PointCloud, nms_bev, points_in_box

FUSED = "fused"
STATIC_REFINED = "static_refined"
TRACK_VEH = "track_veh"
TRACK_PED = "track_ped"
SOURCE_TAGS = (FUSED, STATIC_REFINED, TRACK_VEH, TRACK_PED)

# lower rank wins equal-score NMS ties
SOURCE_PRIORITY = {STATIC_REFINED: 0, TRACK_VEH: 1, TRACK_PED: 1, FUSED: 2}


def _priority(box: Box3D) -> int:
    return SOURCE_PRIORITY.get(box.source, len(SOURCE_PRIORITY))


def assemble_pseudo_labels(
    frame_id: int,
    b_kbf: Sequence[Box3D],
    b_static: Sequence[Box3D],
    t_veh_refined: Sequence[Box3D],
    t_ped_refined: Sequence[Box3D],
    nms_thresh: float = 0.1,
) -> list[Box3D]:
    """Concatenate the four label sources and run per-class BEV NMS.

    Boxes are re-tagged with their source so that equal-score duplicates resolve
    static-refined first, then tracked, then fused.
    """
    pool = (
        [b.with_(source=STATIC_REFINED) for b in b_static]
        + [b.with_(source=TRACK_VEH) for b in t_veh_refined]
        + [b.with_(source=TRACK_PED) for b in t_ped_refined]
        + [b.with_(source=FUSED) for b in b_kbf]
    )
    out: list[Box3D] = []
    for cls in CLASSES:
        same = [b for b in pool if b.class_label == cls]
        out.extend(nms_bev(same, nms_thresh, tie_key=_priority))
    return out


def filter_labels(labels: Sequence[Box3D], cloud: PointCloud, s_pos: Mapping[str, float]) -> list[Box3D]:
    """Keep labels holding at least one current-frame point and scoring >= ``s_pos``."""
    current = cloud.current_frame()
    return [b for b in labels if b.score >= s_pos[b.class_label] and points_in_box(b, current) >= 1]
