"""Offline 3D auto-labeling from detector ensembles, tracking and temporal refinement."""

from .geometry import PEDESTRIAN, VEHICLE, Box3D, FramePose, PointCloud, bev_iou, iou_3d, nms_bev
from .kbf import KbfConfig, Rejected, fuse_cluster, kde_mode

__version__ = "0.1.0"

__all__ = [
    "PEDESTRIAN",
    "VEHICLE",
    "Box3D",
    "FramePose",
    "PointCloud",
    "KbfConfig",
    "Rejected",
    "bev_iou",
    "fuse_cluster",
    "iou_3d",
    "kde_mode",
    "nms_bev",
]
