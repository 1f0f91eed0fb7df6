"""Detection-set bookkeeping and per-frame fused proposals."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .geometry import CLASSES, Box3D, cluster_indices_by_iou
from .kbf import KbfConfig, Rejected, fuse_cluster


class ConfigError(ValueError):
    """Raised when a configuration references something that does not exist."""


@dataclass
class DetectionSet:
    """All predictions of one detector variant over a sequence."""

    set_id: str
    detector_id: str
    source_domain: str
    t_delta_max: float = 0.0
    tta_variant: str = "none"
    frames: dict[int, list[Box3D]] = field(default_factory=dict)

    def __post_init__(self):
        if self.t_delta_max < 0:
            raise ValueError("t_delta_max must be >= 0")
        for fid, boxes in self.frames.items():
            for b in boxes:
                if b.provenance != (self.set_id,):
                    raise ValueError(f"box in frame {fid} carries provenance {b.provenance}, expected {self.set_id!r}")

    def boxes(self, frame_id: int) -> list[Box3D]:
        return self.frames.get(frame_id, [])

    def manifest(self) -> dict:
        return {
            "set_id": self.set_id,
            "detector_id": self.detector_id,
            "source_domain": self.source_domain,
            "t_delta_max": self.t_delta_max,
            "tta_variant": self.tta_variant,
        }


@dataclass
class EnsembleSpec:
    members: list[tuple[str, float]]
    class_exclusions: dict[str, set[str]] = field(default_factory=dict)
    cluster_iou_thresh: float = 0.1
    kbf: KbfConfig = field(default_factory=KbfConfig)

    def __post_init__(self):
        self.members = [(str(sid), float(w)) for sid, w in self.members]
        ids = [sid for sid, _ in self.members]
        if len(set(ids)) != len(ids):
            raise ConfigError(f"duplicate ensemble members in {ids}")
        for sid, w in self.members:
            if w <= 0:
                raise ConfigError(f"member {sid!r} has non-positive weight {w}")
        self.class_exclusions = {k: set(v) for k, v in self.class_exclusions.items()}
        if not 0.0 < self.cluster_iou_thresh < 1.0:
            raise ConfigError("cluster_iou_thresh must lie in (0, 1)")

    @property
    def weights(self) -> dict[str, float]:
        return dict(self.members)


def density_weighted_members(
    sets: Sequence[DetectionSet],
    target_density: str,
    density_of: Mapping[str, str],
    matched_weight: float = 1.5,
    other_weight: float = 1.0,
) -> list[tuple[str, float]]:
    """Weight sets whose source lidar density matches the target above the rest."""
    return [
        (s.set_id, matched_weight if density_of.get(s.source_domain) == target_density else other_weight)
        for s in sets
    ]


def _index_sets(sets: Sequence[DetectionSet], spec: EnsembleSpec) -> list[DetectionSet]:
    by_id = {s.set_id: s for s in sets}
    missing = [sid for sid, _ in spec.members if sid not in by_id]
    if missing:
        raise ConfigError(f"ensemble references unknown detection set(s): {', '.join(missing)}")
    return [by_id[sid] for sid, _ in spec.members]


def assemble_frame_proposals(frame_id: int, sets: Sequence[DetectionSet], spec: EnsembleSpec) -> list[Box3D]:
    """Fuse all member predictions of one frame into a single proposal set."""
    members = _index_sets(sets, spec)
    weights = spec.weights
    per_class: dict[str, list[tuple[Box3D, float]]] = defaultdict(list)
    for dset in members:
        excluded = spec.class_exclusions.get(dset.set_id, set())
        w = weights[dset.set_id]
        for box in dset.boxes(frame_id):
            if box.class_label in excluded:
                continue
            per_class[box.class_label].append((box, w))

    fused: list[Box3D] = []
    for cls in CLASSES:
        items = per_class.get(cls, [])
        if not items:
            continue
        boxes = [b for b, _ in items]
        for group in cluster_indices_by_iou(boxes, spec.cluster_iou_thresh):
            out = fuse_cluster([boxes[i] for i in group], [items[i][1] for i in group], spec.kbf)
            if isinstance(out, Rejected):
                continue
            fused.append(out.with_(source="fused"))
    return fused


def validate_vmfi_family(sets: Sequence[DetectionSet]) -> dict:
    """Group sets by detector and list the accumulation/TTA variants present.

    Returns ``{"detectors": {detector_id: {"t_delta_max": [...], "tta_variants": [...],
    "variants": [[t, tta, set_id], ...]}}, "duplicates": [...]}``. Empty input gives
    an empty report.
    """
    if not sets:
        return {}
    detectors: dict[str, dict] = {}
    seen: dict[tuple, str] = {}
    duplicates = []
    for s in sorted(sets, key=lambda s: (s.detector_id, s.t_delta_max, s.tta_variant, s.set_id)):
        entry = detectors.setdefault(s.detector_id, {"t_delta_max": [], "tta_variants": [], "variants": []})
        if s.t_delta_max not in entry["t_delta_max"]:
            entry["t_delta_max"].append(s.t_delta_max)
        if s.tta_variant not in entry["tta_variants"]:
            entry["tta_variants"].append(s.tta_variant)
        entry["variants"].append([s.t_delta_max, s.tta_variant, s.set_id])
        triple = (s.detector_id, s.t_delta_max, s.tta_variant)
        if triple in seen:
            duplicates.append({"detector_id": s.detector_id, "t_delta_max": s.t_delta_max,
                               "tta_variant": s.tta_variant, "set_ids": [seen[triple], s.set_id]})
        else:
            seen[triple] = s.set_id
    for entry in detectors.values():
        entry["n_vmfi_variants"] = len(entry["t_delta_max"])
    return {"detectors": detectors, "duplicates": duplicates}
