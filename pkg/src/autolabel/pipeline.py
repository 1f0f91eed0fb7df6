"""One self-training round: fuse, track, refine, assemble and filter labels."""

from __future__ import annotations

import dataclasses
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from . import io
from .ensemble import ConfigError, DetectionSet, EnsembleSpec, assemble_frame_proposals, density_weighted_members
from .evaluate import DEFAULT_BINS, _bin_of, average_precision, bin_label, pr_by_range
from .geometry import CLASSES, PEDESTRIAN, VEHICLE, Box3D, FramePose, PointCloud, transform_box
from .io import InputError
from .kbf import KbfConfig
from .label import assemble_pseudo_labels, filter_labels
from .refine import RefineConfig, fill_dynamic_track, refine_pedestrians, refine_static_vehicle, retroactive_filter
from .tracking import (
    DYNAMIC,
    PED_ALL,
    STATIC,
    STREAM_CLASS,
    STREAMS,
    VEH_ALL,
    VEH_STATIC,
    Track,
    TrackerStreamConfig,
    classify_tracks,
    default_stream_configs,
    run_tracker,
)

log = logging.getLogger(__name__)


@dataclass
class LabelConfig:
    nms_thresh: float = 0.1
    s_pos: dict[str, float] = field(default_factory=lambda: {VEHICLE: 0.6, PEDESTRIAN: 0.6})


@dataclass
class EnsembleConfig:
    """Ensemble section of a round config.

    ``members=None`` uses every available detection set, weighted by
    ``target_density``/``density_of`` when those are given and 1.0 otherwise.
    """

    members: list[tuple[str, float]] | None = None
    class_exclusions: dict[str, list[str]] = field(default_factory=dict)
    cluster_iou_thresh: float = 0.1
    kbf: KbfConfig = field(default_factory=KbfConfig)
    target_density: str | None = None
    density_of: dict[str, str] = field(default_factory=dict)

    def resolve(self, sets: Sequence[DetectionSet]) -> EnsembleSpec:
        if self.members is not None:
            members = list(self.members)
        elif self.target_density is not None:
            members = density_weighted_members(sets, self.target_density, self.density_of)
        else:
            members = [(s.set_id, 1.0) for s in sets]
        return EnsembleSpec(members, self.class_exclusions, self.cluster_iou_thresh, self.kbf)


@dataclass
class RoundConfig:
    round_index: int = 1
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    tracker: dict[str, TrackerStreamConfig] = field(default_factory=default_stream_configs)
    refine: RefineConfig = field(default_factory=RefineConfig)
    label: LabelConfig = field(default_factory=LabelConfig)
    output_dir: str = "autolabel_out"

    @classmethod
    def for_round(cls, round_index: int) -> "RoundConfig":
        """Shipped schedule: conservative round 1, relaxed later rounds."""
        cfg = cls(round_index=round_index)
        if round_index == 1:
            cfg.refine.s_pos = {VEHICLE: 0.6, PEDESTRIAN: 0.7}
            cfg.refine.n_pos = {VEHICLE: 3, PEDESTRIAN: 4}
            cfg.label.s_pos = {VEHICLE: 0.6, PEDESTRIAN: 0.7}
        else:
            cfg.refine.s_pos = {VEHICLE: 0.6, PEDESTRIAN: 0.6}
            cfg.refine.n_pos = {VEHICLE: 2, PEDESTRIAN: 3}
            cfg.refine.use_static_pedestrians = True
            cfg.label.s_pos = {VEHICLE: 0.6, PEDESTRIAN: 0.6}
        return cfg

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        if d["ensemble"]["members"] is not None:
            d["ensemble"]["members"] = [list(m) for m in d["ensemble"]["members"]]
        for s in d["tracker"].values():
            s.pop("stream_name")
        return d

    @classmethod
    def from_dict(cls, data: Mapping[str, Any] | None) -> "RoundConfig":
        """Build from a nested mapping; missing keys keep their defaults."""
        data = dict(data or {})
        base = cls.for_round(int(data.get("round_index", 1)))
        _check_keys(data, {f.name for f in dataclasses.fields(cls)}, "")
        try:
            ens = dict(data.get("ensemble") or {})
            _check_keys(ens, {f.name for f in dataclasses.fields(EnsembleConfig)}, "ensemble.")
            kbf = _build(KbfConfig, ens.pop("kbf", None), dataclasses.asdict(base.ensemble.kbf), "ensemble.kbf")
            ens_defaults = {k: v for k, v in dataclasses.asdict(base.ensemble).items() if k != "kbf"}
            ens_defaults.update(ens)
            if ens_defaults["members"] is not None:
                ens_defaults["members"] = [tuple(m) for m in ens_defaults["members"]]
            ensemble = EnsembleConfig(kbf=kbf, **ens_defaults)

            trk = dict(data.get("tracker") or {})
            _check_keys(trk, set(STREAMS), "tracker.")
            tracker = {}
            for name in STREAMS:
                defaults = dataclasses.asdict(base.tracker[name])
                tracker[name] = _build(TrackerStreamConfig, trk.get(name), defaults, f"tracker.{name}")

            refine = _build(RefineConfig, data.get("refine"), dataclasses.asdict(base.refine), "refine")
            label = _build(LabelConfig, data.get("label"), dataclasses.asdict(base.label), "label")
            return cls(
                round_index=int(data.get("round_index", base.round_index)),
                ensemble=ensemble,
                tracker=tracker,
                refine=refine,
                label=label,
                output_dir=str(data.get("output_dir", base.output_dir)),
            )
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: str | Path) -> "RoundConfig":
        path = Path(path)
        try:
            text = path.read_text()
        except OSError as exc:
            raise InputError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML: {exc}") from exc
        if data is not None and not isinstance(data, Mapping):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(data)

    def dump(self, path: str | Path):
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))


def _check_keys(data: Mapping, allowed: set[str], prefix: str):
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")


def _build(kind, overrides, defaults: dict, path: str):
    overrides = dict(overrides or {})
    _check_keys(overrides, set(defaults), path + ".")
    merged = dict(defaults)
    for k, v in overrides.items():
        if isinstance(merged.get(k), dict) and isinstance(v, Mapping):
            merged[k] = {**merged[k], **v}
        else:
            merged[k] = v
    try:
        return kind(**merged)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def validate_config(cfg: RoundConfig) -> list[str]:
    """Cross-module threshold checks; an empty list means the config is valid."""
    problems = []
    if cfg.round_index < 1:
        problems.append("round_index: must be >= 1")
    missing = [s for s in STREAMS if s not in cfg.tracker]
    for s in missing:
        problems.append(f"tracker.{s}: stream missing")
    if not missing:
        static, every = cfg.tracker[VEH_STATIC], cfg.tracker[VEH_ALL]
        if static.assoc_iou_thresh <= every.assoc_iou_thresh:
            problems.append(
                f"tracker.{VEH_STATIC}.assoc_iou_thresh: must exceed tracker.{VEH_ALL}.assoc_iou_thresh "
                f"({static.assoc_iou_thresh} <= {every.assoc_iou_thresh})"
            )
        if every.input_score_thresh < static.input_score_thresh:
            problems.append(
                f"tracker.{VEH_ALL}.input_score_thresh: must be >= tracker.{VEH_STATIC}.input_score_thresh "
                f"({every.input_score_thresh} < {static.input_score_thresh})"
            )
        for section, s_pos in (("refine", cfg.refine.s_pos), ("label", cfg.label.s_pos)):
            for name in STREAMS:
                cls = STREAM_CLASS[name]
                if cls not in s_pos:
                    continue
                thr = cfg.tracker[name].input_score_thresh
                if s_pos[cls] < thr:
                    problems.append(
                        f"{section}.s_pos.{cls}: below tracker.{name}.input_score_thresh ({s_pos[cls]} < {thr})"
                    )
    for section, s_pos in (("refine", cfg.refine.s_pos), ("label", cfg.label.s_pos)):
        for cls in CLASSES:
            if cls not in s_pos:
                problems.append(f"{section}.s_pos.{cls}: missing")
    if not 0.0 < cfg.label.nms_thresh <= 1.0:
        problems.append("label.nms_thresh: must lie in (0, 1]")
    return problems


@dataclass
class SequenceInputs:
    sets: list[DetectionSet]
    poses: dict[int, FramePose]
    clouds: dict[int, PointCloud]
    gt: dict[int, list[Box3D]] | None = None

    @property
    def frame_ids(self) -> list[int]:
        return sorted(self.poses)

    def check(self):
        """Fail fast on frame-id disagreement between poses, clouds, sets and GT."""
        frames = set(self.poses)
        if set(self.clouds) != frames:
            extra = sorted(set(self.clouds) ^ frames)[:5]
            raise InputError(f"point cloud frames do not match pose frames (e.g. {extra})")
        for s in self.sets:
            extra = sorted(set(s.frames) - frames)
            if extra:
                raise InputError(f"detection set {s.set_id!r} has frames without poses: {extra[:5]}")
        if self.gt is not None:
            extra = sorted(set(self.gt) - frames)
            if extra:
                raise InputError(f"ground truth has frames without poses: {extra[:5]}")

    @classmethod
    def load(cls, input_dir: str | Path, set_ids: Sequence[str] | None = None) -> "SequenceInputs":
        root = Path(input_dir)
        if not root.is_dir():
            raise InputError(f"input directory not found: {root}")
        available = io.list_detection_sets(root / "sets")
        wanted = available if set_ids is None else list(set_ids)
        missing = [s for s in wanted if s not in available]
        if missing:
            raise InputError(f"missing detection set(s): {', '.join(missing)}")
        sets = [io.read_detection_set(root / "sets", s) for s in wanted]
        gt_path = root / "gt.jsonl"
        gt = io.read_frames(gt_path) if gt_path.exists() else None
        inputs = cls(sets, io.read_poses(root / "poses.jsonl"), io.read_clouds(root / "clouds"), gt)
        inputs.check()
        return inputs

    def save(self, output_dir: str | Path):
        root = Path(output_dir)
        for s in self.sets:
            io.write_detection_set(root / "sets", s)
        io.write_poses(root / "poses.jsonl", self.poses)
        io.write_clouds(root / "clouds", self.clouds)
        if self.gt is not None:
            io.write_frames(root / "gt.jsonl", self.gt)


@dataclass
class RoundResult:
    labels: dict[int, list[Box3D]]
    report: dict
    proposals: dict[int, list[Box3D]]
    ensemble_labels: dict[int, list[Box3D]]
    tracks: dict[str, list[Track]]


def _fuse_one(args):
    fid, sets, spec = args
    return assemble_frame_proposals(fid, sets, spec)


def fuse_frames(inputs: SequenceInputs, spec: EnsembleSpec, jobs: int = 1) -> dict[int, list[Box3D]]:
    frames = inputs.frame_ids
    if jobs > 1 and len(frames) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            fused = list(pool.map(_fuse_one, [(f, inputs.sets, spec) for f in frames], chunksize=16))
    else:
        fused = [assemble_frame_proposals(f, inputs.sets, spec) for f in frames]
    return dict(zip(frames, fused))


def track_streams(proposals: Mapping[int, list[Box3D]], poses: Mapping[int, FramePose],
                  cfg: RoundConfig) -> dict[str, list[Track]]:
    frames = [(f, proposals[f]) for f in sorted(proposals)]
    out = {}
    for name in STREAMS:
        tracks = run_tracker(frames, poses, cfg.tracker[name])
        out[name] = classify_tracks(tracks, cfg.refine.dist_thresh, cfg.refine.var_thresh)
    return out


def _to_sensor(per_frame: dict[int, list[Box3D]], poses: Mapping[int, FramePose]) -> dict[int, list[Box3D]]:
    inv = {}
    out = {}
    for f, boxes in per_frame.items():
        if f not in poses:
            continue
        if f not in inv:
            inv[f] = poses[f].inverse()
        out[f] = [transform_box(b, inv[f]) for b in boxes]
    return out


def refine_tracks(tracks: Mapping[str, list[Track]], cfg: RoundConfig, frame_range: tuple[int, int]):
    """World-frame refined boxes per frame: (static vehicles, dynamic vehicles, pedestrians)."""
    static, veh, ped = {}, {}, {}
    for t in retroactive_filter([t for t in tracks[VEH_STATIC] if t.motion == STATIC], cfg.refine):
        score = t.max_score
        for f, box in refine_static_vehicle(t, cfg.refine, cfg.ensemble.kbf).items():
            # confirmed tracks label every frame with the track's best score
            static.setdefault(f, []).append(box.with_(score=score))
    for t in retroactive_filter([t for t in tracks[VEH_ALL] if t.motion == DYNAMIC], cfg.refine):
        for f, o in fill_dynamic_track(t, cfg.refine, frame_range).observations.items():
            veh.setdefault(f, []).append(o.box.with_(score=t.max_score))
    for t in refine_pedestrians(tracks[PED_ALL], cfg.refine, frame_range):
        for f, o in t.observations.items():
            ped.setdefault(f, []).append(o.box.with_(score=t.max_score))
    return static, veh, ped


def label_counts(labels: Mapping[int, list[Box3D]], bins=DEFAULT_BINS) -> dict:
    counts = {c: {bin_label(b): 0 for b in bins} for c in CLASSES}
    for c in CLASSES:
        counts[c]["beyond"] = 0
        counts[c]["total"] = 0
    for boxes in labels.values():
        for b in boxes:
            k = _bin_of(b, bins)
            counts[b.class_label][bin_label(bins[k]) if k is not None else "beyond"] += 1
            counts[b.class_label]["total"] += 1
    return counts


def _source_counts(labels: Mapping[int, list[Box3D]]) -> dict:
    out: dict[str, int] = {}
    for boxes in labels.values():
        for b in boxes:
            out[b.source] = out.get(b.source, 0) + 1
    return dict(sorted(out.items()))


def _evaluation(labels, gt, bins) -> dict:
    return {"pr_by_range": pr_by_range(labels, gt, bins), "ap_bev": average_precision(labels, gt)}


def run_round(inputs: SequenceInputs, cfg: RoundConfig, write: bool = True, jobs: int = 1,
              bins=DEFAULT_BINS) -> RoundResult:
    """Produce round labels from detection sets, poses and clouds.

    Raises :class:`ConfigError` on threshold violations and :class:`InputError`
    on inconsistent inputs, before any output is written.
    """
    problems = validate_config(cfg)
    if problems:
        raise ConfigError("; ".join(problems))
    inputs.check()
    spec = cfg.ensemble.resolve(inputs.sets)
    frames = inputs.frame_ids
    log.info("round %d: %d frames, %d detection sets", cfg.round_index, len(frames), len(inputs.sets))

    proposals = fuse_frames(inputs, spec, jobs)
    tracks = track_streams(proposals, inputs.poses, cfg)
    frame_range = (frames[0], frames[-1]) if frames else (0, -1)
    static_w, veh_w, ped_w = refine_tracks(tracks, cfg, frame_range)
    static, veh, ped = (_to_sensor(x, inputs.poses) for x in (static_w, veh_w, ped_w))
    log.info("tracks: %s", {k: len(v) for k, v in tracks.items()})

    labels, ensemble_labels = {}, {}
    for f in frames:
        cloud = inputs.clouds[f]
        assembled = assemble_pseudo_labels(f, proposals[f], static.get(f, []), veh.get(f, []), ped.get(f, []),
                                           cfg.label.nms_thresh)
        labels[f] = filter_labels(assembled, cloud, cfg.label.s_pos)
        baseline = assemble_pseudo_labels(f, proposals[f], [], [], [], cfg.label.nms_thresh)
        ensemble_labels[f] = filter_labels(baseline, cloud, cfg.label.s_pos)

    report = {
        "round_index": cfg.round_index,
        "n_frames": len(frames),
        "detection_sets": [s.set_id for s in inputs.sets],
        "ensemble_members": [[sid, w] for sid, w in spec.members],
        "n_tracks": {k: len(v) for k, v in tracks.items()},
        "n_labels": sum(len(v) for v in labels.values()),
        "label_counts": label_counts(labels, bins),
        "source_counts": _source_counts(labels),
    }
    if inputs.gt is not None:
        report["evaluation"] = {
            "refined": _evaluation(labels, inputs.gt, bins),
            "ensemble": _evaluation(ensemble_labels, inputs.gt, bins),
        }
    result = RoundResult(labels, report, proposals, ensemble_labels, tracks)
    if write:
        write_round(result, cfg)
    return result


def format_report(report: Mapping) -> str:
    lines = [f"round {report['round_index']}: {report['n_frames']} frames, {report['n_labels']} labels"]
    lines.append("tracks: " + ", ".join(f"{k}={v}" for k, v in report["n_tracks"].items()))
    for cls, counts in report["label_counts"].items():
        lines.append(f"{cls}: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    ev = report.get("evaluation")
    if ev:
        for cls in CLASSES:
            for name in ("ensemble", "refined"):
                cells = []
                for b, row in ev[name]["pr_by_range"][cls].items():
                    p = "-" if row["precision"] is None else f"{row['precision']:.3f}"
                    r = "-" if row["recall"] is None else f"{row['recall']:.3f}"
                    cells.append(f"{b}m P={p} R={r}")
                lines.append(f"{cls} {name:8s} " + " | ".join(cells) + f" | AP_BEV={ev[name]['ap_bev'][cls]:.3f}")
    return "\n".join(lines) + "\n"


def write_round(result: RoundResult, cfg: RoundConfig):
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    io.write_labels(out / "labels.jsonl", result.labels)
    io.write_frames(out / "proposals.jsonl", result.proposals)
    for name, tracks in result.tracks.items():
        io.write_tracks(out / f"tracks_{name}.jsonl", tracks)
    (out / "report.json").write_text(json.dumps(result.report, indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(format_report(result.report))
