"""On-disk formats: detection sets, poses, clouds, ground truth, tracks, labels.

Layout of a sequence directory::

    sets/<set_id>.jsonl           one {"frame_id", "boxes"} record per frame
    sets/<set_id>.manifest.json   {"set_id", "detector_id", "source_domain", "t_delta_max", "tta_variant"}
    poses.jsonl                   {"frame_id", "rotation", "translation"}
    clouds/<frame_id:06d>.npy     float64 (n, 4) array of x, y, z, t
    gt.jsonl                      optional, same record shape as detection sets

Box rows are ``[cx, cy, cz, l, w, h, heading, score, class]``; label rows append
a source tag.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .ensemble import DetectionSet
from .geometry import Box3D, FramePose, PointCloud
from .tracking import Observation, Track


class InputError(RuntimeError):
    """Missing, unreadable or mutually inconsistent input files."""


def box_row(box: Box3D, with_source: bool = False) -> list:
    row = [box.cx, box.cy, box.cz, box.l, box.w, box.h, box.heading, box.score, box.class_label]
    if with_source:
        row.append(box.source)
    return row


def box_from_row(row, set_id: str | None = None, detector_id: str = "") -> Box3D:
    if len(row) not in (9, 10):
        raise InputError(f"box row must have 9 or 10 entries, got {len(row)}")
    cx, cy, cz, l, w, h, heading, score, cls = row[:9]
    return Box3D(float(cx), float(cy), float(cz), float(l), float(w), float(h), float(heading),
                 score=float(score), class_label=str(cls),
                 provenance=(set_id,) if set_id else (), detector_id=detector_id,
                 source=str(row[9]) if len(row) == 10 else "")


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def write_jsonl(path: Path, records: Iterable[dict]):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for rec in records:
            fh.write(_dumps(rec) + "\n")


def read_jsonl(path: Path) -> list[dict]:
    path = Path(path)
    try:
        with open(path) as fh:
            return [json.loads(line) for line in fh if line.strip()]
    except FileNotFoundError as exc:
        raise InputError(f"missing file: {path}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc


def write_frames(path: Path, frames: Mapping[int, list[Box3D]], key: str = "boxes", with_source: bool = False):
    write_jsonl(path, ({"frame_id": f, key: [box_row(b, with_source) for b in frames[f]]} for f in sorted(frames)))


def read_frames(path: Path, key: str = "boxes", set_id: str | None = None, detector_id: str = "") -> dict[int, list[Box3D]]:
    out = {}
    for rec in read_jsonl(path):
        try:
            out[int(rec["frame_id"])] = [box_from_row(r, set_id, detector_id) for r in rec[key]]
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"bad record in {path}: {exc}") from exc
    return out


def write_detection_set(directory: Path, dset: DetectionSet):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_frames(directory / f"{dset.set_id}.jsonl", dset.frames)
    (directory / f"{dset.set_id}.manifest.json").write_text(_dumps(dset.manifest()) + "\n")


def read_detection_set(directory: Path, set_id: str) -> DetectionSet:
    directory = Path(directory)
    mpath = directory / f"{set_id}.manifest.json"
    try:
        manifest = json.loads(mpath.read_text())
    except FileNotFoundError as exc:
        raise InputError(f"missing detection set manifest: {mpath}") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise InputError(f"cannot read {mpath}: {exc}") from exc
    frames = read_frames(directory / f"{set_id}.jsonl", set_id=set_id, detector_id=manifest.get("detector_id", ""))
    return DetectionSet(
        set_id=manifest["set_id"],
        detector_id=manifest.get("detector_id", ""),
        source_domain=manifest.get("source_domain", ""),
        t_delta_max=float(manifest.get("t_delta_max", 0.0)),
        tta_variant=manifest.get("tta_variant", "none"),
        frames=frames,
    )


def list_detection_sets(directory: Path) -> list[str]:
    directory = Path(directory)
    return sorted(p.name[: -len(".manifest.json")] for p in directory.glob("*.manifest.json"))


def write_poses(path: Path, poses: Mapping[int, FramePose]):
    write_jsonl(path, ({"frame_id": f, "rotation": poses[f].rotation.tolist(),
                        "translation": poses[f].translation.tolist()} for f in sorted(poses)))


def read_poses(path: Path) -> dict[int, FramePose]:
    out = {}
    for rec in read_jsonl(path):
        try:
            f = int(rec["frame_id"])
            out[f] = FramePose(np.array(rec["rotation"]), np.array(rec["translation"]), f)
        except (KeyError, ValueError) as exc:
            raise InputError(f"bad pose record in {path}: {exc}") from exc
    return out


def write_clouds(directory: Path, clouds: Mapping[int, PointCloud]):
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for f in sorted(clouds):
        np.save(directory / f"{f:06d}.npy", np.ascontiguousarray(clouds[f].points, dtype=np.float64))


def read_clouds(directory: Path) -> dict[int, PointCloud]:
    directory = Path(directory)
    if not directory.is_dir():
        raise InputError(f"missing point cloud directory: {directory}")
    out = {}
    for p in sorted(directory.glob("*.npy")):
        f = int(p.stem)
        try:
            out[f] = PointCloud(np.load(p), f)
        except (OSError, ValueError) as exc:
            raise InputError(f"cannot read {p}: {exc}") from exc
    return out


def track_record(track: Track) -> dict:
    return {
        "track_id": track.track_id,
        "class_label": track.class_label,
        "stream": track.stream,
        "motion": track.motion,
        "observations": [
            [f, o.kind, o.score, box_row(o.box)] for f, o in sorted(track.observations.items())
        ],
    }


def track_from_record(rec: dict) -> Track:
    obs = {}
    for f, kind, score, row in rec["observations"]:
        obs[int(f)] = Observation(box_from_row(row), float(score), kind)
    return Track(int(rec["track_id"]), rec["class_label"], obs, rec.get("motion", "Unclassified"),
                 rec.get("stream", ""))


def write_tracks(path: Path, tracks: Iterable[Track]):
    write_jsonl(path, (track_record(t) for t in tracks))


def read_tracks(path: Path) -> list[Track]:
    try:
        return [track_from_record(r) for r in read_jsonl(path)]
    except (KeyError, ValueError, TypeError) as exc:
        raise InputError(f"bad track record in {path}: {exc}") from exc


def write_labels(path: Path, labels: Mapping[int, list[Box3D]]):
    write_frames(path, labels, key="labels", with_source=True)


def read_labels(path: Path) -> dict[int, list[Box3D]]:
    return read_frames(path, key="labels")
