import numpy as np
import pytest

from autolabel import io
from autolabel.ensemble import DetectionSet
from autolabel.geometry import PEDESTRIAN, VEHICLE, Box3D, FramePose, PointCloud
from autolabel.io import InputError
from autolabel.tracking import INTERPOLATED, OBSERVED, Observation, Track


def b(x, score=0.5, cls=VEHICLE, sid=(), source=""):
    return Box3D(x, 1.0, -0.5, 4.0, 2.0, 1.5, 0.3, score=score, class_label=cls, provenance=sid, source=source)


def test_detection_set_round_trip(tmp_path):
    ds = DetectionSet("s1", "det", "dense", 0.4, "flip",
                      {0: [b(0.1234567890123, sid=("s1",))], 1: [], 2: [b(5.0, cls=PEDESTRIAN, sid=("s1",))]})
    io.write_detection_set(tmp_path, ds)
    back = io.read_detection_set(tmp_path, "s1")
    assert back.manifest() == ds.manifest()
    assert {f: [x.geometry() for x in v] for f, v in back.frames.items()} == \
           {f: [x.geometry() for x in v] for f, v in ds.frames.items()}
    assert back.frames[0][0].provenance == ("s1",)
    assert io.list_detection_sets(tmp_path) == ["s1"]


def test_missing_set_is_input_error(tmp_path):
    with pytest.raises(InputError):
        io.read_detection_set(tmp_path, "nope")


def test_bad_row_is_input_error(tmp_path):
    (tmp_path / "x.jsonl").write_text('{"frame_id": 0, "boxes": [[1, 2, 3]]}\n')
    with pytest.raises(InputError):
        io.read_frames(tmp_path / "x.jsonl")
    (tmp_path / "y.jsonl").write_text("not json\n")
    with pytest.raises(InputError):
        io.read_frames(tmp_path / "y.jsonl")


def test_poses_and_clouds_round_trip(tmp_path):
    poses = {f: FramePose.from_xy_yaw(f, 2.0 * f, 0.1 * f, z=1.8, frame_id=f) for f in range(3)}
    io.write_poses(tmp_path / "poses.jsonl", poses)
    back = io.read_poses(tmp_path / "poses.jsonl")
    assert all(np.array_equal(back[f].rotation, poses[f].rotation) for f in poses)
    clouds = {f: PointCloud(np.random.default_rng(f).normal(size=(10, 3)), f) for f in range(3)}
    io.write_clouds(tmp_path / "clouds", clouds)
    cb = io.read_clouds(tmp_path / "clouds")
    assert all(np.array_equal(cb[f].points, clouds[f].points) for f in clouds)
    with pytest.raises(InputError):
        io.read_clouds(tmp_path / "missing")


def test_tracks_round_trip(tmp_path):
    t = Track(7, VEHICLE, {3: Observation(b(1.0), 0.5), 4: Observation(b(2.0, 0.9), 0.9, INTERPOLATED)},
              "Dynamic", "VehAll")
    io.write_tracks(tmp_path / "t.jsonl", [t])
    (back,) = io.read_tracks(tmp_path / "t.jsonl")
    assert (back.track_id, back.class_label, back.motion, back.stream) == (7, VEHICLE, "Dynamic", "VehAll")
    assert [o.kind for o in back.observations.values()] == [OBSERVED, INTERPOLATED]
    assert back.observations[4].box.geometry() == t.observations[4].box.geometry()


def test_labels_keep_source_tag(tmp_path):
    labels = {0: [b(1.0, source="static_refined"), b(3.0, source="fused")], 1: []}
    io.write_labels(tmp_path / "labels.jsonl", labels)
    lines = (tmp_path / "labels.jsonl").read_text().splitlines()
    assert len(lines) == 2 and '"static_refined"' in lines[0]
    back = io.read_labels(tmp_path / "labels.jsonl")
    assert [x.source for x in back[0]] == ["static_refined", "fused"]
