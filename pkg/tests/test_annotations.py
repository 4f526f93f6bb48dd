from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from boxvid.annotations import (
    AnnotationError, Box2D, Box3D, ClipAnnotation, FrameAnnotation, ObjectState,
    clip_to_jsonl, parse_calib, parse_generic_jsonl, parse_kitti_tracking,
    rescale_annotation, window_clip,
)

CALIB = "P0: 1 0 0 0 0 1 0 0 0 0 1 0\nP2: 721.5 0 609.5 44.8 0 721.5 172.8 0.2 0 0 1 0.003\n"


def kitti_line(frame, tid, typ="Car", bbox=(100, 120, 200, 180), dims=(1.5, 1.6, 3.9), loc=(1.0, 1.7, 20.0), ry=0.1):
    vals = [frame, tid, typ, 0, 0, -1.5, *bbox, *dims, *loc, ry]
    return " ".join(str(v) for v in vals)


def test_kitti_empty_text():
    clip = parse_kitti_tracking("")
    assert clip.frames == ()


def test_kitti_single_line():
    clip = parse_kitti_tracking(kitti_line(0, 2), CALIB)
    assert len(clip.frames) == 1
    (obj,) = clip.frames[0].objects
    assert obj.track_id == 2 and obj.class_label == "Car"
    assert obj.box2d == Box2D(100, 120, 200, 180)
    # bottom-center location converted to geometric center
    assert obj.box3d.center == pytest.approx((1.0, 1.7 - 0.75, 20.0))
    assert obj.box3d.dims == (1.5, 1.6, 3.9)
    assert clip.calib.projection[0, 0] == 721.5


def test_kitti_enter_exit_fixture():
    # track 1 spans frames 0-1, track 2 enters at frame 1 and stays through frame 2
    text = "\n".join([
        kitti_line(0, 1),
        kitti_line(1, 1),
        kitti_line(1, 2, "Pedestrian", (300, 100, 320, 160)),
        kitti_line(2, 2, "Pedestrian", (302, 100, 322, 160)),
        "2 -1 DontCare -1 -1 -10 50 50 60 60 -1 -1 -1 -1000 -1000 -1000 -10",
    ])
    clip = parse_kitti_tracking(text)
    assert [len(f.objects) for f in clip.frames] == [1, 2, 1]


def test_kitti_malformed_line_reports_number():
    with pytest.raises(AnnotationError, match="line 2"):
        parse_kitti_tracking(kitti_line(0, 1) + "\n0 1 Car 0 0")


def test_kitti_non_numeric_field():
    bad = kitti_line(0, 1).replace("100", "abc", 1)
    with pytest.raises(AnnotationError, match="line 1"):
        parse_kitti_tracking(bad)


def test_parse_calib_missing_key():
    with pytest.raises(AnnotationError):
        parse_calib("P0: 1 0 0 0 0 1 0 0 0 0 1 0", "P2")


def test_jsonl_empty():
    assert parse_generic_jsonl("").frames == ()


def test_jsonl_field_copy():
    clip = parse_generic_jsonl(json.dumps({"frame": 0, "track_id": 3, "class": "Car", "bbox": [10, 20, 30, 40]}))
    assert clip.frames[0].objects[0].box2d == Box2D(10, 20, 30, 40)


def test_jsonl_inverted_box():
    with pytest.raises(AnnotationError):
        parse_generic_jsonl(json.dumps({"frame": 0, "track_id": 3, "class": "Car", "bbox": [30, 20, 10, 40]}))


def test_jsonl_duplicate_frame_track():
    line = json.dumps({"frame": 0, "track_id": 3, "class": "Car", "bbox": [1, 2, 3, 4]})
    with pytest.raises(AnnotationError, match="duplicate"):
        parse_generic_jsonl(line + "\n" + line)


def test_jsonl_roundtrip_with_box3d():
    recs = [
        {"frame": 0, "track_id": 1, "class": "Car", "bbox": [1.5, 2, 30, 40],
         "box3d": {"center": [0, 1, 10], "dims": [1.5, 1.6, 4.0], "yaw": 0.3}},
        {"frame": 2, "track_id": 4, "class": "Van", "bbox": [5, 5, 9, 9]},
    ]
    clip = parse_generic_jsonl("\n".join(json.dumps(r) for r in recs))
    assert len(clip.frames) == 3 and clip.frames[1].objects == ()
    assert parse_generic_jsonl(clip_to_jsonl(clip)) == clip


def test_box3d_yaw_wrapped():
    assert Box3D((0, 0, 5), (1, 1, 1), 3 * np.pi).yaw == pytest.approx(np.pi)
    assert Box3D((0, 0, 5), (1, 1, 1), -np.pi).yaw == pytest.approx(np.pi)
    with pytest.raises(AnnotationError):
        Box3D((0, 0, 5), (1, 0, 1), 0.0)


def _clip(per_frame, width=520, height=312):
    frames = tuple(FrameAnnotation(i, tuple(objs)) for i, objs in enumerate(per_frame))
    return ClipAnnotation(width, height, 7.0, frames)


def _obj(tid, x, y, w, h, label="Car"):
    return ObjectState(tid, label, Box2D(x, y, x + w, y + h))


def test_window_noop_reindexes():
    objs = [_obj(1, 10, 10, 20, 20), _obj(2, 50, 50, 10, 10)]
    stream = _clip([objs] * 30)
    clip = window_clip(stream, 3, 25)
    assert [f.frame_index for f in clip.frames] == list(range(25))
    assert all(f.objects == tuple(objs) for f in clip.frames)


def test_window_drops_smallest_track_everywhere():
    # 16 objects in frame 5; track 7 has the unique smallest area (2x2)
    big = [_obj(t, t * 20, 0, 10, 10) for t in range(16) if t != 7]
    frames = [[_obj(7, 0, 100, 30, 30)] for _ in range(25)]
    frames[5] = big + [_obj(7, 0, 100, 2, 2)]
    clip = window_clip(_clip(frames), 0, 25)
    assert all(7 not in f.track_ids() for f in clip.frames)
    assert len(clip.frames[5].objects) == 15


def test_window_tie_break_prefers_smaller_track_id():
    frame = [_obj(t, t * 20, 0, 10, 10) for t in range(16)]
    clip = window_clip(_clip([frame] * 25), 0, 25)
    assert clip.frames[0].track_ids() == set(range(15))


def test_window_beyond_end():
    with pytest.raises(AnnotationError, match="available frames"):
        window_clip(_clip([[]] * 10), 20, 25)


def test_rescale_identity_and_halving():
    clip = _clip([[_obj(1, 0, 0, 1040, 624)]], 1040, 624)
    assert rescale_annotation(clip, 1040, 624).frames == clip.frames
    half = rescale_annotation(clip, 520, 312)
    assert half.frames[0].objects[0].box2d == Box2D(0, 0, 520, 312)
    assert (half.width, half.height) == (520, 312)


def test_rescale_rejects_non_positive():
    with pytest.raises(AnnotationError):
        rescale_annotation(_clip([[]]), 0, 312)


# --- properties ---------------------------------------------------------------

box_st = st.builds(
    lambda x, y, w, h: (x, y, w, h),
    st.floats(-50, 500), st.floats(-50, 300), st.floats(0, 200), st.floats(0, 200),
)


@st.composite
def streams(draw):
    n_frames = draw(st.integers(1, 8))
    n_tracks = draw(st.integers(0, 24))
    per_frame = []
    for _ in range(n_frames):
        present = draw(st.lists(st.integers(0, n_tracks), unique=True, max_size=n_tracks + 1))
        per_frame.append([_obj(t, *draw(box_st)) for t in present])
    return _clip(per_frame)


@settings(max_examples=80, deadline=None)
@given(streams())
def test_window_properties(stream):
    n = len(stream.frames)
    out = window_clip(stream, 0, n)
    assert all(len(f.objects) <= 15 for f in out.frames)
    assert window_clip(out, 0, n) == out
    assert out.track_ids() <= stream.track_ids()


@settings(max_examples=60, deadline=None)
@given(streams(), st.floats(0.1, 10), st.floats(0.1, 10))
def test_rescale_roundtrip(stream, a, b):
    w, h = stream.width * a, stream.height * b
    back = rescale_annotation(rescale_annotation(stream, w, h), stream.width, stream.height)
    for f0, f1 in zip(stream.frames, back.frames):
        for o0, o1 in zip(f0.objects, f1.objects):
            np.testing.assert_allclose(o1.box2d.as_list(), o0.box2d.as_list(), rtol=1e-9, atol=1e-9)
