"""Tracked bounding-box annotations: data model, parsers and clip windowing."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Optional, Sequence

import numpy as np

MAX_OBJECTS_PER_FRAME = 15
DEFAULT_CLIP_LENGTH = 25
DEFAULT_WIDTH = 520
DEFAULT_HEIGHT = 312
DEFAULT_FPS = 7.0


class AnnotationError(ValueError):
    """Raised for malformed or inconsistent annotation input."""


@dataclass(frozen=True)
class Box2D:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        coords = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(c) for c in coords):
            raise AnnotationError(f"non-finite box coordinates {coords}")
        if self.x1 > self.x2 or self.y1 > self.y2:
            raise AnnotationError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def scaled(self, sx: float, sy: float) -> "Box2D":
        return Box2D(self.x1 * sx, self.y1 * sy, self.x2 * sx, self.y2 * sy)


@dataclass(frozen=True)
class Box3D:
    """Oriented 3D box in camera coordinates.

    ``center`` is the geometric center (x right, y down, z forward, meters).
    ``dims`` is (height, width, length); ``yaw`` rotates about the camera y
    axis, with yaw 0 pointing the object's length along +x.
    """

    center: tuple[float, float, float]
    dims: tuple[float, float, float]
    yaw: float

    def __post_init__(self):
        if len(self.center) != 3 or len(self.dims) != 3:
            raise AnnotationError("Box3D center and dims must have 3 components")
        if not all(math.isfinite(v) for v in (*self.center, *self.dims, self.yaw)):
            raise AnnotationError("Box3D values must be finite")
        if min(self.dims) <= 0:
            raise AnnotationError(f"Box3D dims must be positive, got {self.dims}")
        # wrap into (-pi, pi]
        yaw = math.remainder(self.yaw, 2 * math.pi)
        if yaw <= -math.pi:
            yaw += 2 * math.pi
        object.__setattr__(self, "yaw", yaw)
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "dims", tuple(float(v) for v in self.dims))


@dataclass(frozen=True)
class CameraCalib:
    projection: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.projection, dtype=np.float64).reshape(3, 4)
        if not np.all(np.isfinite(p)):
            raise AnnotationError("projection matrix must be finite")
        if p[0, 0] <= 0 or p[1, 1] <= 0:
            raise AnnotationError("projection focal terms must be positive")
        p.setflags(write=False)
        object.__setattr__(self, "projection", p)

    def scaled(self, sx: float, sy: float) -> "CameraCalib":
        """Projection matching an image resized by (sx, sy)."""
        p = self.projection.copy()
        p[0] *= sx
        p[1] *= sy
        return CameraCalib(p)

    def __eq__(self, other):
        return isinstance(other, CameraCalib) and np.array_equal(self.projection, other.projection)

    def __hash__(self):
        return hash(self.projection.tobytes())


@dataclass(frozen=True)
class ObjectState:
    track_id: int
    class_label: str
    box2d: Box2D
    box3d: Optional[Box3D] = None

    def __post_init__(self):
        if int(self.track_id) != self.track_id or self.track_id < 0:
            raise AnnotationError(f"track_id must be a non-negative integer, got {self.track_id!r}")
        if not self.class_label:
            raise AnnotationError("class_label must be non-empty")


@dataclass(frozen=True)
class FrameAnnotation:
    frame_index: int
    objects: tuple[ObjectState, ...] = ()

    def __post_init__(self):
        if self.frame_index < 0:
            raise AnnotationError(f"negative frame index {self.frame_index}")
        objects = tuple(self.objects)
        ids = [o.track_id for o in objects]
        if len(set(ids)) != len(ids):
            raise AnnotationError(f"duplicate track_id in frame {self.frame_index}")
        object.__setattr__(self, "objects", objects)

    def track_ids(self) -> set[int]:
        return {o.track_id for o in self.objects}

    def get(self, track_id: int) -> Optional[ObjectState]:
        for o in self.objects:
            if o.track_id == track_id:
                return o
        return None


@dataclass(frozen=True)
class ClipAnnotation:
    """A contiguous run of annotated frames.

    Parsed sequences and windowed clips share this type; a windowed clip is
    simply one whose frames start at 0 and has the standard length.
    """

    width: int = DEFAULT_WIDTH
    height: int = DEFAULT_HEIGHT
    fps: float = DEFAULT_FPS
    frames: tuple[FrameAnnotation, ...] = ()
    calib: Optional[CameraCalib] = field(default=None, compare=True)

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise AnnotationError(f"image size must be positive, got {self.width}x{self.height}")
        frames = tuple(self.frames)
        for prev, cur in zip(frames, frames[1:]):
            if cur.frame_index != prev.frame_index + 1:
                raise AnnotationError(
                    f"frame indices must increase by 1 ({prev.frame_index} -> {cur.frame_index})"
                )
        object.__setattr__(self, "frames", frames)

    def __len__(self):
        return len(self.frames)

    def track_ids(self) -> set[int]:
        ids: set[int] = set()
        for f in self.frames:
            ids |= f.track_ids()
        return ids


def _group_frames(records: dict[int, list[ObjectState]]) -> tuple[FrameAnnotation, ...]:
    if not records:
        return ()
    last = max(records)
    return tuple(FrameAnnotation(i, tuple(sorted(records.get(i, []), key=lambda o: o.track_id)))
                 for i in range(last + 1))


def parse_calib(calib_text: str, key: str = "P2") -> CameraCalib:
    """Read a named 3x4 projection matrix from KITTI-style calibration text.

    Lines look like ``P2: f f f ...`` (object calib) or ``P2 f f f ...``
    (tracking calib). Only the first 12 numbers after the key are used.
    """
    for line in calib_text.splitlines():
        parts = line.replace(":", " ").split()
        if parts and parts[0] == key:
            values = [float(v) for v in parts[1:13]]
            if len(values) != 12:
                raise AnnotationError(f"calibration entry {key} has {len(values)} values, need 12")
            return CameraCalib(np.array(values).reshape(3, 4))
    raise AnnotationError(f"calibration entry {key!r} not found")


def parse_kitti_tracking(label_text: str, calib_text: Optional[str] = None, *,
                         width: int = 1242, height: int = 375, fps: float = 10.0,
                         calib_key: str = "P2") -> ClipAnnotation:
    """Parse a KITTI tracking label file into a frame-grouped sequence.

    Each line holds: frame, track id, type, truncation, occlusion, alpha,
    2D bbox (4), dims h w l (3), location x y z (3), rotation_y and an
    optional score. ``DontCare`` rows are dropped. KITTI locations are the
    bottom center of the box; they are converted to geometric centers.
    """
    records: dict[int, list[ObjectState]] = {}
    for lineno, line in enumerate(label_text.splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) not in (17, 18):
            raise AnnotationError(f"line {lineno}: expected 17 or 18 fields, got {len(parts)}")
        try:
            frame, track_id = int(parts[0]), int(parts[1])
            obj_type = parts[2]
            nums = [float(v) for v in parts[3:17]]
        except ValueError as exc:
            raise AnnotationError(f"line {lineno}: {exc}") from None
        if obj_type == "DontCare":
            continue
        x1, y1, x2, y2 = nums[3:7]
        h, w, l = nums[7:10]
        x, y, z = nums[10:13]
        ry = nums[13]
        try:
            box2d = Box2D(x1, y1, x2, y2)
            box3d = Box3D((x, y - h / 2.0, z), (h, w, l), ry) if min(h, w, l) > 0 else None
            obj = ObjectState(track_id, obj_type, box2d, box3d)
        except AnnotationError as exc:
            raise AnnotationError(f"line {lineno}: {exc}") from None
        if frame < 0:
            raise AnnotationError(f"line {lineno}: negative frame index")
        bucket = records.setdefault(frame, [])
        if any(o.track_id == track_id for o in bucket):
            raise AnnotationError(f"line {lineno}: duplicate track {track_id} in frame {frame}")
        bucket.append(obj)
    calib = parse_calib(calib_text, calib_key) if calib_text else None
    return ClipAnnotation(width, height, fps, _group_frames(records), calib)


def parse_generic_jsonl(text: str, *, width: int = DEFAULT_WIDTH, height: int = DEFAULT_HEIGHT,
                        fps: float = DEFAULT_FPS) -> ClipAnnotation:
    """Parse canonical line-delimited JSON annotations.

    One object per line: ``{frame, track_id, class, bbox: [x1, y1, x2, y2],
    box3d?: {center, dims, yaw}}``. Frames without records become empty.
    """
    records: dict[int, list[ObjectState]] = {}
    seen: set[tuple[int, int]] = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            frame = int(rec["frame"])
            track_id = int(rec["track_id"])
            label = str(rec["class"])
            bbox = [float(v) for v in rec["bbox"]]
            if len(bbox) != 4:
                raise AnnotationError("bbox needs 4 values")
            b3 = rec.get("box3d")
            box3d = Box3D(tuple(b3["center"]), tuple(b3["dims"]), float(b3["yaw"])) if b3 else None
            obj = ObjectState(track_id, label, Box2D(*bbox), box3d)
        except (KeyError, TypeError, ValueError) as exc:
            raise AnnotationError(f"line {lineno}: {exc}") from None
        if frame < 0:
            raise AnnotationError(f"line {lineno}: negative frame index")
        if (frame, track_id) in seen:
            raise AnnotationError(f"line {lineno}: duplicate (frame {frame}, track {track_id})")
        seen.add((frame, track_id))
        records.setdefault(frame, []).append(obj)
    return ClipAnnotation(width, height, fps, _group_frames(records))


def clip_to_jsonl(clip: ClipAnnotation) -> str:
    lines = []
    for frame in clip.frames:
        for obj in frame.objects:
            rec = {"frame": frame.frame_index, "track_id": obj.track_id,
                   "class": obj.class_label, "bbox": obj.box2d.as_list()}
            if obj.box3d is not None:
                rec["box3d"] = {"center": list(obj.box3d.center), "dims": list(obj.box3d.dims),
                                "yaw": obj.box3d.yaw}
            lines.append(json.dumps(rec))
    return "".join(line + "\n" for line in lines)


def _prune_tracks(frames: Sequence[FrameAnnotation], cap: int) -> set[int]:
    """Track ids to drop so that no frame holds more than ``cap`` objects."""
    dropped: set[int] = set()
    for frame in frames:
        alive = [o for o in frame.objects if o.track_id not in dropped]
        if len(alive) <= cap:
            continue
        alive.sort(key=lambda o: (-o.box2d.area, o.track_id))
        dropped.update(o.track_id for o in alive[cap:])
    return dropped


def window_clip(stream: ClipAnnotation, start: int = 0, length: int = DEFAULT_CLIP_LENGTH,
                max_objects: int = MAX_OBJECTS_PER_FRAME) -> ClipAnnotation:
    """Cut ``length`` frames starting at ``start`` and re-index them from 0.

    Frames with more than ``max_objects`` objects keep the largest boxes
    (smaller track id wins ties); every dropped track is removed from the
    whole window so ids stay coherent.
    """
    if length <= 0:
        raise AnnotationError(f"window length must be positive, got {length}")
    n = len(stream.frames)
    if start < 0 or start + length > n:
        avail = f"[0, {n})" if n else "none"
        raise AnnotationError(
            f"window [{start}, {start + length}) not covered by stream; available frames {avail}"
        )
    frames = stream.frames[start:start + length]
    dropped = _prune_tracks(frames, max_objects)
    out = tuple(
        FrameAnnotation(i, tuple(o for o in f.objects if o.track_id not in dropped))
        for i, f in enumerate(frames)
    )
    return replace(stream, frames=out)


def rescale_annotation(clip: ClipAnnotation, target_w: int = DEFAULT_WIDTH,
                       target_h: int = DEFAULT_HEIGHT) -> ClipAnnotation:
    """Scale 2D boxes to a new image size. 3D boxes and calibration are kept;
    use ``CameraCalib.scaled`` with the same factors at render time."""
    if target_w <= 0 or target_h <= 0:
        raise AnnotationError(f"target size must be positive, got {target_w}x{target_h}")
    sx = target_w / clip.width
    sy = target_h / clip.height
    frames = tuple(
        FrameAnnotation(f.frame_index, tuple(replace(o, box2d=o.box2d.scaled(sx, sy)) for o in f.objects))
        for f in clip.frames
    )
    return replace(clip, width=target_w, height=target_h, frames=frames)


def frames_from_objects(per_frame: Iterable[Iterable[ObjectState]]) -> tuple[FrameAnnotation, ...]:
    return tuple(FrameAnnotation(i, tuple(sorted(objs, key=lambda o: o.track_id)))
                 for i, objs in enumerate(per_frame))
