"""Deterministic rasterization of bounding-box and trajectory frames.

Pixel (x, y) is treated as the point with integer coordinates (x, y); a
shape covers a pixel when that point lies inside it. Nothing is
anti-aliased, so output is bit-stable across platforms.
"""

from __future__ import annotations

import hashlib
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
from PIL import Image

from .annotations import Box2D, Box3D, CameraCalib, ClipAnnotation, FrameAnnotation

log = logging.getLogger(__name__)

RGB = tuple[int, int, int]

MIN_TRACK_CHANNEL = 51

DEFAULT_PALETTE: dict[str, RGB] = {
    "Car": (255, 0, 0),
    "Van": (255, 128, 0),
    "Truck": (255, 255, 0),
    "Pedestrian": (0, 255, 0),
    "Person": (0, 255, 128),
    "Cyclist": (0, 255, 255),
    "Tram": (0, 128, 255),
    "Bus": (0, 0, 255),
    "Train": (128, 0, 255),
    "Rider": (255, 0, 255),
    "Other": (255, 255, 255),
}
FALLBACK_CLASS_COLOR: RGB = (192, 192, 192)

MODES = ("bbox", "trajectory", "bbox-with-final-trajectory")


class RenderError(ValueError):
    pass


class BehindCameraError(RenderError):
    """A projected 3D box has a corner at non-positive depth."""


@dataclass(frozen=True)
class Rgb8Frame:
    pixels: np.ndarray  # (height, width, 3) uint8

    def __post_init__(self):
        px = np.ascontiguousarray(self.pixels, dtype=np.uint8)
        if px.ndim != 3 or px.shape[2] != 3:
            raise RenderError(f"expected (H, W, 3) pixels, got shape {px.shape}")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @classmethod
    def black(cls, width: int, height: int) -> "Rgb8Frame":
        return cls(np.zeros((height, width, 3), dtype=np.uint8))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        return isinstance(other, Rgb8Frame) and np.array_equal(self.pixels, other.pixels)

    def __hash__(self):
        return hash(self.pixels.tobytes())

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        Image.fromarray(self.pixels, mode="RGB").save(buf, format="PNG", optimize=False, compress_level=6)
        return buf.getvalue()

    @classmethod
    def from_png(cls, data_or_path) -> "Rgb8Frame":
        src = io.BytesIO(data_or_path) if isinstance(data_or_path, (bytes, bytearray)) else data_or_path
        with Image.open(src) as im:
            return cls(np.asarray(im.convert("RGB")))

    def sha256(self) -> str:
        return hashlib.sha256(self.pixels.tobytes()).hexdigest()


@dataclass(frozen=True)
class RenderConfig:
    seed: int = 0
    fill_alpha: float = 0.25
    outline_width: float = 2.0
    x_mark_width: float = 2.0
    traj_outer_diameter: float = 10.0
    traj_inner_diameter: float = 5.0
    class_palette: Mapping[str, RGB] = field(default_factory=lambda: dict(DEFAULT_PALETTE))

    def __post_init__(self):
        if not 0.0 <= self.fill_alpha <= 1.0:
            raise RenderError(f"fill_alpha must be in [0, 1], got {self.fill_alpha}")
        if self.outline_width <= 0 or self.x_mark_width <= 0:
            raise RenderError("line widths must be positive")
        if self.traj_inner_diameter > self.traj_outer_diameter:
            raise RenderError("inner trajectory disc cannot exceed the outer disc")


@dataclass(frozen=True)
class ColorAssignment:
    track_colors: Mapping[int, RGB]
    class_colors: Mapping[str, RGB]


# --- colors -----------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GOLDEN64 = 0x9E3779B97F4A7C15


def _splitmix64(state: int) -> tuple[int, int]:
    """One SplitMix64 step: returns (new_state, output)."""
    state = (state + _GOLDEN64) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


def assign_track_color(seed: int, track_id: int) -> RGB:
    """Random color for a track with every channel above 50.

    The generator is SplitMix64 seeded with ``mix(seed) ^ track_id`` where
    ``mix`` is one SplitMix64 output of the seed. Each draw uses the low
    three bytes as (r, g, b); draws repeat until all channels exceed 50.
    """
    _, mixed = _splitmix64(seed & _MASK64)
    state = (mixed ^ (track_id & _MASK64)) & _MASK64
    while True:
        state, out = _splitmix64(state)
        r, g, b = out & 0xFF, (out >> 8) & 0xFF, (out >> 16) & 0xFF
        if min(r, g, b) >= MIN_TRACK_CHANNEL:
            return (r, g, b)


def class_color(class_label: str, palette: Mapping[str, RGB] = DEFAULT_PALETTE) -> RGB:
    if class_label in palette:
        return tuple(palette[class_label])
    folded = {k.lower(): v for k, v in palette.items()}
    if class_label.lower() in folded:
        return tuple(folded[class_label.lower()])
    log.info("no palette entry for class %r, using fallback color", class_label)
    return FALLBACK_CLASS_COLOR


def assign_colors(clip: ClipAnnotation, config: RenderConfig) -> ColorAssignment:
    tracks = {}
    classes = {}
    for frame in clip.frames:
        for obj in frame.objects:
            if obj.track_id not in tracks:
                tracks[obj.track_id] = assign_track_color(config.seed, obj.track_id)
            if obj.class_label not in classes:
                classes[obj.class_label] = class_color(obj.class_label, config.class_palette)
    return ColorAssignment(tracks, classes)


# --- geometry ---------------------------------------------------------------

# Corner order: bottom face then top face, counter-clockwise seen from above,
# starting at rear-left. Object frame: +x forward (length), +y down, +z left.
_CORNER_SIGNS = np.array([
    [-1, +1, +1], [-1, +1, -1], [+1, +1, -1], [+1, +1, +1],
    [-1, -1, +1], [-1, -1, -1], [+1, -1, -1], [+1, -1, +1],
], dtype=np.float64)
REAR_FACE = (0, 1, 5, 4)
BOX_EDGES = (
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
)


def box3d_corners(box: Box3D) -> np.ndarray:
    """The 8 corners in camera coordinates, shape (8, 3)."""
    h, w, l = box.dims
    local = _CORNER_SIGNS * np.array([l / 2.0, h / 2.0, w / 2.0])
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    return local @ rot.T + np.asarray(box.center)


def project_box3d(box: Box3D, calib: CameraCalib) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """Project a 3D box to image points (8, 2) plus the rear-face corner indices."""
    corners = box3d_corners(box)
    if np.any(corners[:, 2] <= 0):
        raise BehindCameraError("3D box has a corner at non-positive depth")
    hom = np.hstack([corners, np.ones((8, 1))]) @ calib.projection.T
    if np.any(hom[:, 2] <= 0):
        raise BehindCameraError("3D box projects with non-positive homogeneous depth")
    return hom[:, :2] / hom[:, 2:3], REAR_FACE


# --- raster primitives ------------------------------------------------------

def _span(lo: float, hi: float, limit: int) -> tuple[int, int]:
    """Integer range [a, b) of points in [lo, hi], clipped to [0, limit)."""
    a = max(math.ceil(lo), 0)
    b = min(math.floor(hi), limit - 1) + 1
    return a, max(a, b)


def _box_region(box: Box2D, w: int, h: int, grow: float = 0.0) -> tuple[slice, slice]:
    x0, x1 = _span(box.x1 - grow, box.x2 + grow, w)
    y0, y1 = _span(box.y1 - grow, box.y2 + grow, h)
    return slice(y0, y1), slice(x0, x1)


def composite_fill(canvas: np.ndarray, box: Box2D, color: RGB, alpha: float) -> None:
    ys, xs = _box_region(box, canvas.shape[1], canvas.shape[0])
    under = canvas[ys, xs].astype(np.float64)
    out = alpha * np.asarray(color, dtype=np.float64) + (1.0 - alpha) * under
    canvas[ys, xs] = np.floor(out + 0.5).astype(np.uint8)


def outline_mask(box: Box2D, width: int, height: int, line_width: float) -> np.ndarray:
    """Band of total thickness ``line_width`` straddling the box boundary."""
    half = line_width / 2.0
    mask = np.zeros((height, width), dtype=bool)
    mask[_box_region(box, width, height, half)] = True
    # interior strictly farther than ``half`` from every edge
    ix0 = max(math.floor(box.x1 + half) + 1, 0)
    ix1 = min(math.ceil(box.x2 - half) - 1, width - 1) + 1
    iy0 = max(math.floor(box.y1 + half) + 1, 0)
    iy1 = min(math.ceil(box.y2 - half) - 1, height - 1) + 1
    if ix1 > ix0 and iy1 > iy0:
        mask[iy0:iy1, ix0:ix1] = False
    return mask


def segment_mask(p: np.ndarray, q: np.ndarray, width: int, height: int, line_width: float) -> np.ndarray:
    """Pixels within ``line_width / 2`` of segment pq."""
    half = line_width / 2.0
    mask = np.zeros((height, width), dtype=bool)
    x0, x1 = _span(min(p[0], q[0]) - half, max(p[0], q[0]) + half, width)
    y0, y1 = _span(min(p[1], q[1]) - half, max(p[1], q[1]) + half, height)
    if x1 <= x0 or y1 <= y0:
        return mask
    xs, ys = np.meshgrid(np.arange(x0, x1, dtype=np.float64), np.arange(y0, y1, dtype=np.float64))
    d = q - p
    dd = float(d @ d)
    if dd == 0.0:
        t = np.zeros_like(xs)
    else:
        t = np.clip(((xs - p[0]) * d[0] + (ys - p[1]) * d[1]) / dd, 0.0, 1.0)
    dist2 = (xs - (p[0] + t * d[0])) ** 2 + (ys - (p[1] + t * d[1])) ** 2
    mask[y0:y1, x0:x1] = dist2 <= half * half
    return mask


def disc_mask(cx: float, cy: float, diameter: float, width: int, height: int) -> np.ndarray:
    r = diameter / 2.0
    mask = np.zeros((height, width), dtype=bool)
    x0, x1 = _span(cx - r, cx + r, width)
    y0, y1 = _span(cy - r, cy + r, height)
    if x1 <= x0 or y1 <= y0:
        return mask
    xs, ys = np.meshgrid(np.arange(x0, x1, dtype=np.float64), np.arange(y0, y1, dtype=np.float64))
    mask[y0:y1, x0:x1] = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
    return mask


# --- frames -----------------------------------------------------------------

def _draw_wireframe(canvas: np.ndarray, pts: np.ndarray, rear: Sequence[int], color: RGB,
                    config: RenderConfig) -> None:
    h, w = canvas.shape[:2]
    lines = np.zeros((h, w), dtype=bool)
    for a, b in BOX_EDGES:
        lines |= segment_mask(pts[a], pts[b], w, h, config.outline_width)
    r0, r1, r2, r3 = rear
    lines |= segment_mask(pts[r0], pts[r2], w, h, config.x_mark_width)
    lines |= segment_mask(pts[r1], pts[r3], w, h, config.x_mark_width)
    canvas[lines] = color


def render_bbox_frame(frame: FrameAnnotation, width: int, height: int,
                      calib: Optional[CameraCalib], colors: ColorAssignment,
                      config: RenderConfig) -> Rgb8Frame:
    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    for obj in sorted(frame.objects, key=lambda o: o.track_id):
        composite_fill(canvas, obj.box2d, colors.track_colors[obj.track_id], config.fill_alpha)
        outline = colors.class_colors[obj.class_label]
        if obj.box3d is not None and calib is not None:
            try:
                pts, rear = project_box3d(obj.box3d, calib)
            except BehindCameraError:
                log.debug("track %d is behind the camera; outlining its 2D box", obj.track_id)
            else:
                _draw_wireframe(canvas, pts, rear, outline, config)
                continue
        canvas[outline_mask(obj.box2d, width, height, config.outline_width)] = outline
    return Rgb8Frame(canvas)


def render_trajectory_frame(frame: FrameAnnotation, width: int, height: int,
                            colors: ColorAssignment, config: RenderConfig) -> Rgb8Frame:
    canvas = np.zeros((height, width, 3), dtype=np.uint8)
    for obj in sorted(frame.objects, key=lambda o: o.track_id):
        cx, cy = obj.box2d.center
        canvas[disc_mask(cx, cy, config.traj_outer_diameter, width, height)] = colors.track_colors[obj.track_id]
        canvas[disc_mask(cx, cy, config.traj_inner_diameter, width, height)] = colors.class_colors[obj.class_label]
    return Rgb8Frame(canvas)


def render_clip(clip: ClipAnnotation, mode: str = "bbox", calib: Optional[CameraCalib] = None,
                config: Optional[RenderConfig] = None, *, require_3d: bool = False) -> list[Rgb8Frame]:
    """Render every frame of a clip; colors are fixed once for the clip.

    ``calib`` defaults to the clip's own calibration. With ``require_3d`` a
    clip carrying 3D boxes but no calibration is an error instead of falling
    back to 2D outlines.
    """
    if mode not in MODES:
        raise RenderError(f"unknown render mode {mode!r}; choose from {', '.join(MODES)}")
    config = config or RenderConfig()
    calib = calib if calib is not None else clip.calib
    if require_3d and calib is None:
        raise RenderError("3D rendering requested but no camera calibration is available")
    colors = assign_colors(clip, config)
    out = []
    last = len(clip.frames) - 1
    for i, frame in enumerate(clip.frames):
        if mode == "trajectory" or (mode == "bbox-with-final-trajectory" and i == last):
            out.append(render_trajectory_frame(frame, clip.width, clip.height, colors, config))
        else:
            out.append(render_bbox_frame(frame, clip.width, clip.height, calib, colors, config))
    return out
