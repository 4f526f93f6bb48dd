"""Discrete corner-displacement tokens, trajectory generators and best-of-K selection.

A token encodes one box-corner displacement, with dx normalized by image
width and dy by image height. Magnitudes snap to 16 grid values
``k / 150`` (0 to 0.1 inclusive) and directions to 24 centers ``k * 15``
degrees, giving 384 tokens with ``id = magnitude_bin * 24 + direction_bin``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .annotations import Box2D, ClipAnnotation, FrameAnnotation, ObjectState
from .masks import MaskScoreReport, score_clip
from .renderer import Rgb8Frame

N_MAGNITUDES = 16
N_DIRECTIONS = 24
VOCAB_SIZE = N_MAGNITUDES * N_DIRECTIONS
MAX_DISPLACEMENT = 0.1
MAGNITUDE_STEP = MAX_DISPLACEMENT / (N_MAGNITUDES - 1)  # 1/150
DIRECTION_STEP_DEG = 360.0 / N_DIRECTIONS
# absorbs float error so exact half-steps round up as intended
_SNAP_EPS = 1e-9
SMOOTHING = 0.1
CORNERS = ("top_left", "bottom_right")


class TokenError(ValueError):
    pass


@dataclass(frozen=True, order=True)
class ActionToken:
    magnitude_bin: int
    direction_bin: int

    def __post_init__(self):
        if not 0 <= self.magnitude_bin < N_MAGNITUDES:
            raise TokenError(f"magnitude_bin {self.magnitude_bin} out of range")
        if not 0 <= self.direction_bin < N_DIRECTIONS:
            raise TokenError(f"direction_bin {self.direction_bin} out of range")

    @property
    def id(self) -> int:
        return self.magnitude_bin * N_DIRECTIONS + self.direction_bin

    @classmethod
    def from_id(cls, token_id: int) -> "ActionToken":
        if not 0 <= token_id < VOCAB_SIZE:
            raise TokenError(f"token id {token_id} out of range")
        return cls(*divmod(int(token_id), N_DIRECTIONS))


@dataclass(frozen=True)
class BoxActionPair:
    top_left: ActionToken
    bottom_right: ActionToken


@dataclass(frozen=True)
class TokenizedTrajectory:
    track_id: int
    class_label: str
    initial_box: tuple[float, float, float, float]  # normalized by (width, height)
    steps: tuple[BoxActionPair, ...]
    presence: tuple[int, int]  # first and last frame, inclusive

    def __post_init__(self):
        first, last = self.presence
        if last - first != len(self.steps):
            raise TokenError(f"presence {self.presence} does not fit {len(self.steps)} steps")

    def to_json(self) -> dict:
        return {"track_id": self.track_id, "class": self.class_label,
                "initial_box": list(self.initial_box), "presence": list(self.presence),
                "steps": [[s.top_left.id, s.bottom_right.id] for s in self.steps]}

    @classmethod
    def from_json(cls, rec: dict) -> "TokenizedTrajectory":
        steps = tuple(BoxActionPair(ActionToken.from_id(a), ActionToken.from_id(b)) for a, b in rec["steps"])
        return cls(int(rec["track_id"]), str(rec.get("class", "Car")), tuple(float(v) for v in rec["initial_box"]),
                   steps, tuple(int(v) for v in rec["presence"]))


# --- quantization -----------------------------------------------------------

def quantize_displacement(dx: float, dy: float) -> ActionToken:
    m = min(math.hypot(dx, dy), MAX_DISPLACEMENT)
    mag = min(math.floor(m / MAGNITUDE_STEP + 0.5 + _SNAP_EPS), N_MAGNITUDES - 1)
    if mag == 0:
        return ActionToken(0, 0)
    theta = math.degrees(math.atan2(dy, dx)) % 360.0
    direction = math.floor(theta / DIRECTION_STEP_DEG + 0.5 + _SNAP_EPS) % N_DIRECTIONS
    return ActionToken(mag, direction)


def dequantize(token: ActionToken) -> tuple[float, float]:
    m = token.magnitude_bin / 150.0
    if m == 0.0:
        return 0.0, 0.0
    # exact values on the axes so axis-aligned motion rolls out without drift
    quarter, rem = divmod(token.direction_bin, N_DIRECTIONS // 4)
    if rem == 0:
        return ((m, 0.0), (0.0, m), (-m, 0.0), (0.0, -m))[quarter]
    theta = math.radians(token.direction_bin * DIRECTION_STEP_DEG)
    return m * math.cos(theta), m * math.sin(theta)


def quantization_bound(magnitude: float) -> float:
    """Worst-case error of one quantized displacement of the given size."""
    return MAGNITUDE_STEP / 2 + magnitude * 2 * math.sin(math.radians(DIRECTION_STEP_DEG / 4))


# --- tokenize / rollout -----------------------------------------------------

def tokenize_track(boxes: Sequence[Box2D], width: float, height: float, *, track_id: int = 0,
                   class_label: str = "Car", first_frame: int = 0) -> TokenizedTrajectory:
    """Quantize the frame-to-frame corner displacements of one track."""
    if len(boxes) < 2:
        raise TokenError("need at least 2 frames of presence to tokenize a track")
    steps = []
    for a, b in zip(boxes, boxes[1:]):
        tl = quantize_displacement((b.x1 - a.x1) / width, (b.y1 - a.y1) / height)
        br = quantize_displacement((b.x2 - a.x2) / width, (b.y2 - a.y2) / height)
        steps.append(BoxActionPair(tl, br))
    b0 = boxes[0]
    initial = (b0.x1 / width, b0.y1 / height, b0.x2 / width, b0.y2 / height)
    return TokenizedTrajectory(track_id, class_label, initial, tuple(steps),
                               (first_frame, first_frame + len(boxes) - 1))


def rollout(traj: TokenizedTrajectory, width: float, height: float) -> list[Box2D]:
    """Apply the token displacements cumulatively from the initial box.

    A step that would invert the box moves the offending bottom/right corner
    back onto the top/left one.
    """
    x1, y1, x2, y2 = traj.initial_box
    boxes = [Box2D(x1 * width, y1 * height, x2 * width, y2 * height)]
    for step in traj.steps:
        tdx, tdy = dequantize(step.top_left)
        bdx, bdy = dequantize(step.bottom_right)
        x1, y1, x2, y2 = x1 + tdx, y1 + tdy, x2 + bdx, y2 + bdy
        x2, y2 = max(x2, x1), max(y2, y1)
        boxes.append(Box2D(x1 * width, y1 * height, x2 * width, y2 * height))
    return boxes


def _runs(frames: Sequence[int]) -> list[list[int]]:
    runs: list[list[int]] = []
    for f in frames:
        if runs and f == runs[-1][-1] + 1:
            runs[-1].append(f)
        else:
            runs.append([f])
    return runs


def tokenize_clip(clip: ClipAnnotation) -> list[TokenizedTrajectory]:
    """Tokenize each contiguous presence run of each track.

    Single-frame runs become zero-step trajectories.
    """
    out = []
    for tid in sorted(clip.track_ids()):
        present = [f.frame_index for f in clip.frames if f.get(tid) is not None]
        for run in _runs(present):
            objs = [clip.frames[i].get(tid) for i in run]
            label = objs[0].class_label
            if len(run) == 1:
                b = objs[0].box2d
                init = (b.x1 / clip.width, b.y1 / clip.height, b.x2 / clip.width, b.y2 / clip.height)
                out.append(TokenizedTrajectory(tid, label, init, (), (run[0], run[0])))
            else:
                out.append(tokenize_track([o.box2d for o in objs], clip.width, clip.height,
                                          track_id=tid, class_label=label, first_frame=run[0]))
    return out


def rollout_clip(trajs: Sequence[TokenizedTrajectory], n_frames: int, width: int, height: int,
                 fps: float = 7.0) -> ClipAnnotation:
    per_frame: list[list[ObjectState]] = [[] for _ in range(n_frames)]
    for t in trajs:
        for offset, box in enumerate(rollout(t, width, height)):
            f = t.presence[0] + offset
            if 0 <= f < n_frames:
                per_frame[f].append(ObjectState(t.track_id, t.class_label, box))
    frames = tuple(FrameAnnotation(i, tuple(sorted(objs, key=lambda o: o.track_id)))
                   for i, objs in enumerate(per_frame))
    return ClipAnnotation(width, height, fps, frames)


def trajectories_to_jsonl(trajs: Sequence[TokenizedTrajectory]) -> str:
    return "".join(json.dumps(t.to_json()) + "\n" for t in trajs)


def trajectories_from_jsonl(text: str) -> list[TokenizedTrajectory]:
    return [TokenizedTrajectory.from_json(json.loads(line)) for line in text.splitlines() if line.strip()]


# --- deterministic baseline -------------------------------------------------

def _lerp_box(a: Box2D, b: Box2D, j: int, k: int) -> Box2D:
    """Box j/k of the way from a to b; exact at j=0 and when a == b."""
    def mix(u, v):
        return u + (v - u) * j / k
    return Box2D(mix(a.x1, b.x1), mix(a.y1, b.y1), mix(a.x2, b.x2), mix(a.y2, b.y2))


def _clamp_box(box: Box2D, width: int, height: int) -> Optional[Box2D]:
    x1, x2 = min(max(box.x1, 0.0), width), min(max(box.x2, 0.0), width)
    y1, y2 = min(max(box.y1, 0.0), height), min(max(box.y2, 0.0), height)
    if x2 <= x1 or y2 <= y1:
        return None
    return Box2D(x1, y1, x2, y2)


def _half_size(box: Box2D) -> Box2D:
    cx, cy = box.center
    hw, hh = box.width / 4.0, box.height / 4.0
    return Box2D(cx - hw, cy - hh, cx + hw, cy + hh)


def interpolate_baseline(first_frames: Sequence[FrameAnnotation], last_frame: FrameAnnotation,
                         n_frames: int = 25, width: int = 520, height: int = 312,
                         fps: float = 7.0) -> ClipAnnotation:
    """Fill the gap between conditioning frames with simple motion.

    Output frames 0..m-1 copy the initial conditioning frames and frame
    n_frames-1 copies the last one. In between: tracks in both the latest
    initial frame and the last frame are interpolated linearly; tracks that
    vanish continue at constant velocity (clamped to the image) and are gone
    by the last frame; tracks that only appear in the last frame enter at
    frame ceil(n_frames/2) at half size and grow linearly into their final box.
    """
    m = len(first_frames)
    if m < 1:
        raise TokenError("need at least one initial conditioning frame")
    if n_frames < m + 1:
        raise TokenError(f"clip length {n_frames} too short for {m} initial frames plus a final frame")
    anchor_idx = m - 1
    anchor = first_frames[-1]
    span = n_frames - 1 - anchor_idx
    enter = math.ceil(n_frames / 2)
    per_frame: list[list[ObjectState]] = [[] for _ in range(n_frames)]
    for i, fr in enumerate(first_frames):
        per_frame[i] = list(fr.objects)
    per_frame[-1] = list(last_frame.objects)
    for obj in anchor.objects:
        end = last_frame.get(obj.track_id)
        if end is not None:
            for f in range(anchor_idx + 1, n_frames - 1):
                box = _lerp_box(obj.box2d, end.box2d, f - anchor_idx, span)
                per_frame[f].append(ObjectState(obj.track_id, obj.class_label, box))
            continue
        # constant velocity from the two latest initial frames holding the track
        history = [fr.get(obj.track_id) for fr in first_frames]
        prev = next((h for h in reversed(history[:-1]) if h is not None), None)
        if prev is not None:
            gap = anchor_idx - max(i for i, h in enumerate(history[:-1]) if h is not None)
            v = [(c - p) / gap for c, p in zip(obj.box2d.as_list(), prev.box2d.as_list())]
        else:
            v = [0.0] * 4
        b = obj.box2d.as_list()
        for f in range(anchor_idx + 1, n_frames - 1):
            t = f - anchor_idx
            raw = [b[0] + v[0] * t, b[1] + v[1] * t, b[2] + v[2] * t, b[3] + v[3] * t]
            if raw[0] > raw[2] or raw[1] > raw[3]:
                break
            box = _clamp_box(Box2D(*raw), width, height)
            if box is None:
                break
            per_frame[f].append(ObjectState(obj.track_id, obj.class_label, box))
    anchor_ids = anchor.track_ids()
    for obj in last_frame.objects:
        if obj.track_id in anchor_ids:
            continue
        start = max(enter, anchor_idx + 1)
        onset = _half_size(obj.box2d)
        k = n_frames - 1 - start
        for f in range(start, n_frames - 1):
            per_frame[f].append(ObjectState(obj.track_id, obj.class_label,
                                            _lerp_box(onset, obj.box2d, f - start, k)))
    frames = tuple(FrameAnnotation(i, tuple(sorted(objs, key=lambda o: o.track_id)))
                   for i, objs in enumerate(per_frame))
    return ClipAnnotation(width, height, fps, frames)


# --- count-based sampler ----------------------------------------------------

@dataclass
class MarkovModel:
    """Order-1 token transition counts per corner, plus initial-token counts."""

    transitions: np.ndarray = field(default_factory=lambda: np.zeros((2, VOCAB_SIZE, VOCAB_SIZE)))
    initial: np.ndarray = field(default_factory=lambda: np.zeros((2, VOCAB_SIZE)))
    alpha: float = SMOOTHING

    def transition_probs(self, corner: int, prev: int) -> np.ndarray:
        row = self.transitions[corner, prev] + self.alpha
        return row / row.sum()

    def initial_probs(self, corner: int) -> np.ndarray:
        row = self.initial[corner] + self.alpha
        return row / row.sum()

    def to_json(self) -> dict:
        def sparse(a):
            nz = np.nonzero(a)
            return [[*map(int, idx), float(a[idx])] for idx in zip(*nz)]
        return {"alpha": self.alpha, "vocab_size": VOCAB_SIZE,
                "transitions": sparse(self.transitions), "initial": sparse(self.initial)}

    @classmethod
    def from_json(cls, doc: dict) -> "MarkovModel":
        model = cls(alpha=float(doc["alpha"]))
        for c, a, b, v in doc["transitions"]:
            model.transitions[c, a, b] = v
        for c, a, v in doc["initial"]:
            model.initial[c, a] = v
        return model


def markov_fit(corpus: Sequence[TokenizedTrajectory], alpha: float = SMOOTHING) -> MarkovModel:
    if not corpus:
        raise TokenError("cannot fit a transition model on an empty corpus")
    model = MarkovModel(alpha=alpha)
    for traj in corpus:
        for corner in range(2):
            ids = [(s.top_left if corner == 0 else s.bottom_right).id for s in traj.steps]
            if ids:
                model.initial[corner, ids[0]] += 1
            for a, b in zip(ids, ids[1:]):
                model.transitions[corner, a, b] += 1
    return model


def _draw(probs: np.ndarray, temperature: float, rng: np.random.Generator) -> int:
    if temperature <= 0:
        return int(np.argmax(probs))
    logits = np.log(probs) / temperature
    p = np.exp(logits - logits.max())
    p /= p.sum()
    return int(rng.choice(len(p), p=p))


def _sample_steps(model: MarkovModel, n_steps: int, temperature: float,
                  rng: np.random.Generator) -> list[BoxActionPair]:
    prev = [None, None]
    steps = []
    for _ in range(n_steps):
        ids = []
        for corner in range(2):
            probs = (model.initial_probs(corner) if prev[corner] is None
                     else model.transition_probs(corner, prev[corner]))
            ids.append(_draw(probs, temperature, rng))
        prev = ids
        steps.append(BoxActionPair(ActionToken.from_id(ids[0]), ActionToken.from_id(ids[1])))
    return steps


def markov_sample(model: MarkovModel, first_frames: Sequence[FrameAnnotation], last_frame: FrameAnnotation,
                  n_frames: int = 25, temperature: float = 1.0, seed: int = 0, k: int = 5,
                  width: int = 520, height: int = 312, fps: float = 7.0) -> list[ClipAnnotation]:
    """Draw ``k`` candidate clips from the transition model.

    Conditioning frames are copied into place (initial frames first, final
    frame last). Tracks of the latest initial frame are rolled out from their
    box with sampled tokens for the free frames in between. Candidate ``i``
    uses its own generator seeded from ``(seed, i)``.
    """
    m = len(first_frames)
    if k < 1:
        raise TokenError(f"k must be at least 1, got {k}")
    if m < 1 or n_frames < m + 1:
        raise TokenError(f"clip length {n_frames} too short for {m} initial frames plus a final frame")
    anchor = first_frames[-1]
    n_free = n_frames - 1 - m
    candidates = []
    for i in range(k):
        rng = np.random.default_rng([seed, i])
        trajs = []
        for obj in anchor.objects:
            b = obj.box2d
            init = (b.x1 / width, b.y1 / height, b.x2 / width, b.y2 / height)
            steps = _sample_steps(model, n_free, temperature, rng)
            trajs.append(TokenizedTrajectory(obj.track_id, obj.class_label, init, tuple(steps),
                                             (m - 1, m - 1 + n_free)))
        rolled = rollout_clip(trajs, n_frames - 1, width, height, fps)
        per_frame = [list(fr.objects) for fr in rolled.frames]
        for j, fr in enumerate(first_frames):
            per_frame[j] = list(fr.objects)
        per_frame.append(list(last_frame.objects))
        frames = tuple(FrameAnnotation(j, tuple(sorted(objs, key=lambda o: o.track_id)))
                       for j, objs in enumerate(per_frame))
        candidates.append(ClipAnnotation(width, height, fps, frames))
    return candidates


# --- selection ----------------------------------------------------------------

def best_of_k(candidates: Sequence[Sequence[Rgb8Frame]], reference: Sequence[Rgb8Frame],
              pred_is_generated: bool = False) -> tuple[int, MaskScoreReport]:
    """Index of the candidate clip with the highest maskIoU (lowest index on ties)."""
    if not candidates:
        raise TokenError("best_of_k needs at least one candidate")
    best_i, best = -1, None
    for i, cand in enumerate(candidates):
        rep = score_clip(cand, reference, pred_is_generated)
        if best is None or rep.maskIoU > best.maskIoU:
            best_i, best = i, rep
    return best_i, best
