"""Binary masks from bounding-box frames and the maskIoU / maskP / maskR scores."""

from __future__ import annotations

import csv
import io
import statistics
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from .renderer import Rgb8Frame

GENERATED_BLACK_SUM = 50


class MaskError(ValueError):
    pass


@dataclass(frozen=True)
class BinaryMask:
    bits: np.ndarray  # (height, width) bool

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        if bits.ndim != 2:
            raise MaskError(f"mask must be 2D, got shape {bits.shape}")
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))

    def __eq__(self, other):
        return isinstance(other, BinaryMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())


@dataclass(frozen=True)
class MaskScoreReport:
    maskIoU: float
    maskP: float
    maskR: float
    firstlast_maskIoU: float
    firstlast_maskP: float
    firstlast_maskR: float

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


SCORE_FIELDS = tuple(f.name for f in fields(MaskScoreReport))


def _channel_sum(frame: Rgb8Frame) -> np.ndarray:
    return frame.pixels.astype(np.int32).sum(axis=2)


def gt_frame_to_mask(frame: Rgb8Frame) -> BinaryMask:
    return BinaryMask(_channel_sum(frame) > 0)


def gen_frame_to_mask(frame: Rgb8Frame) -> BinaryMask:
    # channel sums below 50 count as background
    return BinaryMask(_channel_sum(frame) >= GENERATED_BLACK_SUM)


def _counts(a: BinaryMask, b: BinaryMask) -> tuple[int, int, int, int]:
    if a.bits.shape != b.bits.shape:
        raise MaskError(f"mask shapes differ: {a.bits.shape} vs {b.bits.shape}")
    inter = int(np.count_nonzero(a.bits & b.bits))
    union = int(np.count_nonzero(a.bits | b.bits))
    return inter, union, a.count(), b.count()


def _ratio(num: int, den: int) -> float:
    if den == 0:
        return 1.0 if num == 0 else 0.0
    return num / den


def mask_iou(a: BinaryMask, b: BinaryMask) -> float:
    inter, union, _, _ = _counts(a, b)
    return _ratio(inter, union)


def mask_precision(pred: BinaryMask, gt: BinaryMask) -> float:
    inter, _, n_pred, n_gt = _counts(pred, gt)
    if n_pred == 0:
        # empty prediction is only right when there is nothing to find
        return 1.0 if n_gt == 0 else 0.0
    return inter / n_pred


def mask_recall(pred: BinaryMask, gt: BinaryMask) -> float:
    inter, _, n_pred, n_gt = _counts(pred, gt)
    if n_gt == 0:
        return 1.0 if n_pred == 0 else 0.0
    return inter / n_gt


def _frame_scores(pred: BinaryMask, gt: BinaryMask) -> tuple[float, float, float]:
    return mask_iou(pred, gt), mask_precision(pred, gt), mask_recall(pred, gt)


def score_masks(pred_masks: Sequence[BinaryMask], gt_masks: Sequence[BinaryMask]) -> MaskScoreReport:
    if len(pred_masks) != len(gt_masks):
        raise MaskError(f"frame counts differ: {len(pred_masks)} predicted vs {len(gt_masks)} ground truth")
    if len(gt_masks) < 2:
        raise MaskError("need at least 2 frames to score a clip")
    per_frame = np.array([_frame_scores(p, g) for p, g in zip(pred_masks, gt_masks)])
    overall = per_frame.mean(axis=0)
    firstlast = per_frame[[0, -1]].mean(axis=0)
    return MaskScoreReport(*(float(v) for v in overall), *(float(v) for v in firstlast))


def score_clip(pred_frames: Sequence[Rgb8Frame], gt_frames: Sequence[Rgb8Frame],
               pred_is_generated: bool = True) -> MaskScoreReport:
    """Average per-frame mask scores over a clip and over its first+last frames.

    Ground-truth frames use the plain non-black rule; predicted frames use the
    generated-frame rule when ``pred_is_generated`` is set.
    """
    if len(pred_frames) != len(gt_frames):
        raise MaskError(f"frame counts differ: {len(pred_frames)} predicted vs {len(gt_frames)} ground truth")
    to_mask = gen_frame_to_mask if pred_is_generated else gt_frame_to_mask
    return score_masks([to_mask(f) for f in pred_frames], [gt_frame_to_mask(f) for f in gt_frames])


def report_csv(rows: Sequence[tuple[str, MaskScoreReport]]) -> str:
    """Per-clip CSV plus ``mean`` and ``std`` rows (population std)."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("clip_id", *SCORE_FIELDS))
    for clip_id, rep in rows:
        writer.writerow((clip_id, *(f"{getattr(rep, k):.6f}" for k in SCORE_FIELDS)))
    if rows:
        cols = {k: [getattr(rep, k) for _, rep in rows] for k in SCORE_FIELDS}
        writer.writerow(("mean", *(f"{statistics.fmean(cols[k]):.6f}" for k in SCORE_FIELDS)))
        writer.writerow(("std", *(f"{statistics.pstdev(cols[k]):.6f}" for k in SCORE_FIELDS)))
    return buf.getvalue()


def format_mean_std(values: Sequence[float]) -> str:
    return f"{statistics.fmean(values):.3f} ± {statistics.pstdev(values):.3f}"
