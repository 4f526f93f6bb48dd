"""Class-agnostic detection matching and COCO-style AP / mAP evaluation.

Detections on generated frames are scored against detections on the
matching ground-truth frames. Matching ignores class labels and track ids.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Optional, Sequence

from .annotations import AnnotationError, Box2D

IOU_THRESHOLDS = tuple(k / 100 for k in range(50, 100, 5))
RECALL_POINTS = 101
GT_CONFIDENCE_CUTOFF = 0.6
PR_CUTOFFS = tuple(k / 100 for k in range(1, 101))

# dataset label -> COCO label; labels missing here are excluded
COCO_LABEL_MAP: dict[str, dict[str, str]] = {
    "KITTI": {
        "car": "car", "van": "car", "truck": "truck", "pedestrian": "person",
        "person": "person", "cyclist": "person", "tram": "train",
    },
    "vKITTI": {
        "car": "car", "van": "car", "truck": "truck", "tram": "train",
    },
    "BDD": {
        "pedestrian": "person", "rider": "person", "car": "car", "truck": "truck",
        "bus": "bus", "train": "train",
    },
    "nuScenes": {
        **{f"human.{k}": "person" for k in (
            "adult", "child", "construction_worker", "personal_mobility", "police_officer", "wheelchair")},
        **{f"vehicle.{k}": "person" for k in ("bicycle", "motorcycle")},
        **{f"vehicle.{k}": "truck" for k in (
            "bus", "construction", "ambulance", "police", "trailer", "truck")},
        "car": "car",
    },
}
DATASETS = tuple(COCO_LABEL_MAP)


class DetectionError(ValueError):
    pass


@dataclass(frozen=True)
class Detection:
    frame_index: int
    bbox: Box2D
    score: float = 1.0
    class_label: str = ""

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise DetectionError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class DetectionSet:
    clip_id: str
    detections: tuple[Detection, ...] = ()
    width: int = 520
    height: int = 312
    n_frames: Optional[int] = None

    def __post_init__(self):
        dets = tuple(self.detections)
        if self.n_frames is not None:
            for d in dets:
                if not 0 <= d.frame_index < self.n_frames:
                    raise DetectionError(f"{self.clip_id}: frame {d.frame_index} outside clip of {self.n_frames}")
        object.__setattr__(self, "detections", dets)


@dataclass(frozen=True)
class APReport:
    ap_by_threshold: tuple[float, ...]
    thresholds: tuple[float, ...] = IOU_THRESHOLDS

    @property
    def mAP(self) -> float:
        return math.fsum(self.ap_by_threshold) / len(self.ap_by_threshold)

    def ap_at(self, threshold: float) -> float:
        for t, v in zip(self.thresholds, self.ap_by_threshold):
            if math.isclose(t, threshold):
                return v
        raise KeyError(threshold)

    @property
    def AP50(self) -> float:
        return self.ap_at(0.50)

    @property
    def AP75(self) -> float:
        return self.ap_at(0.75)

    @property
    def AP90(self) -> float:
        return self.ap_at(0.90)

    def as_dict(self) -> dict:
        return {"mAP": self.mAP, "AP50": self.AP50, "AP75": self.AP75, "AP90": self.AP90,
                "ap_by_threshold": {f"{t:.2f}": v for t, v in zip(self.thresholds, self.ap_by_threshold)}}


@dataclass(frozen=True)
class PRCurve:
    iou_threshold: float
    points: tuple[tuple[float, float, float], ...] = field(default=())  # (cutoff, precision, recall)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("confidence_cutoff", "precision", "recall"))
        for c, p, r in self.points:
            w.writerow((f"{c:.2f}", f"{p:.6f}", f"{r:.6f}"))
        return buf.getvalue()


def map_class_to_coco(dataset: str, label: str) -> Optional[str]:
    """COCO label for a dataset label, or None when the label is excluded.

    Matching is case-insensitive. nuScenes labels may be given in full
    category form (``human.pedestrian.adult``, ``vehicle.bus.rigid``,
    ``vehicle.car``); these fold onto the table's short keys.
    """
    try:
        table = COCO_LABEL_MAP[dataset]
    except KeyError:
        raise DetectionError(f"unknown dataset {dataset!r}; expected one of {DATASETS}") from None
    key = label.strip().lower()
    if key in table:
        return table[key]
    if dataset == "nuScenes":
        parts = key.split(".")
        if parts[:2] == ["human", "pedestrian"] and len(parts) > 2:
            return table.get(f"human.{parts[2]}")
        if parts[0] == "vehicle" and len(parts) > 1:
            if parts[1] == "emergency" and len(parts) > 2:
                return table.get(f"vehicle.{parts[2]}")
            if parts[1] == "car":
                return table["car"]
            return table.get(f"vehicle.{parts[1]}")
    return None


def map_detection_classes(dets: DetectionSet, dataset: str) -> DetectionSet:
    """Relabel to COCO names and drop detections outside the dataset's mapping.

    Labels already equal to one of the dataset's COCO targets are kept as-is.
    """
    targets = set(COCO_LABEL_MAP[dataset].values())
    out = []
    for d in dets.detections:
        label = d.class_label.lower()
        coco = label if label in targets else map_class_to_coco(dataset, d.class_label)
        if coco is not None:
            out.append(Detection(d.frame_index, d.bbox, d.score, coco))
    return DetectionSet(dets.clip_id, tuple(out), dets.width, dets.height, dets.n_frames)


def filter_gt_detections(dets: DetectionSet, cutoff: float = GT_CONFIDENCE_CUTOFF) -> DetectionSet:
    kept = tuple(d for d in dets.detections if d.score >= cutoff)
    return DetectionSet(dets.clip_id, kept, dets.width, dets.height, dets.n_frames)


def box_iou(a: Box2D, b: Box2D) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = iw * ih if iw > 0 and ih > 0 else 0.0
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def _pred_order(preds: Sequence[Detection]) -> list[int]:
    """Indices by descending score, then larger area, then input order."""
    return sorted(range(len(preds)), key=lambda i: (-preds[i].score, -preds[i].bbox.area, i))


@dataclass(frozen=True)
class FrameMatch:
    pairs: tuple[tuple[int, int], ...]  # (pred index, ref index)
    unmatched_preds: tuple[int, ...]
    unmatched_refs: tuple[int, ...]


def match_frame(preds: Sequence[Detection], refs: Sequence[Detection], iou_threshold: float) -> FrameMatch:
    """Greedy confidence-ordered matching; each ref is used at most once.

    A pred takes the free ref with the highest IoU (lowest index on ties)
    provided that IoU is at least ``iou_threshold``.
    """
    free = set(range(len(refs)))
    pairs = []
    for pi in _pred_order(preds):
        best, best_iou = -1, -1.0
        for ri in sorted(free):
            iou = box_iou(preds[pi].bbox, refs[ri].bbox)
            if iou > best_iou:
                best, best_iou = ri, iou
        if best >= 0 and best_iou >= iou_threshold:
            pairs.append((pi, best))
            free.discard(best)
    matched = {p for p, _ in pairs}
    return FrameMatch(tuple(pairs), tuple(i for i in range(len(preds)) if i not in matched), tuple(sorted(free)))


def _by_frame(dets: Iterable[Detection]) -> dict[int, list[tuple[int, Detection]]]:
    out: dict[int, list[tuple[int, Detection]]] = {}
    for i, d in enumerate(dets):
        out.setdefault(d.frame_index, []).append((i, d))
    return out


def _tp_flags(preds: Sequence[Detection], refs: Sequence[Detection], iou_threshold: float) -> list[bool]:
    flags = [False] * len(preds)
    ref_frames = _by_frame(refs)
    for frame, items in _by_frame(preds).items():
        idx = [i for i, _ in items]
        m = match_frame([d for _, d in items], [d for _, d in ref_frames.get(frame, [])], iou_threshold)
        for p, _ in m.pairs:
            flags[idx[p]] = True
    return flags


def average_precision(preds: Sequence[Detection], refs: Sequence[Detection], iou_threshold: float) -> float:
    """101-point interpolated AP over detections pooled across frames.

    Precision at recall level r is the best precision among ranks whose
    recall reaches r; recall comparisons are done in exact integer arithmetic.
    With no refs the AP is 1.0 if there are also no preds, else 0.0.
    """
    preds, refs = list(preds), list(refs)
    n_ref = len(refs)
    if n_ref == 0:
        return 1.0 if not preds else 0.0
    flags = _tp_flags(preds, refs, iou_threshold)
    tp_at, n_at = [], []
    tp = 0
    for k, i in enumerate(_pred_order(preds), start=1):
        tp += flags[i]
        tp_at.append(tp)
        n_at.append(k)
    # suffix maximum of precision, as exact fractions keyed by rank
    best: list[Fraction] = [Fraction(0)] * (len(tp_at) + 1)
    for k in range(len(tp_at) - 1, -1, -1):
        best[k] = max(best[k + 1], Fraction(tp_at[k], n_at[k]))
    total = Fraction(0)
    rank = 0
    for level in range(RECALL_POINTS):
        # first rank whose recall tp/n_ref >= level/100
        while rank < len(tp_at) and 100 * tp_at[rank] < level * n_ref:
            rank += 1
        if rank == len(tp_at):
            break
        total += best[rank]
    return float(total / RECALL_POINTS)


def evaluate_coco(preds: Sequence[Detection], refs: Sequence[Detection],
                  thresholds: Sequence[float] = IOU_THRESHOLDS) -> APReport:
    return APReport(tuple(average_precision(preds, refs, t) for t in thresholds), tuple(thresholds))


def pr_curve(preds: Sequence[Detection], refs: Sequence[Detection], iou_threshold: float,
             cutoffs: Sequence[float] = PR_CUTOFFS) -> PRCurve:
    if not refs:
        raise DetectionError("precision-recall curve is undefined without reference detections")
    points = []
    for c in cutoffs:
        kept = [d for d in preds if d.score >= c]
        tp = sum(_tp_flags(kept, refs, iou_threshold))
        precision = tp / len(kept) if kept else 1.0
        points.append((c, precision, tp / len(refs)))
    return PRCurve(iou_threshold, tuple(points))


# --- file format ------------------------------------------------------------

def load_detection_json(text: str) -> DetectionSet:
    """Parse ``{clip_id, width, height, frames: [{index, detections: [{bbox, score, class}]}]}``."""
    try:
        doc = json.loads(text)
        dets = []
        for fr in doc["frames"]:
            idx = int(fr["index"])
            for d in fr.get("detections", []):
                dets.append(Detection(idx, Box2D(*[float(v) for v in d["bbox"]]),
                                      float(d.get("score", 1.0)), str(d.get("class", ""))))
        n_frames = doc.get("n_frames")
        return DetectionSet(str(doc.get("clip_id", "")), tuple(dets), int(doc.get("width", 520)),
                            int(doc.get("height", 312)), int(n_frames) if n_frames is not None else None)
    except (KeyError, TypeError, ValueError, AnnotationError) as exc:
        if isinstance(exc, DetectionError):
            raise
        raise DetectionError(f"invalid detection file: {exc!r}") from None


def dump_detection_json(dets: DetectionSet) -> str:
    frames: dict[int, list] = {}
    for d in dets.detections:
        frames.setdefault(d.frame_index, []).append(
            {"bbox": d.bbox.as_list(), "score": d.score, "class": d.class_label})
    doc = {"clip_id": dets.clip_id, "width": dets.width, "height": dets.height,
           "frames": [{"index": i, "detections": frames[i]} for i in sorted(frames)]}
    if dets.n_frames is not None:
        doc["n_frames"] = dets.n_frames
    return json.dumps(doc, indent=1)


def load_detection_file(text: str) -> list[DetectionSet]:
    """A file holds one clip document or a JSON list of them."""
    doc = json.loads(text)
    if isinstance(doc, list):
        return [load_detection_json(json.dumps(d)) for d in doc]
    return [load_detection_json(text)]


def pool_clips(preds: Sequence[DetectionSet], refs: Sequence[DetectionSet]) -> tuple[list[Detection], list[Detection]]:
    """Pool several clips into one evaluation set by giving each clip its own frame range."""
    ref_by_id = {r.clip_id: r for r in refs}
    if len(ref_by_id) != len(refs):
        raise DetectionError("duplicate clip ids in reference detections")
    pred_by_id = {p.clip_id: p for p in preds}
    missing = set(pred_by_id) ^ set(ref_by_id)
    if missing:
        raise DetectionError(f"clip ids present on one side only: {sorted(missing)}")
    pooled_p, pooled_r = [], []
    offset = 0
    for cid in sorted(ref_by_id):
        p, r = pred_by_id[cid], ref_by_id[cid]
        span = 1 + max((d.frame_index for d in (*p.detections, *r.detections)), default=-1)
        span = max(span, p.n_frames or 0, r.n_frames or 0)
        pooled_p += [Detection(d.frame_index + offset, d.bbox, d.score, d.class_label) for d in p.detections]
        pooled_r += [Detection(d.frame_index + offset, d.bbox, d.score, d.class_label) for d in r.detections]
        offset += span
    return pooled_p, pooled_r


def format_table_row(name: str, rep: APReport) -> str:
    return f"{name:<16} mAP {rep.mAP:.3f}  AP50 {rep.AP50:.3f}  AP75 {rep.AP75:.3f}  AP90 {rep.AP90:.3f}"
