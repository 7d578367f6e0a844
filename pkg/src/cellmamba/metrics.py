"""Detection decoding, NMS, COCO-style mAP and macro P/R/F1 at the best threshold.

Matching convention used throughout: detections are taken in descending score
order and each one is matched to the unmatched ground truth of the same image and
class with the highest IoU, provided that IoU reaches the threshold. Each ground
truth is matched at most once.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import _sigmoid
from .boxes import decode_box, iou, iou_matrix
from .head import AnchorSet, HeadOutputs

COCO_IOUS = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))

__all__ = [
    "Detection",
    "GroundTruth",
    "EvalReport",
    "iou",
    "decode_and_filter",
    "nms",
    "average_precision",
    "map_eval",
    "optimal_threshold_prf1",
    "evaluate",
]


@dataclass
class Detection:
    bbox: tuple[float, float, float, float]
    class_id: int
    score: float
    image_id: int = 0


@dataclass
class GroundTruth:
    bbox: tuple[float, float, float, float]
    class_id: int
    image_id: int = 0


def decode_and_filter(
    outputs: HeadOutputs,
    anchors: AnchorSet,
    num_classes: int,
    image_size: tuple[int, int],
    score_floor: float = 0.05,
    top_k: int = 1000,
    image_ids: Sequence[int] | None = None,
) -> list[list[Detection]]:
    """Turn raw head outputs into per-image candidate detections (before NMS).

    Per level, only the ``top_k`` highest (anchor, class) scores above
    ``score_floor`` survive; ties keep the lower flat index.
    """
    if not 0 <= score_floor < 1:
        raise ValueError("score_floor must lie in [0, 1)")
    batch = outputs.class_logits[0].shape[0]
    image_ids = list(range(batch)) if image_ids is None else list(image_ids)
    offsets = np.concatenate([[0], np.cumsum(anchors.counts)])
    results: list[list[Detection]] = [[] for _ in range(batch)]
    for lvl, (logit_t, delta_t) in enumerate(zip(outputs.class_logits, outputs.box_deltas)):
        logits = logit_t.data.reshape(batch, -1, num_classes).astype(np.float64)
        deltas = delta_t.data.reshape(batch, -1, 4).astype(np.float64)
        lvl_anchors = anchors.boxes[offsets[lvl] : offsets[lvl + 1]]
        for b in range(batch):
            scores = _sigmoid(logits[b]).ravel()
            keep = np.flatnonzero(scores > score_floor)
            if len(keep) == 0:
                continue
            order = keep[np.lexsort((keep, -scores[keep]))][:top_k]
            anchor_idx, cls = np.divmod(order, num_classes)
            boxes = decode_box(deltas[b, anchor_idx], lvl_anchors[anchor_idx], image_size)
            for box, c, s in zip(boxes, cls, scores[order]):
                if box[2] > box[0] and box[3] > box[1]:
                    results[b].append(Detection(tuple(float(v) for v in box), int(c), float(s), image_ids[b]))
    return results


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5) -> list[Detection]:
    """Greedy per-class non-maximum suppression.

    Output is ordered by descending score, input position breaking ties.
    """
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    if not order:
        return []
    boxes = np.array([dets[i].bbox for i in order], dtype=np.float64)
    classes = np.array([dets[i].class_id for i in order])
    images = np.array([dets[i].image_id for i in order])
    overlaps = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    kept = []
    for pos in range(len(order)):
        if suppressed[pos]:
            continue
        kept.append(dets[order[pos]])
        same = (classes == classes[pos]) & (images == images[pos])
        suppressed |= same & (overlaps[pos] > iou_threshold)
    return kept


def _match(dets: list[Detection], gts: list[GroundTruth], iou_threshold: float) -> np.ndarray:
    """TP flags for ``dets`` (already in descending-score order) against ``gts``."""
    by_image: dict[int, list[int]] = {}
    for j, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(j)
    used = np.zeros(len(gts), dtype=bool)
    tp = np.zeros(len(dets), dtype=bool)
    for i, d in enumerate(dets):
        best, best_iou = -1, iou_threshold
        for j in by_image.get(d.image_id, ()):
            if used[j]:
                continue
            o = iou(d.bbox, gts[j].bbox)
            if o >= best_iou and (best < 0 or o > best_iou):
                best, best_iou = j, o
        if best >= 0:
            used[best] = True
            tp[i] = True
    return tp


def _sorted(dets: Sequence[Detection]) -> list[Detection]:
    return [dets[i] for i in sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))]


def pr_curve(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float) -> tuple[np.ndarray, np.ndarray]:
    """Precision and recall after each detection (single class, descending score)."""
    dets = _sorted(dets)
    tp = _match(dets, list(gts), iou_threshold)
    ctp = np.cumsum(tp)
    cfp = np.cumsum(~tp)
    precision = ctp / np.maximum(ctp + cfp, 1)
    recall = ctp / max(len(gts), 1)
    return precision, recall


def average_precision(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_threshold: float = 0.5, class_id: int | None = None
) -> float | None:
    """101-point interpolated AP for one class.

    Returns None when the class has neither ground truth nor detections (the
    value is undefined and callers leave it out of means), and 0.0 when there
    are detections but no ground truth.
    """
    if class_id is not None:
        dets = [d for d in dets if d.class_id == class_id]
        gts = [g for g in gts if g.class_id == class_id]
    if not gts:
        return None if not dets else 0.0
    if not dets:
        return 0.0
    precision, recall = pr_curve(dets, gts, iou_threshold)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _classes(dets, gts, num_classes: int | None) -> list[int]:
    if num_classes is not None:
        return list(range(num_classes))
    return sorted({d.class_id for d in dets} | {g.class_id for g in gts})


def per_class_ap(dets, gts, num_classes: int | None = None, ious=COCO_IOUS) -> dict[int, dict[float, float | None]]:
    table = {}
    for k in _classes(dets, gts, num_classes):
        dk = [d for d in dets if d.class_id == k]
        gk = [g for g in gts if g.class_id == k]
        table[k] = {t: average_precision(dk, gk, t) for t in ious}
    return table


def _mean(values) -> float:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else 0.0


def map_eval(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], num_classes: int | None = None
) -> tuple[float, float, float]:
    """(mAP@[.50:.95], mAP@50, mAP@75), averaging over classes with defined AP."""
    table = per_class_ap(dets, gts, num_classes)
    map50 = _mean(row[0.5] for row in table.values())
    map75 = _mean(row[0.75] for row in table.values())
    overall = _mean(_mean(row.values()) if any(v is not None for v in row.values()) else None for row in table.values())
    return overall, map50, map75


def prf1_at(dets, gts, threshold: float, classes: list[int], iou_threshold: float = 0.5) -> tuple[float, float, float]:
    """Macro precision, recall and F1 keeping detections with score >= threshold."""
    ps, rs, fs = [], [], []
    for k in classes:
        dk = _sorted([d for d in dets if d.class_id == k and d.score >= threshold])
        gk = [g for g in gts if g.class_id == k]
        tp = int(_match(dk, gk, iou_threshold).sum()) if dk else 0
        p = tp / len(dk) if dk else 0.0
        r = tp / len(gk) if gk else 0.0
        f = 2 * p * r / (p + r) if p + r > 0 else 0.0
        ps.append(p)
        rs.append(r)
        fs.append(f)
    if not classes:
        return 0.0, 0.0, 0.0
    return float(np.mean(ps)), float(np.mean(rs)), float(np.mean(fs))


def optimal_threshold_prf1(
    dets: Sequence[Detection],
    gts: Sequence[GroundTruth],
    iou_threshold: float = 0.5,
    grid: Sequence[float] = THRESHOLD_GRID,
) -> tuple[float, float, float, float]:
    """Sweep confidence thresholds; return (threshold, P, R, F1) maximising macro F1.

    Classes are those present in the ground truth or the detections. Ties go to
    the lowest threshold.
    """
    classes = _classes(dets, gts, None)
    best = (grid[0], 0.0, 0.0, 0.0)
    best_f1 = -1.0
    for t in grid:
        p, r, f = prf1_at(dets, gts, t, classes, iou_threshold)
        if f > best_f1:
            best_f1 = f
            best = (t, p, r, f)
    return best


@dataclass
class EvalReport:
    map: float
    map50: float
    map75: float
    per_class_ap: list[dict] = field(default_factory=list)
    precision: float = 0.0
    recall: float = 0.0
    f1: float = 0.0
    best_threshold: float = 0.0
    num_images: int = 0
    num_detections: int = 0
    num_ground_truth: int = 0
    params: int | None = None
    params_m: float | None = None
    time_ms_per_patch: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)


REPORT_SCHEMA = {
    "type": "object",
    "required": ["map", "map50", "map75", "per_class_ap", "precision", "recall", "f1", "best_threshold"],
    "properties": {
        "map": {"type": "number", "minimum": 0, "maximum": 1},
        "map50": {"type": "number", "minimum": 0, "maximum": 1},
        "map75": {"type": "number", "minimum": 0, "maximum": 1},
        "per_class_ap": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["class_id", "ap", "ap50", "ap75", "num_ground_truth"],
                "properties": {
                    "class_id": {"type": "integer", "minimum": 0},
                    "ap": {"type": ["number", "null"]},
                    "ap50": {"type": ["number", "null"]},
                    "ap75": {"type": ["number", "null"]},
                    "num_ground_truth": {"type": "integer", "minimum": 0},
                },
            },
        },
        "precision": {"type": "number", "minimum": 0, "maximum": 1},
        "recall": {"type": "number", "minimum": 0, "maximum": 1},
        "f1": {"type": "number", "minimum": 0, "maximum": 1},
        "best_threshold": {"type": "number", "minimum": 0, "maximum": 1},
        "num_images": {"type": "integer", "minimum": 0},
        "num_detections": {"type": "integer", "minimum": 0},
        "num_ground_truth": {"type": "integer", "minimum": 0},
        "params": {"type": ["integer", "null"]},
        "params_m": {"type": ["number", "null"]},
        "time_ms_per_patch": {"type": ["number", "null"]},
    },
}


def evaluate(dets: Sequence[Detection], gts: Sequence[GroundTruth], num_classes: int, num_images: int = 0) -> EvalReport:
    table = per_class_ap(dets, gts, num_classes)
    rows = []
    for k, row in table.items():
        defined = [v for v in row.values() if v is not None]
        rows.append(
            {
                "class_id": k,
                "ap": float(np.mean(defined)) if defined else None,
                "ap50": row[0.5],
                "ap75": row[0.75],
                "num_ground_truth": sum(1 for g in gts if g.class_id == k),
            }
        )
    m, m50, m75 = map_eval(dets, gts, num_classes)
    t, p, r, f = optimal_threshold_prf1(dets, gts)
    return EvalReport(
        map=m,
        map50=m50,
        map75=m75,
        per_class_ap=rows,
        precision=p,
        recall=r,
        f1=f,
        best_threshold=t,
        num_images=num_images,
        num_detections=len(dets),
        num_ground_truth=len(gts),
    )
