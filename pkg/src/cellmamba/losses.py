"""Anchor assignment, focal classification loss and smooth-L1 box loss."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Function, Tensor
from .boxes import encode_box, iou_matrix

NEGATIVE = -1
IGNORE = -2


class NumericError(FloatingPointError):
    """A loss or gradient became NaN or infinite."""


@dataclass(frozen=True)
class LossConfig:
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    box_weight: float = 1.0
    pos_iou: float = 0.5
    neg_iou: float = 0.4

    def __post_init__(self):
        if not 0 < self.focal_alpha < 1:
            raise ValueError("focal_alpha must lie in (0, 1)")
        if self.focal_gamma < 0:
            raise ValueError("focal_gamma must be >= 0")
        if self.neg_iou > self.pos_iou:
            raise ValueError("neg_iou must not exceed pos_iou")


@dataclass
class Assignment:
    """Per-anchor label (class id >= 0, NEGATIVE or IGNORE) and matched gt index (-1 if none)."""

    labels: np.ndarray
    matched: np.ndarray

    @property
    def positive(self) -> np.ndarray:
        return self.labels >= 0

    @property
    def num_positive(self) -> int:
        return int(self.positive.sum())


def assign_targets(anchors_xyxy: np.ndarray, gt_boxes: np.ndarray, gt_labels: np.ndarray, cfg: LossConfig) -> Assignment:
    """IoU-threshold assignment plus a forced match of every gt to its best anchor."""
    n = len(anchors_xyxy)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        return Assignment(labels, matched)
    ious = iou_matrix(anchors_xyxy, gt_boxes)  # (N, M)
    best_gt = ious.argmax(axis=1)  # first maximum -> lowest gt index on ties
    best_iou = ious[np.arange(n), best_gt]
    pos = best_iou >= cfg.pos_iou
    labels[best_iou >= cfg.neg_iou] = IGNORE
    labels[pos] = gt_labels[best_gt[pos]]
    matched[pos] = best_gt[pos]

    # force-match: every gt with any overlap claims one anchor of its own. Gts
    # with the strongest best overlap choose first (lowest index on ties) and
    # take their best anchor not already claimed.
    best_iou_per_gt = ious.max(axis=0)
    claimed = np.zeros(n, dtype=bool)
    for j in sorted(range(len(gt_boxes)), key=lambda j: (-best_iou_per_gt[j], j)):
        column = np.where(claimed, -1.0, ious[:, j])
        a = int(column.argmax())
        if column[a] <= 0:
            continue
        claimed[a] = True
        labels[a] = gt_labels[j]
        matched[a] = j
    return Assignment(labels, matched)


class SigmoidFocalLoss(Function):
    """Summed one-vs-all focal loss. ``targets`` is 0/1, ``weights`` masks ignored entries."""

    def forward(self, logits, targets, weights, alpha, gamma):
        p = ad._sigmoid(logits)
        log_p = -np.logaddexp(0.0, -logits)
        log_q = -np.logaddexp(0.0, logits)  # log(1 - p)
        pos = targets > 0.5
        loss = np.where(
            pos,
            -alpha * (1 - p) ** gamma * log_p,
            -(1 - alpha) * p**gamma * log_q,
        )
        self.ctx.update(p=p, log_p=log_p, log_q=log_q, pos=pos, weights=weights, alpha=alpha, gamma=gamma)
        return np.asarray((loss * weights).sum(), dtype=logits.dtype)

    def backward(self, g):
        c = self.ctx
        p, alpha, gamma = c["p"], c["alpha"], c["gamma"]
        q = 1 - p
        d_pos = alpha * q**gamma * (gamma * p * c["log_p"] - q)
        d_neg = (1 - alpha) * p**gamma * (p - gamma * q * c["log_q"])
        grad = np.where(c["pos"], d_pos, d_neg) * c["weights"] * g
        return grad.astype(p.dtype, copy=False), None, None


def focal_loss_dense(logits: Tensor, targets: np.ndarray, valid: np.ndarray, num_positive: int, cfg: LossConfig) -> Tensor:
    """Focal loss over (..., K) logits, normalised by ``max(1, num_positive)``.

    ``targets`` is the one-hot (..., K) class target, ``valid`` is 1 for anchors
    that take part (positives and negatives) and 0 for ignored ones.
    """
    dtype = logits.dtype
    t = Tensor(np.asarray(targets, dtype=dtype))
    w = Tensor(np.broadcast_to(np.asarray(valid, dtype=dtype)[..., None], logits.shape).copy())
    total = SigmoidFocalLoss.apply(logits, t, w, alpha=cfg.focal_alpha, gamma=cfg.focal_gamma)
    return total * (1.0 / max(1, num_positive))


def focal_loss(logits: Tensor, assignment: Assignment, cfg: LossConfig) -> Tensor:
    """Focal loss of one image's (N, K) logits under ``assignment``."""
    n, k = logits.shape
    onehot = np.zeros((n, k))
    pos = np.flatnonzero(assignment.positive)
    onehot[pos, assignment.labels[pos]] = 1.0
    valid = (assignment.labels != IGNORE).astype(np.float64)
    return focal_loss_dense(logits, onehot, valid, assignment.num_positive, cfg)


class SmoothL1(Function):
    def forward(self, x):
        ax = np.abs(x)
        self.ctx["x"] = x
        return np.where(ax < 1.0, 0.5 * x * x, ax - 0.5)

    def backward(self, g):
        return (g * np.clip(self.ctx["x"], -1.0, 1.0),)


def smooth_l1_rows(pred: Tensor, target: np.ndarray, num_positive: int) -> Tensor:
    """Smooth-L1 (beta 1) summed over the given rows, divided by ``num_positive``."""
    if num_positive == 0 or pred.size == 0:
        return Tensor(np.zeros((), dtype=pred.dtype))
    diff = pred - Tensor(np.asarray(target, dtype=pred.dtype))
    return SmoothL1.apply(diff).sum() * (1.0 / num_positive)


def smooth_l1(box_deltas: Tensor, targets: np.ndarray, assignment: Assignment) -> Tensor:
    """Box loss of one image: (N, 4) predictions vs (N, 4) targets, positives only.

    Zero positives give a zero loss.
    """
    pos = np.flatnonzero(assignment.positive)
    if len(pos) == 0:
        return Tensor(np.zeros((), dtype=box_deltas.dtype))
    return smooth_l1_rows(box_deltas[pos], np.asarray(targets)[pos], len(pos))


def total_loss(cls_loss: Tensor, box_loss: Tensor, cfg: LossConfig) -> Tensor:
    for name, value in (("classification", cls_loss), ("box", box_loss)):
        if not np.all(np.isfinite(value.data)):
            raise NumericError(f"{name} loss is not finite: {value.data}")
    return cls_loss + box_loss * cfg.box_weight


@dataclass
class LossBreakdown:
    total: Tensor
    cls: float
    box: float
    num_positive: int


def detection_loss(
    logits: Tensor,
    deltas: Tensor,
    anchors_xyxy: np.ndarray,
    anchors_cxcywh: np.ndarray,
    targets: list[tuple[np.ndarray, np.ndarray]],
    cfg: LossConfig,
) -> LossBreakdown:
    """Full objective for a batch.

    ``logits`` is (B, N, K), ``deltas`` (B, N, 4); ``targets`` holds per image
    an (M, 4) xyxy box array and an (M,) class array.
    """
    b, n, k = logits.shape
    onehot = np.zeros((b, n, k))
    valid = np.zeros((b, n))
    pos_b, pos_a, reg_targets = [], [], []
    for i, (boxes, classes) in enumerate(targets):
        asg = assign_targets(anchors_xyxy, boxes, classes, cfg)
        valid[i] = asg.labels != IGNORE
        pos = np.flatnonzero(asg.positive)
        onehot[i, pos, asg.labels[pos]] = 1.0
        if len(pos):
            pos_b.append(np.full(len(pos), i))
            pos_a.append(pos)
            reg_targets.append(encode_box(np.asarray(boxes)[asg.matched[pos]], anchors_cxcywh[pos]))
    num_pos = int(sum(len(p) for p in pos_a))
    cls = focal_loss_dense(logits, onehot, valid, num_pos, cfg)
    if num_pos:
        bi, ai = np.concatenate(pos_b), np.concatenate(pos_a)
        box = smooth_l1_rows(deltas[bi, ai], np.concatenate(reg_targets), num_pos)
    else:
        box = Tensor(np.zeros((), dtype=deltas.dtype))
    total = total_loss(cls, box, cfg)
    return LossBreakdown(total, float(cls.data), float(box.data), num_pos)
