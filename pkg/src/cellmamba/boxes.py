"""Box geometry shared by assignment, decoding and evaluation.

Boxes are ``(x_min, y_min, x_max, y_max)`` in image pixels unless a name says
otherwise; anchors are ``(cx, cy, w, h)``.
"""

from __future__ import annotations

import numpy as np

# keeps exp() in decode_box finite for wild regression outputs
MAX_LOG_SCALE = float(np.log(1000.0 / 16))


def iou(a, b) -> float:
    """Intersection over union of two xyxy boxes; 0 for disjoint or degenerate boxes."""
    ax0, ay0, ax1, ay1 = (float(v) for v in a)
    bx0, by0, bx1, by1 = (float(v) for v in b)
    area_a = max(ax1 - ax0, 0.0) * max(ay1 - ay0, 0.0)
    area_b = max(bx1 - bx0, 0.0) * max(by1 - by0, 0.0)
    if area_a <= 0 or area_b <= 0:
        return 0.0
    iw = min(ax1, bx1) - max(ax0, bx0)
    ih = min(ay1, by1) - max(ay0, by0)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (area_a + area_b - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) xyxy arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = np.clip(a[:, 2] - a[:, 0], 0, None) * np.clip(a[:, 3] - a[:, 1], 0, None)
    area_b = np.clip(b[:, 2] - b[:, 0], 0, None) * np.clip(b[:, 3] - b[:, 1], 0, None)
    iw = np.clip(np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]), 0, None)
    ih = np.clip(np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]), 0, None)
    inter = iw * ih
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    out[(area_a[:, None] <= 0) | (area_b[None, :] <= 0)] = 0.0
    return out


def cxcywh_to_xyxy(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    half = boxes[..., 2:] / 2
    return np.concatenate([boxes[..., :2] - half, boxes[..., :2] + half], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    wh = boxes[..., 2:] - boxes[..., :2]
    return np.concatenate([boxes[..., :2] + wh / 2, wh], axis=-1)


def xywh_to_xyxy(boxes) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([boxes[:, :2], boxes[:, :2] + boxes[:, 2:]], axis=1)


def xyxy_to_xywh(boxes) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return np.concatenate([boxes[:, :2], boxes[:, 2:] - boxes[:, :2]], axis=1)


def encode_box(gt: np.ndarray, anchor: np.ndarray) -> np.ndarray:
    """Regression targets of xyxy ``gt`` relative to cxcywh ``anchor``.

    Both arguments broadcast, so whole arrays of pairs can be encoded at once.
    """
    g = xyxy_to_cxcywh(gt)
    anchor = np.asarray(anchor, dtype=np.float64)
    if np.any(g[..., 2:] <= 0):
        raise ValueError("ground-truth boxes must have positive width and height")
    if np.any(anchor[..., 2:] <= 0):
        raise ValueError("anchors must have positive width and height")
    return np.concatenate(
        [
            (g[..., :2] - anchor[..., :2]) / anchor[..., 2:],
            np.log(g[..., 2:] / anchor[..., 2:]),
        ],
        axis=-1,
    )


def decode_box(deltas: np.ndarray, anchor: np.ndarray, image_size: tuple[int, int] | None = None) -> np.ndarray:
    """Inverse of `encode_box`; clips to ``image_size = (height, width)`` when given."""
    deltas = np.asarray(deltas, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    centre = anchor[..., :2] + deltas[..., :2] * anchor[..., 2:]
    size = anchor[..., 2:] * np.exp(np.minimum(deltas[..., 2:], MAX_LOG_SCALE))
    out = np.concatenate([centre - size / 2, centre + size / 2], axis=-1)
    if image_size is not None:
        h, w = image_size
        out[..., 0::2] = np.clip(out[..., 0::2], 0, w)
        out[..., 1::2] = np.clip(out[..., 1::2], 0, h)
    return out
