"""Image normalisation, batched prediction and dataset-level evaluation."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, get_default_dtype, no_grad
from .data import DatasetManifest
from .metrics import Detection, EvalReport, GroundTruth, decode_and_filter, evaluate, nms
from .model import CellMamba
from .tmac import CouplingState

PIXEL_MEAN = 127.5
PIXEL_STD = 64.0


@dataclass(frozen=True)
class EvalConfig:
    score_floor: float = 0.05
    top_k: int = 1000
    nms_iou: float = 0.5
    max_detections: int = 300
    batch_size: int = 4


def to_input(images: Sequence[np.ndarray] | np.ndarray) -> Tensor:
    """uint8 (B, H, W, 3) or a list of (H, W, 3) images -> normalised tensor."""
    arr = np.stack(list(images)) if not isinstance(images, np.ndarray) else images
    if arr.ndim == 3:
        arr = arr[None]
    data = (arr.astype(get_default_dtype()) - PIXEL_MEAN) / PIXEL_STD
    return Tensor(data)


def predict(
    model: CellMamba,
    images: Sequence[np.ndarray],
    state: CouplingState,
    cfg: EvalConfig = EvalConfig(),
    image_ids: Sequence[int] | None = None,
) -> list[list[Detection]]:
    """Detections per image after decoding, score filtering and class-wise NMS."""
    if len(images) == 0:
        raise ValueError("no images to run")
    image_ids = list(range(len(images))) if image_ids is None else list(image_ids)
    out: list[list[Detection]] = []
    with no_grad():
        for start in range(0, len(images), cfg.batch_size):
            chunk = images[start : start + cfg.batch_size]
            x = to_input(chunk)
            size = x.shape[1:3]
            outputs = model(x, state)
            cand = decode_and_filter(
                outputs,
                model.anchors(size),
                model.cfg.num_classes,
                size,
                score_floor=cfg.score_floor,
                top_k=cfg.top_k,
                image_ids=image_ids[start : start + cfg.batch_size],
            )
            for dets in cand:
                kept = nms(dets, cfg.nms_iou)
                kept.sort(key=lambda d: -d.score)
                out.append(kept[: cfg.max_detections])
    return out


def ground_truth(manifest: DatasetManifest) -> list[GroundTruth]:
    index = manifest.class_index()
    return [GroundTruth(a.xyxy, index[a.category_id], a.image_id) for a in manifest.annotations]


def evaluate_model(
    model: CellMamba,
    manifest: DatasetManifest,
    images: Sequence[np.ndarray],
    state: CouplingState,
    cfg: EvalConfig = EvalConfig(),
) -> tuple[EvalReport, list[Detection]]:
    if not manifest.images:
        raise ValueError("cannot evaluate an empty image set")
    ids = [im.id for im in manifest.images]
    t0 = time.perf_counter()
    per_image = predict(model, images, state, cfg, ids)
    elapsed = time.perf_counter() - t0
    dets = [d for ds in per_image for d in ds]
    report = evaluate(dets, ground_truth(manifest), model.cfg.num_classes, len(ids))
    report.params = model.num_parameters()
    report.params_m = round(report.params / 1e6, 3)
    report.time_ms_per_patch = 1000.0 * elapsed / len(ids)
    return report, dets
