"""Figures written by the CLI report paths (Agg backend, files only)."""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from PIL import Image, ImageDraw  # noqa: E402

from .metrics import Detection, GroundTruth, pr_curve  # noqa: E402

CLASS_COLOURS = [(230, 25, 75), (60, 180, 75), (0, 130, 200), (245, 130, 48), (145, 30, 180), (70, 240, 240)]


def plot_training(history: Sequence, path: str | Path) -> Path:
    epochs = [r.epoch for r in history]
    fig, (ax_loss, ax_lr) = plt.subplots(1, 2, figsize=(10, 4))
    ax_loss.plot(epochs, [r.loss for r in history], label="total")
    ax_loss.plot(epochs, [r.cls_loss for r in history], label="focal")
    ax_loss.plot(epochs, [r.box_loss for r in history], label="smooth L1")
    coupled = [r.epoch for r in history if r.coupled]
    if coupled:
        ax_loss.axvline(coupled[0], color="grey", linestyle="--", label="coupling on")
    ax_loss.set_yscale("log")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("loss")
    ax_loss.legend()
    ax_lr.plot(epochs, [r.lr for r in history])
    ax_lr.set_xlabel("epoch")
    ax_lr.set_ylabel("learning rate (end of epoch)")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_pr_curves(
    dets: Sequence[Detection], gts: Sequence[GroundTruth], num_classes: int, path: str | Path, iou_threshold: float = 0.5
) -> Path:
    fig, ax = plt.subplots(figsize=(5, 5))
    for k in range(num_classes):
        kd = [d for d in dets if d.class_id == k]
        kg = [g for g in gts if g.class_id == k]
        if not kg:
            continue
        precision, recall = pr_curve(kd, kg, iou_threshold)
        ax.plot(np.concatenate([[0.0], recall]), np.concatenate([[1.0], precision]), label=f"class {k}")
    ax.set_xlim(0, 1.01)
    ax.set_ylim(0, 1.01)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"PR @ IoU {iou_threshold:.2f}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def plot_bench(results: dict[str, tuple[Sequence[int], Sequence[float], float | None]], path: str | Path) -> Path:
    """``results`` maps op name to (lengths, seconds, fitted exponent)."""
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, (lengths, seconds, slope) in results.items():
        label = name if slope is None else f"{name} (slope {slope:.2f})"
        ax.loglog(lengths, seconds, "o-", label=label, base=2)
    ax.set_xlabel("sequence length L")
    ax.set_ylabel("seconds per call")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return Path(path)


def draw_overlay(image: np.ndarray, dets: Sequence[Detection], path: str | Path) -> int:
    """Draw boxes with class colours and scores; returns the number of boxes drawn."""
    canvas = Image.fromarray(np.asarray(image, dtype=np.uint8))
    draw = ImageDraw.Draw(canvas)
    for d in dets:
        colour = CLASS_COLOURS[d.class_id % len(CLASS_COLOURS)]
        x0, y0, x1, y1 = d.bbox
        draw.rectangle([x0, y0, x1, y1], outline=colour, width=2)
        draw.text((x0 + 2, max(0.0, y0 - 11)), f"{d.class_id}:{d.score:.2f}", fill=colour)
    canvas.save(path)
    return len(dets)
