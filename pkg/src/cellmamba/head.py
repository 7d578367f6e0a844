"""Adaptive Mamba detection head and anchor generation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .backbone import PYRAMID_STRIDES, CellMambaBlock, ModelConfig, PyramidSet
from .mixers import TokenSequence
from .nn import Conv2d, Linear, Module, Parameter
from .tmac import CouplingState

PRIOR_PROB = 0.01
ANCHOR_SIDE_PER_STRIDE = 4
ANCHOR_SCALES = (2.0**0, 2.0 ** (1 / 3), 2.0 ** (2 / 3))
ANCHOR_RATIOS = (0.5, 1.0, 2.0)


def dual_pool(pyramid: PyramidSet) -> Tensor:
    """Per-image level descriptors: spatial mean, then channel mean. Returns (B, T)."""
    cols = [level.mean(axis=(1, 2)).mean(axis=-1, keepdims=True) for level in pyramid]
    return ad.concat(cols, axis=-1)


def scale_weights(s: Tensor, fc: Linear) -> Tensor:
    """Per-level weights ``sigmoid(fc(s))`` in (0, 1)."""
    return ad.sigmoid(fc(s))


@dataclass
class HeadOutputs:
    class_logits: list[Tensor]  # per level (B, H, W, K*A)
    box_deltas: list[Tensor]  # per level (B, H, W, 4*A)
    alpha: Tensor | None = None

    @property
    def level_sizes(self) -> list[tuple[int, int]]:
        return [(t.shape[1], t.shape[2]) for t in self.class_logits]

    def flat(self, num_classes: int) -> tuple[Tensor, Tensor]:
        """Concatenate levels into (B, N, K) logits and (B, N, 4) deltas (anchor order)."""
        b = self.class_logits[0].shape[0]
        logits = ad.concat([t.reshape(b, -1, num_classes) for t in self.class_logits], axis=1)
        deltas = ad.concat([t.reshape(b, -1, 4) for t in self.box_deltas], axis=1)
        return logits, deltas


class AdaptiveMambaHead(Module):
    """Shared classification and regression CellMamba blocks over scaled levels."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        c = cfg.fpn_channels
        a = cfg.anchors_per_location
        self.num_classes = cfg.num_classes
        self.anchors_per_location = a
        self.adaptive_scale = cfg.adaptive_scale
        self.fc = Linear(5, 5, rng)
        self.cls_block = CellMambaBlock(c, "nc", rng, cfg)
        self.box_block = CellMambaBlock(c, "nc", rng, cfg)
        self.cls_conv = Conv2d(c, cfg.num_classes * a, 1, rng)
        self.box_conv = Conv2d(c, 4 * a, 1, rng)
        self.cls_conv.weight = Parameter(rng.normal(0, 0.01, self.cls_conv.weight.shape))
        self.cls_conv.bias = Parameter(np.full(cfg.num_classes * a, -np.log((1 - PRIOR_PROB) / PRIOR_PROB)))
        self.box_conv.weight = Parameter(rng.normal(0, 0.01, self.box_conv.weight.shape))

    def forward(self, pyramid: PyramidSet, state: CouplingState) -> HeadOutputs:
        return head_forward(pyramid, self, state)


def head_forward(pyramid: PyramidSet, p: AdaptiveMambaHead, state: CouplingState) -> HeadOutputs:
    if len(pyramid) != 5:
        raise ShapeError("the head expects five pyramid levels")
    alpha = scale_weights(dual_pool(pyramid), p.fc) if p.adaptive_scale else None
    return run_branches(pyramid, p, state, alpha)


def run_branches(pyramid: PyramidSet, p: AdaptiveMambaHead, state: CouplingState, alpha: Tensor | None) -> HeadOutputs:
    logits, deltas = [], []
    for t, level in enumerate(pyramid):
        if alpha is not None:
            level = level * alpha[:, t : t + 1].reshape(alpha.shape[0], 1, 1, 1)
        tokens = TokenSequence.from_map(level)
        logits.append(p.cls_conv(p.cls_block(tokens, state).to_map()))
        deltas.append(p.box_conv(p.box_block(tokens, state).to_map()))
    return HeadOutputs(logits, deltas, alpha)


@dataclass
class AnchorSet:
    """All anchors of one image, concatenated level by level.

    ``boxes`` is (N, 4) cxcywh; order within a level is row-major over
    (y, x, anchor), matching `HeadOutputs.flat`.
    """

    boxes: np.ndarray
    level: np.ndarray
    counts: list[int]

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def xyxy(self) -> np.ndarray:
        half = self.boxes[:, 2:] / 2
        return np.concatenate([self.boxes[:, :2] - half, self.boxes[:, :2] + half], axis=1)


def _cell_shapes(stride: int, anchors_per_location: int) -> np.ndarray:
    side = ANCHOR_SIDE_PER_STRIDE * stride
    if anchors_per_location == 1:
        return np.array([[side, side]], dtype=np.float64)
    shapes = []
    for ratio in ANCHOR_RATIOS:
        for scale in ANCHOR_SCALES:
            s = side * scale
            shapes.append((s / np.sqrt(ratio), s * np.sqrt(ratio)))
    return np.array(shapes)


def generate_anchors(
    level_sizes: list[tuple[int, int]],
    strides: tuple[int, ...] = PYRAMID_STRIDES,
    anchors_per_location: int = 1,
) -> AnchorSet:
    """Anchors centred on every pixel centre of every level."""
    boxes, levels, counts = [], [], []
    for li, ((h, w), stride) in enumerate(zip(level_sizes, strides)):
        shapes = _cell_shapes(stride, anchors_per_location)
        ys, xs = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride, indexing="ij")
        centres = np.stack([xs.ravel(), ys.ravel()], axis=1)
        a = len(shapes)
        lvl = np.concatenate(
            [np.repeat(centres, a, axis=0), np.tile(shapes, (len(centres), 1))],
            axis=1,
        )
        boxes.append(lvl)
        levels.append(np.full(len(lvl), li))
        counts.append(len(lvl))
    return AnchorSet(np.concatenate(boxes), np.concatenate(levels), counts)
