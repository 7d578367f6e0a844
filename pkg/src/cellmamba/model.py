"""The assembled detector: backbone -> FPN -> adaptive head."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from .autodiff import Tensor
from .backbone import FPN, Backbone, ModelConfig, PyramidSet
from .head import AdaptiveMambaHead, AnchorSet, HeadOutputs, generate_anchors
from .nn import Module
from .tmac import CouplingState


class CellMamba(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.backbone = Backbone(cfg, rng)
        self.fpn = FPN(cfg.stage_dims[1:], cfg.fpn_channels, rng)
        self.head = AdaptiveMambaHead(cfg, rng)

    def pyramid(self, images: Tensor, state: CouplingState) -> PyramidSet:
        return self.fpn(*self.backbone(images, state))

    def forward(self, images: Tensor, state: CouplingState) -> HeadOutputs:
        return self.head(self.pyramid(images, state), state)

    def anchors(self, image_size: tuple[int, int]) -> AnchorSet:
        return _anchors_for(tuple(image_size), self.cfg.anchors_per_location)


def pyramid_sizes(image_size: tuple[int, int]) -> list[tuple[int, int]]:
    """Spatial size of P2..P6 for an input of ``(height, width)``."""
    h, w = image_size[0] // 8, image_size[1] // 8
    sizes = [(h, w), (h // 2, w // 2), (h // 4, w // 4)]
    for _ in range(2):
        h, w = -(-sizes[-1][0] // 2), -(-sizes[-1][1] // 2)
        sizes.append((h, w))
    return sizes


@lru_cache(maxsize=8)
def _anchors_for(image_size: tuple[int, int], anchors_per_location: int) -> AnchorSet:
    return generate_anchors(pyramid_sizes(image_size), anchors_per_location=anchors_per_location)
