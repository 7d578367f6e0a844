"""Hierarchical CellMamba backbone and the P2-P6 feature pyramid."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, ShapeError, Tensor
from .mixers import FfnParams, MsaParams, NcMambaParams, TokenSequence
from .nn import Conv2d, LayerNorm, Module
from .tmac import CouplingState, TmacParams

STAGE_STRIDES = (4, 8, 16, 32)
PYRAMID_STRIDES = (8, 16, 32, 64, 128)
INPUT_MULTIPLE = 32


@dataclass
class ModelConfig:
    stage_depths: tuple[int, ...] = (2, 2, 8, 4)
    stage_dims: tuple[int, ...] = (48, 96, 192, 384)
    mixer_per_stage: tuple[str, ...] = ("nc", "nc", "nc", "msa")
    fpn_channels: int = 128
    num_classes: int = 4
    warmup_epochs: int = 35
    anchors_per_location: int = 1
    n_state: int = 16
    msa_heads: int = 4
    ffn_expansion: int = 4
    attn_kernel: int = 7
    adaptive_scale: bool = True

    def __post_init__(self):
        self.stage_depths = tuple(int(d) for d in self.stage_depths)
        self.stage_dims = tuple(int(d) for d in self.stage_dims)
        self.mixer_per_stage = tuple(self.mixer_per_stage)
        if not (len(self.stage_depths) == len(self.stage_dims) == len(self.mixer_per_stage) == 4):
            raise ConfigurationError("expected four stages")
        for name, dim in [("stage_dims", d) for d in self.stage_dims] + [("fpn_channels", self.fpn_channels)]:
            if dim % 2:
                raise ConfigurationError(f"{name} entries must be even (channel split), got {dim}")
        for mixer in self.mixer_per_stage:
            if mixer not in ("nc", "msa"):
                raise ConfigurationError(f"unknown mixer {mixer!r}")
        if self.anchors_per_location not in (1, 9):
            raise ConfigurationError("anchors_per_location must be 1 or 9")

    @classmethod
    def full(cls, **overrides) -> "ModelConfig":
        return cls(**overrides)

    @classmethod
    def micro(cls, **overrides) -> "ModelConfig":
        base = dict(
            stage_depths=(1, 1, 2, 1),
            stage_dims=(32, 64, 128, 256),
            fpn_channels=64,
            num_classes=3,
            warmup_epochs=20,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


class CellMambaBlock(Module):
    """Pre-norm residual mixer, TMAC gate, pre-norm residual FFN."""

    def __init__(self, dim: int, mixer: str, rng: np.random.Generator, cfg: ModelConfig):
        self.norm1 = LayerNorm(dim)
        if mixer == "nc":
            self.mixer = NcMambaParams(dim, rng, n_state=cfg.n_state)
        else:
            self.mixer = MsaParams(dim, rng, heads=cfg.msa_heads)
        self.tmac = TmacParams(rng, kernel_size=cfg.attn_kernel)
        self.norm2 = LayerNorm(dim)
        self.ffn = FfnParams(dim, rng, expansion=cfg.ffn_expansion)

    def forward(self, x: TokenSequence, state: CouplingState) -> TokenSequence:
        return cellmamba_block(x, self, state)


def cellmamba_block(x: TokenSequence, blk: CellMambaBlock, state: CouplingState) -> TokenSequence:
    u = x.data + blk.mixer(x.with_data(blk.norm1(x.data))).data
    v = blk.tmac(x.with_data(u), state)
    return v.with_data(v.data + blk.ffn(v.with_data(blk.norm2(v.data))).data)


class Stem(Module):
    """Two overlapping 4x4 stride-2 convolutions: image -> stride-4 tokens."""

    def __init__(self, dim: int, rng: np.random.Generator, in_channels: int = 3):
        self.conv1 = Conv2d(in_channels, dim // 2, 4, rng, stride=2, padding=1)
        self.conv2 = Conv2d(dim // 2, dim, 4, rng, stride=2, padding=1)
        self.norm = LayerNorm(dim)

    def forward(self, image: Tensor) -> TokenSequence:
        return stem(image, self)


def check_image_size(h: int, w: int, multiple: int = INPUT_MULTIPLE) -> None:
    if h % multiple or w % multiple or h == 0 or w == 0:
        raise ShapeError(f"image size {h}x{w} must be a positive multiple of {multiple}")


def stem(image: Tensor, p: Stem) -> TokenSequence:
    if image.ndim != 4:
        raise ShapeError(f"expected (B, H, W, 3) image, got {image.shape}")
    check_image_size(image.shape[1], image.shape[2])
    h = ad.gelu(p.conv1(image))
    return TokenSequence.from_map(p.norm(p.conv2(h)))


class Downsample(Module):
    """2x2 stride-2 patch-merging convolution followed by LayerNorm."""

    def __init__(self, cin: int, cout: int, rng: np.random.Generator):
        self.conv = Conv2d(cin, cout, 2, rng, stride=2, padding=0)
        self.norm = LayerNorm(cout)

    def forward(self, x: TokenSequence) -> TokenSequence:
        return downsample(x, self)


def downsample(x: TokenSequence, p: Downsample) -> TokenSequence:
    if x.height % 2 or x.width % 2:
        raise ShapeError(f"downsample needs even spatial dims, got {x.height}x{x.width}")
    return TokenSequence.from_map(p.norm(p.conv(x.to_map())))


class Backbone(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dims = cfg.stage_dims
        self.stem = Stem(dims[0], rng)
        self.stages = [
            [CellMambaBlock(dims[i], cfg.mixer_per_stage[i], rng, cfg) for _ in range(cfg.stage_depths[i])]
            for i in range(4)
        ]
        self.downsamples = [Downsample(dims[i], dims[i + 1], rng) for i in range(3)]
        self.out_norms = [LayerNorm(dims[i]) for i in (1, 2, 3)]

    def _children(self):
        yield from super()._children()
        for i, stage in enumerate(self.stages):
            for j, blk in enumerate(stage):
                yield f"stages.{i}.{j}", blk

    @property
    def num_blocks(self) -> int:
        return sum(len(s) for s in self.stages)

    def forward(self, image: Tensor, state: CouplingState) -> tuple[Tensor, Tensor, Tensor]:
        return backbone_forward(image, self, state)


def backbone_forward(image: Tensor, p: Backbone, state: CouplingState) -> tuple[Tensor, Tensor, Tensor]:
    """Run the four stages; return the stride 8/16/32 outputs as (B, H, W, C) maps."""
    x = p.stem(image)
    outputs = []
    for i, stage in enumerate(p.stages):
        if i > 0:
            x = p.downsamples[i - 1](x)
        for blk in stage:
            x = blk(x, state)
        if i > 0:
            outputs.append(p.out_norms[i - 1](x.to_map()))
    return outputs[0], outputs[1], outputs[2]


@dataclass
class PyramidSet:
    levels: list[Tensor]
    strides: tuple[int, ...] = field(default=PYRAMID_STRIDES)

    def __post_init__(self):
        if len(self.levels) != 5:
            raise ShapeError(f"a pyramid has exactly five levels, got {len(self.levels)}")

    def __iter__(self):
        return iter(self.levels)

    def __len__(self):
        return len(self.levels)

    def __getitem__(self, i):
        return self.levels[i]

    @property
    def sizes(self) -> list[tuple[int, int]]:
        return [(t.shape[1], t.shape[2]) for t in self.levels]


class FPN(Module):
    def __init__(self, in_dims: tuple[int, int, int], channels: int, rng: np.random.Generator):
        self.in_dims = tuple(in_dims)
        self.channels = channels
        self.laterals = [Conv2d(c, channels, 1, rng) for c in in_dims]
        self.smooth = [Conv2d(channels, channels, 3, rng, padding=1) for _ in in_dims]
        self.p5 = Conv2d(channels, channels, 3, rng, stride=2)
        self.p6 = Conv2d(channels, channels, 3, rng, stride=2)

    def forward(self, l2: Tensor, l3: Tensor, l4: Tensor) -> PyramidSet:
        return fpn_build(l2, l3, l4, self)


def _halve(x: Tensor, conv: Conv2d) -> Tensor:
    # 3x3 stride 2: pad (0, 1) on even sizes, (1, 1) on odd, giving ceil(H / 2) exactly
    if x.shape[1] % 2 != x.shape[2] % 2:
        raise ShapeError(f"map height and width must share parity, got {x.shape[1]}x{x.shape[2]}")
    padding = (0, 1) if x.shape[1] % 2 == 0 else (1, 1)
    return ad.conv2d(x, conv.weight, conv.bias, stride=2, padding=padding)


def fpn_build(l2: Tensor, l3: Tensor, l4: Tensor, p: FPN) -> PyramidSet:
    for t, c in zip((l2, l3, l4), p.in_dims):
        if t.shape[-1] != c:
            raise ShapeError(f"FPN input has {t.shape[-1]} channels, lateral expects {c}")
    lat4 = p.laterals[2](l4)
    lat3 = p.laterals[1](l3) + ad.upsample_nearest2x(lat4)
    lat2 = p.laterals[0](l2) + ad.upsample_nearest2x(lat3)
    p2, p3, p4 = (conv(t) for conv, t in zip(p.smooth, (lat2, lat3, lat4)))
    p5 = _halve(lat4, p.p5)
    p6 = _halve(ad.relu(p5), p.p6)
    return PyramidSet([p2, p3, p4, p5, p6])
