"""Triple-mapping adaptive coupling (TMAC).

The token stream is split into two channel halves. Each half gets its own
spatial attention map (channel mean and max -> conv -> sigmoid), a third map is
computed from the sum of the halves with the *same* convolution, and after a
warmup period the third map multiplies into the other two. Each half is then
gated by its map and the halves are concatenated again.

Attention maps are plain ``(B, H, W, 1)`` tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, ShapeError, Tensor
from .mixers import TokenSequence
from .nn import Module, Parameter

ATTN_KERNEL = 7
ATTN_PADDING = 3


@dataclass(frozen=True)
class CouplingState:
    """Snapshot of the training schedule handed to the model each epoch."""

    warmup_epochs: int
    current_epoch: int = 0

    def __post_init__(self):
        if self.warmup_epochs < 1:
            raise ConfigurationError("warmup_epochs must be positive")
        if self.current_epoch < 0:
            raise ConfigurationError("current_epoch must be >= 0")

    @property
    def coupled(self) -> bool:
        return self.current_epoch >= self.warmup_epochs

    def at_epoch(self, epoch: int) -> "CouplingState":
        return CouplingState(self.warmup_epochs, epoch)


class TmacParams(Module):
    """The single 2->1 channel convolution shared by all three maps."""

    def __init__(self, rng: np.random.Generator, kernel_size: int = ATTN_KERNEL):
        if kernel_size % 2 == 0:
            raise ConfigurationError("attention kernel size must be odd")
        bound = 1.0 / np.sqrt(2 * kernel_size * kernel_size)
        self.kernel = Parameter(rng.uniform(-bound, bound, (kernel_size, kernel_size, 2, 1)))
        self.bias = Parameter(np.zeros(1))

    @property
    def padding(self) -> int:
        return self.kernel.shape[0] // 2

    def forward(self, x: TokenSequence, state: CouplingState) -> TokenSequence:
        return tmac_forward(x, self, state)


def channel_split(x: TokenSequence) -> tuple[TokenSequence, TokenSequence]:
    c = x.channels
    if c % 2:
        raise ConfigurationError(f"channel_split needs an even channel count, got {c}")
    first, second = ad.split(x.data, 2, axis=-1)
    return x.with_data(first), x.with_data(second)


def idiosyncratic_map(f: Tensor, p: TmacParams) -> Tensor:
    """Spatial attention map of one ``(B, H, W, C')`` branch, values in (0, 1)."""
    pooled = ad.concat(
        [ad.reduce(f, -1, "mean", keepdims=True), ad.reduce(f, -1, "max", keepdims=True)],
        axis=-1,
    )
    return ad.sigmoid(ad.conv2d(pooled, p.kernel, p.bias, stride=1, padding=p.padding))


def consensus_map(f1: Tensor, f2: Tensor, p: TmacParams) -> Tensor:
    """Same map computation, applied to the sum of both branches."""
    if f1.shape != f2.shape:
        raise ShapeError(f"branch shapes differ: {f1.shape} vs {f2.shape}")
    return idiosyncratic_map(f1 + f2, p)


def adaptive_couple(a1: Tensor, a2: Tensor, a_cons: Tensor, state: CouplingState) -> tuple[Tensor, Tensor]:
    """Multiply the consensus map into both branch maps once warmup is over."""
    if not state.coupled:
        return a1, a2
    if not (a1.shape == a2.shape == a_cons.shape):
        raise ShapeError(f"attention map shapes differ: {a1.shape}, {a2.shape}, {a_cons.shape}")
    return a1 * a_cons, a2 * a_cons


def disabled_consensus(like: Tensor) -> Tensor:
    """All-ones map standing in for the consensus map during warmup."""
    return Tensor(np.ones(like.shape, dtype=like.dtype))


def tmac_fuse(f1: Tensor, f2: Tensor, a1: Tensor, a2: Tensor) -> TokenSequence:
    """Gate each branch by its map (broadcast over channels) and concatenate."""
    fused = ad.concat([f1 * a1, f2 * a2], axis=-1)
    return TokenSequence.from_map(fused)


def tmac_forward(x: TokenSequence, p: TmacParams, state: CouplingState) -> TokenSequence:
    x1, x2 = channel_split(x)
    f1, f2 = x1.to_map(), x2.to_map()
    a1 = idiosyncratic_map(f1, p)
    a2 = idiosyncratic_map(f2, p)
    # the consensus pathway is not evaluated at all during warmup
    a_cons = consensus_map(f1, f2, p) if state.coupled else disabled_consensus(a1)
    g1, g2 = adaptive_couple(a1, a2, a_cons, state)
    return tmac_fuse(f1, f2, g1, g2)
