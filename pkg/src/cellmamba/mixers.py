"""Token mixers: non-causal state-space mixing (NC-Mamba), multi-head
self-attention, and the position-wise feed-forward network."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigurationError, ShapeError, Tensor
from .nn import Linear, Module, Parameter

NC_EPS = 1e-6


@dataclass(frozen=True)
class TokenSequence:
    """``(B, L, C)`` tokens that remember the ``(H, W)`` grid they came from."""

    data: Tensor
    height: int
    width: int

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"token data must be (B, L, C), got {self.data.shape}")
        if self.data.shape[1] != self.height * self.width:
            raise ShapeError(f"L={self.data.shape[1]} does not equal H*W={self.height}*{self.width}")

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def length(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def hw(self) -> tuple[int, int]:
        return self.height, self.width

    def with_data(self, data: Tensor) -> "TokenSequence":
        return TokenSequence(data, self.height, self.width)

    def to_map(self) -> Tensor:
        """Reshape to a ``(B, H, W, C)`` feature map."""
        return self.data.reshape(self.batch, self.height, self.width, self.channels)

    @classmethod
    def from_map(cls, fmap: Tensor) -> "TokenSequence":
        b, h, w, c = fmap.shape
        return cls(fmap.reshape(b, h * w, c), h, w)


class NcMambaParams(Module):
    """Projections of the non-causal state-space mixer.

    ``w_in`` produces values, ``w_b``/``w_c`` the per-token write and read
    vectors of size ``n_state``, ``w_a``/``b_a`` the scalar write gate.
    """

    def __init__(self, dim: int, rng: np.random.Generator, n_state: int = 16):
        if n_state < 1:
            raise ConfigurationError("n_state must be >= 1")
        self.n_state = n_state
        self.w_in = Parameter(rng.uniform(-1, 1, (dim, dim)) / np.sqrt(dim))
        self.w_b = Parameter(rng.uniform(-1, 1, (dim, n_state)) / np.sqrt(dim))
        self.w_c = Parameter(rng.uniform(-1, 1, (dim, n_state)) / np.sqrt(dim))
        self.w_a = Parameter(rng.uniform(-1, 1, (dim, 1)) / np.sqrt(dim))
        self.b_a = Parameter(np.zeros(1))
        self.w_out = Parameter(rng.uniform(-1, 1, (dim, dim)) / np.sqrt(dim))

    def forward(self, x: "TokenSequence") -> "TokenSequence":
        return nc_mamba_mix(x, self)


def nc_mamba_mix(x: TokenSequence, p: NcMambaParams, eps: float = NC_EPS) -> TokenSequence:
    """Linear-time non-causal mixing through one global state per sequence.

    Every token writes ``a_i * outer(B_i, v_i)`` into a shared ``(n_state, C)``
    state; every token then reads it back with ``C_t`` and the result is divided
    by the total gate mass. Two passes, ``O(L * n_state * C)``.
    """
    if x.length == 0:
        raise ShapeError("nc_mamba_mix needs at least one token")
    xd = x.data
    v = ad.linear(xd, p.w_in)
    write = ad.linear(xd, p.w_b)
    read = ad.linear(xd, p.w_c)
    gate = ad.sigmoid(ad.linear(xd, p.w_a, p.b_a))  # (B, L, 1)
    state = ad.matmul((write * gate).transpose(0, 2, 1), v)  # (B, N, C)
    mass = gate.sum(axis=1, keepdims=True) + eps  # (B, 1, 1)
    y = ad.matmul(read, state) / mass
    return x.with_data(ad.linear(y, p.w_out))


def nc_mamba_naive_oracle(x: TokenSequence, p: NcMambaParams, eps: float = NC_EPS) -> TokenSequence:
    """Quadratic reference for `nc_mamba_mix`: explicit loop over token pairs.

    For test use on short sequences; never builds the shared state.
    """
    xd = x.data.data.astype(np.float64)
    w_in, w_b, w_c = (t.data.astype(np.float64) for t in (p.w_in, p.w_b, p.w_c))
    w_a, b_a, w_out = (t.data.astype(np.float64) for t in (p.w_a, p.b_a, p.w_out))
    batch, length, _ = xd.shape
    out = np.zeros((batch, length, w_out.shape[1]))
    for b in range(batch):
        tokens = xd[b]
        v = tokens @ w_in
        bvec = tokens @ w_b
        cvec = tokens @ w_c
        a = 1.0 / (1.0 + np.exp(-(tokens @ w_a + b_a)[:, 0]))
        total = a.sum() + eps
        for t in range(length):
            acc = np.zeros(v.shape[1])
            for i in range(length):
                acc += a[i] * float(cvec[t] @ bvec[i]) * v[i]
            out[b, t] = (acc / total) @ w_out
    return x.with_data(Tensor(out.astype(x.data.dtype)))


class MsaParams(Module):
    def __init__(self, dim: int, rng: np.random.Generator, heads: int = 4):
        if dim % heads:
            raise ConfigurationError(f"heads={heads} does not divide dim={dim}")
        self.heads = heads
        self.w_q = Linear(dim, dim, rng, bias=False)
        self.w_k = Linear(dim, dim, rng, bias=False)
        self.w_v = Linear(dim, dim, rng, bias=False)
        self.w_o = Linear(dim, dim, rng, bias=False)

    def forward(self, x: TokenSequence) -> TokenSequence:
        return msa(x, self)


def msa(x: TokenSequence, p: MsaParams) -> TokenSequence:
    """Scaled dot-product self-attention over all tokens, ``p.heads`` heads."""
    b, length, c = x.data.shape
    h = p.heads
    if c % h:
        raise ConfigurationError(f"heads={h} does not divide channels={c}")
    d = c // h

    def split_heads(t: Tensor) -> Tensor:
        return t.reshape(b, length, h, d).transpose(0, 2, 1, 3)

    q = split_heads(p.w_q(x.data))
    k = split_heads(p.w_k(x.data))
    v = split_heads(p.w_v(x.data))
    scores = ad.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
    attn = ad.softmax(scores, axis=-1)
    mixed = ad.matmul(attn, v).transpose(0, 2, 1, 3).reshape(b, length, c)
    return x.with_data(p.w_o(mixed))


class FfnParams(Module):
    def __init__(self, dim: int, rng: np.random.Generator, expansion: int = 4):
        if expansion < 1:
            raise ConfigurationError("expansion must be >= 1")
        self.fc1 = Linear(dim, dim * expansion, rng)
        self.fc2 = Linear(dim * expansion, dim, rng)

    def forward(self, x: TokenSequence) -> TokenSequence:
        return ffn(x, self)


def ffn(x: TokenSequence, p: FfnParams) -> TokenSequence:
    """linear -> GELU -> linear. No residual here; the block adds it."""
    return x.with_data(p.fc2(ad.gelu(p.fc1(x.data))))
