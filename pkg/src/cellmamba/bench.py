"""Wall-time scaling of the two token mixers against sequence length."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor, no_grad
from .mixers import MsaParams, NcMambaParams, TokenSequence, msa, nc_mamba_mix

OPS = ("ncmamba", "msa")


@dataclass
class BenchResult:
    op: str
    lengths: list[int]
    seconds: list[float]
    exponent: float | None

    def rows(self) -> list[dict]:
        return [{"op": self.op, "length": n, "seconds": s} for n, s in zip(self.lengths, self.seconds)]


def fit_exponent(lengths: Sequence[int], seconds: Sequence[float]) -> float | None:
    """Slope of log(time) against log(L); None for fewer than two lengths."""
    if len(lengths) < 2:
        return None
    slope, _ = np.polyfit(np.log(lengths), np.log(seconds), 1)
    return float(slope)


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(
    op: str,
    lengths: Sequence[int],
    dim: int = 32,
    n_state: int = 16,
    heads: int = 1,
    repeats: int = 3,
    seed: int = 0,
) -> BenchResult:
    """Best-of-``repeats`` forward time per length, one image, tokens laid out as a 1 x L grid."""
    if op not in OPS:
        raise ValueError(f"op must be one of {OPS}")
    lengths = [int(n) for n in lengths]
    if lengths != sorted(lengths) or len(set(lengths)) != len(lengths):
        raise ValueError("lengths must be strictly ascending")
    rng = np.random.default_rng(seed)
    params = NcMambaParams(dim, rng, n_state=n_state) if op == "ncmamba" else MsaParams(dim, rng, heads=heads)
    mixer = nc_mamba_mix if op == "ncmamba" else msa
    seconds = []
    with no_grad():
        for n in lengths:
            x = TokenSequence(Tensor(rng.standard_normal((1, n, dim)).astype(np.float32)), 1, n)
            mixer(x, params)  # warm caches
            seconds.append(_time(lambda: mixer(x, params), repeats))
    return BenchResult(op, lengths, seconds, fit_exponent(lengths, seconds))
