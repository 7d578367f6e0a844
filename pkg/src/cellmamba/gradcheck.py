"""Finite-difference suites for every layer type and the composed micro model.

Every check contracts the component output with fixed random weights, so the
scalar objective has a gradient with no cancelling structure, then compares
autodiff against central differences on sampled coordinates of the input and of
every parameter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, default_dtype, finite_difference_check
from .backbone import FPN, CellMambaBlock, ModelConfig
from .head import AdaptiveMambaHead
from .losses import LossConfig, SigmoidFocalLoss, detection_loss, focal_loss_dense, smooth_l1_rows
from .mixers import FfnParams, MsaParams, NcMambaParams, TokenSequence, ffn, msa, nc_mamba_mix
from .model import CellMamba
from .nn import Conv2d, LayerNorm, Linear, Module
from .tmac import CouplingState, TmacParams, tmac_forward

TOLERANCE = {np.dtype(np.float64): 1e-5, np.dtype(np.float32): 1e-2}
STEP = {np.dtype(np.float64): 1e-6, np.dtype(np.float32): 3e-3}


@dataclass
class GradResult:
    component: str
    max_rel_error: float
    coordinates: int
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


class _Suite:
    def __init__(self, dtype, seed: int, samples: int):
        self.dtype = np.dtype(dtype)
        self.rng = np.random.default_rng(seed)
        self.samples = samples
        self.h = STEP[self.dtype]

    def tensor(self, *shape, scale: float = 1.0) -> Tensor:
        return Tensor((scale * self.rng.standard_normal(shape)).astype(self.dtype), requires_grad=True)

    def weighted(self, fn: Callable[[], Tensor]) -> Callable[[Tensor], Tensor]:
        """Objective ``sum(fn() * W)`` with W drawn once on first call."""
        weights: list[Tensor] = []

        def objective(_unused: Tensor) -> Tensor:
            out = fn()
            if not weights:
                weights.append(Tensor(self.rng.standard_normal(out.shape).astype(self.dtype)))
            return (out * weights[0]).sum()

        return objective

    def check(self, name: str, objective: Callable[[Tensor], Tensor], inputs: list[Tensor], module: Module | None = None) -> GradResult:
        targets = list(inputs) + (module.parameters() if module is not None else [])
        worst, count = 0.0, 0
        for t in targets:
            n = min(self.samples, t.size)
            idx = self.rng.choice(t.size, n, replace=False)
            worst = max(worst, finite_difference_check(objective, t, self.h, idx))
            count += n
        return GradResult(name, worst, count, TOLERANCE[self.dtype])


def _layer_checks(s: _Suite) -> list[GradResult]:
    out = []
    x = s.tensor(2, 5, 6)
    lin = Linear(6, 4, s.rng)
    out.append(s.check("linear", s.weighted(lambda: lin(x)), [x], lin))

    img = s.tensor(1, 6, 6, 3)
    conv = Conv2d(3, 4, 3, s.rng, padding=1)
    out.append(s.check("conv2d", s.weighted(lambda: conv(img)), [img], conv))
    conv_s2 = Conv2d(3, 2, 4, s.rng, stride=2, padding=1)
    out.append(s.check("conv2d_stride2", s.weighted(lambda: conv_s2(img)), [img], conv_s2))

    ln = LayerNorm(6)
    ln.gamma.data = s.rng.uniform(0.5, 1.5, 6).astype(s.dtype)
    ln.beta.data = s.rng.standard_normal(6).astype(s.dtype)
    out.append(s.check("layer_norm", s.weighted(lambda: ln(x)), [x]))
    out.append(s.check("layer_norm_affine", s.weighted(lambda: ln(x)), [], ln))

    a = s.tensor(3, 7)
    for kind in ("sigmoid", "relu", "gelu", "softmax"):
        out.append(s.check(f"activation_{kind}", s.weighted(lambda k=kind: ad.activation(a, k, axis=-1)), [a]))
    out.append(s.check("activation_log_sigmoid", s.weighted(lambda: ad.log_sigmoid(a)), [a]))
    pos = Tensor(np.abs(a.data) + 0.5, requires_grad=True)
    out.append(s.check("exp_log_pow", s.weighted(lambda: pos.exp() + pos.log() + pos**1.5 / pos), [pos]))
    for mode in ("mean", "max"):
        out.append(s.check(f"reduce_{mode}", s.weighted(lambda m=mode: ad.reduce(img, axis=-1, mode=m)), [img]))
    up = s.tensor(1, 2, 3, 2)
    out.append(s.check("upsample_concat", s.weighted(lambda: ad.concat([ad.upsample_nearest2x(up), ad.upsample_nearest2x(up)], -1)), [up]))
    return out


def _mixer_checks(s: _Suite) -> list[GradResult]:
    out = []
    x = s.tensor(2, 12, 8)
    seq = lambda: TokenSequence(x, 3, 4)  # noqa: E731
    nc = NcMambaParams(8, s.rng, n_state=4)
    out.append(s.check("nc_mamba", s.weighted(lambda: nc_mamba_mix(seq(), nc).data), [x], nc))
    attn = MsaParams(8, s.rng, heads=2)
    out.append(s.check("msa", s.weighted(lambda: msa(seq(), attn).data), [x], attn))
    mlp = FfnParams(8, s.rng, expansion=2)
    out.append(s.check("ffn", s.weighted(lambda: ffn(seq(), mlp).data), [x], mlp))
    tm = TmacParams(s.rng, kernel_size=3)
    for phase, epoch in (("warmup", 0), ("coupled", 5)):
        state = CouplingState(3, epoch)
        out.append(s.check(f"tmac_{phase}", s.weighted(lambda st=state: tmac_forward(seq(), tm, st).data), [x], tm))
    cfg = ModelConfig.micro(n_state=4, ffn_expansion=2, attn_kernel=3, msa_heads=2)
    for mixer in ("nc", "msa"):
        blk = CellMambaBlock(8, mixer, s.rng, cfg)
        state = CouplingState(3, 5)
        out.append(s.check(f"cellmamba_block_{mixer}", s.weighted(lambda b=blk: b(seq(), state).data), [x], blk))
    return out


def _head_checks(s: _Suite) -> list[GradResult]:
    out = []
    cfg = ModelConfig.micro(fpn_channels=8, n_state=4, ffn_expansion=2, attn_kernel=3, num_classes=2)
    l2, l3, l4 = s.tensor(1, 8, 8, 4), s.tensor(1, 4, 4, 6), s.tensor(1, 2, 2, 8)
    fpn = FPN((4, 6, 8), 8, s.rng)
    out.append(s.check("fpn", s.weighted(lambda: ad.concat([p.reshape(-1) for p in fpn(l2, l3, l4)], 0)), [l2, l3, l4], fpn))
    head = AdaptiveMambaHead(cfg, s.rng)
    # larger head init than the detection prior so the check is not dominated by tiny weights
    head.cls_conv.weight.data = s.rng.normal(0, 0.3, head.cls_conv.weight.shape).astype(s.dtype)
    head.box_conv.weight.data = s.rng.normal(0, 0.3, head.box_conv.weight.shape).astype(s.dtype)
    levels = [s.tensor(1, n, n, 8) for n in (4, 2, 1, 1, 1)]
    state = CouplingState(3, 5)

    def head_out():
        from .backbone import PyramidSet

        logits, deltas = head(PyramidSet(levels), state).flat(2)
        return ad.concat([logits.reshape(-1), deltas.reshape(-1)], 0)

    out.append(s.check("head", s.weighted(head_out), levels, head))

    logits = s.tensor(2, 9, 3, scale=2.0)
    targets = (s.rng.random((2, 9, 3)) < 0.3).astype(s.dtype)
    valid = (s.rng.random((2, 9)) < 0.8).astype(s.dtype)
    cfg_loss = LossConfig()
    out.append(s.check("focal", lambda _: focal_loss_dense(logits, targets, valid, 4, cfg_loss), [logits]))
    pred = s.tensor(6, 4, scale=1.5)
    target = s.rng.standard_normal((6, 4)).astype(s.dtype)
    # keep residuals away from the |d| = 1 kink
    d = pred.data - target
    pred.data = np.where(np.abs(np.abs(d) - 1) < 0.05, pred.data + 0.2, pred.data).astype(s.dtype)
    out.append(s.check("smooth_l1", lambda _: smooth_l1_rows(pred, target, 6), [pred]))
    return out


def _model_check(s: _Suite, size: int = 64) -> GradResult:
    cfg = ModelConfig.micro(warmup_epochs=2)
    model = CellMamba(cfg, seed=int(s.rng.integers(1 << 31))).astype(s.dtype)
    images = s.tensor(1, size, size, 3)
    anchors = model.anchors((size, size))
    boxes = np.array([[8.0, 10.0, 30.0, 28.0], [36.0, 30.0, 60.0, 58.0]])
    targets = [(boxes, np.array([0, 2]))]
    state = CouplingState(2, 3)

    def objective(_unused):
        logits, deltas = model(images, state).flat(cfg.num_classes)
        return detection_loss(logits, deltas, anchors.xyxy, anchors.boxes, targets, LossConfig()).total

    # every parameter tensor is touched, with fewer coordinates each to bound runtime
    samples, s.samples = s.samples, 2
    res = s.check("micro_model", objective, [], model)
    s.samples = samples
    img_res = s.check("micro_model_input", objective, [images])
    return GradResult("micro_model", max(res.max_rel_error, img_res.max_rel_error), res.coordinates + img_res.coordinates, res.tolerance)


def _sanity_check(s: _Suite) -> GradResult:
    x = s.tensor(4, 5)
    return s.check("sum_sanity", lambda t: t.sum(), [x])


def run_gradcheck(dtype=np.float64, seed: int = 0, samples: int = 8, include_model: bool = True) -> list[GradResult]:
    """All component checks at ``dtype``; returns one result per component."""
    with default_dtype(dtype):
        s = _Suite(dtype, seed, samples)
        results = [_sanity_check(s)]
        results += _layer_checks(s)
        results += _mixer_checks(s)
        results += _head_checks(s)
        if include_model:
            results.append(_model_check(s))
    return results


__all__ = ["GradResult", "run_gradcheck", "TOLERANCE", "SigmoidFocalLoss"]
