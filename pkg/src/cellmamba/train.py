"""SGD training with linear warmup and multistep decay."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .backbone import ModelConfig
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .data import DatasetManifest
from .inference import to_input
from .losses import LossConfig, NumericError, detection_loss
from .model import CellMamba
from .nn import Parameter
from .tmac import CouplingState

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    momentum: float = 0.9
    epochs: int = 50
    warmup_epochs: int = 20  # TMAC coupling warmup
    warmup_steps: int = 100  # linear lr ramp
    milestones: tuple[int, ...] | None = None  # default: 70% and 90% of epochs
    gamma: float = 0.1
    batch_size: int = 4
    seed: int = 0
    flip: bool = True
    clip_grad_norm: float | None = None
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if not 0 < self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must lie in (0, epochs)")
        if self.batch_size < 1 or self.warmup_steps < 1:
            raise ValueError("batch_size and warmup_steps must be >= 1")
        if self.milestones is None:
            self.milestones = (int(0.7 * self.epochs), int(0.9 * self.epochs))
        self.milestones = tuple(sorted(int(m) for m in self.milestones))

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["milestones"] = list(self.milestones)
        return d


def learning_rate(cfg: TrainConfig, step: int, epoch: int) -> float:
    """Closed-form schedule: linear ramp over the first steps, then step decay at milestones."""
    ramp = min(1.0, (step + 1) / cfg.warmup_steps)
    decays = sum(1 for m in cfg.milestones if epoch >= m)
    return cfg.lr * ramp * cfg.gamma**decays


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params: Sequence[Parameter], momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def step(self, lr: float) -> None:
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            d = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            buf = self.buffers[i]
            if buf is None:
                buf = self.buffers[i] = d.astype(p.data.dtype, copy=True)
            else:
                buf *= self.momentum
                buf += d
            p.data -= lr * buf


def grad_norm(params: Sequence[Parameter]) -> float:
    return math.sqrt(sum(float(np.vdot(p.grad, p.grad)) for p in params if p.grad is not None))


def clip_gradients(params: Sequence[Parameter], max_norm: float) -> float:
    norm = grad_norm(params)
    if not math.isfinite(norm):
        raise NumericError(f"gradient norm is {norm}")
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return norm


def flip_sample(image: np.ndarray, boxes: np.ndarray, horizontal: bool, vertical: bool) -> tuple[np.ndarray, np.ndarray]:
    h, w = image.shape[:2]
    boxes = boxes.copy()
    if horizontal:
        image = image[:, ::-1]
        boxes[:, [0, 2]] = w - boxes[:, [2, 0]]
    if vertical:
        image = image[::-1]
        boxes[:, [1, 3]] = h - boxes[:, [3, 1]]
    return np.ascontiguousarray(image), boxes


def targets_from(manifest: DatasetManifest) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per image (in manifest order): (M, 4) xyxy boxes and (M,) class indices."""
    index = manifest.class_index()
    by_image = manifest.annotations_by_image()
    out = []
    for rec in manifest.images:
        anns = by_image[rec.id]
        boxes = np.array([a.xyxy for a in anns], dtype=np.float64).reshape(-1, 4)
        classes = np.array([index[a.category_id] for a in anns], dtype=np.int64)
        out.append((boxes, classes))
    return out


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    cls_loss: float
    box_loss: float
    lr: float
    coupled: bool
    seconds: float


@dataclass
class TrainResult:
    model: CellMamba
    history: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)


LOG_FIELDS = [f.name for f in fields(EpochRecord)]


class Trainer:
    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        loss_cfg: LossConfig = LossConfig(),
        out_dir: str | Path | None = None,
    ):
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.loss_cfg = loss_cfg
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.model = CellMamba(model_cfg, seed=train_cfg.seed)
        self.params = self.model.parameters()
        self.optim = SGD(self.params, train_cfg.momentum, train_cfg.weight_decay)
        self.rng = np.random.default_rng(train_cfg.seed)
        self.step = 0
        self.epoch = 0

    def coupling(self, epoch: int | None = None) -> CouplingState:
        return CouplingState(self.cfg.warmup_epochs, self.epoch if epoch is None else epoch)

    def train_step(self, images: list[np.ndarray], targets: list[tuple[np.ndarray, np.ndarray]], state: CouplingState):
        lr = learning_rate(self.cfg, self.step, self.epoch)
        x = to_input(images)
        anchors = self.model.anchors(x.shape[1:3])
        self.model.zero_grad()
        logits, deltas = self.model(x, state).flat(self.model_cfg.num_classes)
        try:
            out = detection_loss(logits, deltas, anchors.xyxy, anchors.boxes, targets, self.loss_cfg)
        except NumericError as exc:
            raise NumericError(f"step {self.step}: {exc}") from exc
        ad.backward(out.total)
        if self.cfg.clip_grad_norm is not None:
            try:
                clip_gradients(self.params, self.cfg.clip_grad_norm)
            except NumericError as exc:
                raise NumericError(f"step {self.step}: {exc}") from exc
        self.optim.step(lr)
        self.step += 1
        return out, lr

    def run_epoch(self, images: Sequence[np.ndarray], targets: list[tuple[np.ndarray, np.ndarray]], result: TrainResult) -> EpochRecord:
        state = self.coupling()
        t0 = time.perf_counter()
        order = self.rng.permutation(len(images))
        totals = np.zeros(3)
        lr = 0.0
        for start in range(0, len(order), self.cfg.batch_size):
            batch_imgs, batch_tgts = [], []
            for i in order[start : start + self.cfg.batch_size]:
                img, (boxes, classes) = images[i], targets[i]
                if self.cfg.flip:
                    hf, vf = self.rng.random(2) < 0.5
                    img, boxes = flip_sample(img, boxes, bool(hf), bool(vf))
                batch_imgs.append(img)
                batch_tgts.append((boxes, classes))
            out, lr = self.train_step(batch_imgs, batch_tgts, state)
            n = len(batch_imgs)
            totals += n * np.array([float(out.total.data), out.cls, out.box])
            result.step_losses.append(float(out.total.data))
            result.lrs.append(lr)
        totals /= len(order)
        return EpochRecord(self.epoch, totals[0], totals[1], totals[2], lr, state.coupled, time.perf_counter() - t0)

    def checkpoint(self) -> Checkpoint:
        tensors = dict(self.model.state_dict())
        for (name, _), buf in zip(self.model.named_parameters(), self.optim.buffers):
            if buf is not None:
                tensors[f"optim.momentum.{name}"] = buf
        return Checkpoint(
            model_config=self.model_cfg,
            tensors=tensors,
            epoch=self.epoch,
            warmup_epochs=self.cfg.warmup_epochs,
            # mode of the last trained epoch, which evaluation must reproduce
            coupled=self.coupling(max(self.epoch - 1, 0)).coupled,
            rng_state=self.rng.bit_generator.state,
            extra={"step": self.step, "train": self.cfg.to_dict()},
        )

    def fit(
        self,
        images: Sequence[np.ndarray],
        targets: list[tuple[np.ndarray, np.ndarray]],
        on_epoch: Callable[[EpochRecord], None] | None = None,
    ) -> TrainResult:
        if len(images) == 0:
            raise ValueError("no training images")
        result = TrainResult(self.model)
        writer = None
        log_file = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_file = open(self.out_dir / "train_log.csv", "w", newline="")
            writer = csv.DictWriter(log_file, fieldnames=LOG_FIELDS)
            writer.writeheader()
        try:
            while self.epoch < self.cfg.epochs:
                rec = self.run_epoch(images, targets, result)
                result.history.append(rec)
                logger.info(
                    "epoch %d loss %.4f (cls %.4f box %.4f) lr %.2e coupled=%s %.1fs",
                    rec.epoch, rec.loss, rec.cls_loss, rec.box_loss, rec.lr, rec.coupled, rec.seconds,
                )
                if writer is not None:
                    writer.writerow(asdict(rec))
                    log_file.flush()
                self.epoch += 1
                if self.out_dir is not None and (self.epoch % self.cfg.checkpoint_every == 0 or self.epoch == self.cfg.epochs):
                    save_checkpoint(self.out_dir / "checkpoint", self.checkpoint())
                if on_epoch is not None:
                    on_epoch(rec)
        finally:
            if log_file is not None:
                log_file.close()
        return result


def inference_state(ckpt: Checkpoint) -> CouplingState:
    """Coupling mode recorded in a checkpoint, as a state the model can run with."""
    return CouplingState(ckpt.warmup_epochs, ckpt.warmup_epochs if ckpt.coupled else 0)


def model_from_checkpoint(path: str | Path) -> tuple[CellMamba, Checkpoint]:
    ckpt = load_checkpoint(path)
    model = CellMamba(ckpt.model_config)
    weights = {k: v for k, v in ckpt.tensors.items() if not k.startswith("optim.")}
    model.load_state_dict(weights)
    return model, ckpt
