"""SGD training loop with the poly learning-rate schedule."""
from __future__ import annotations

import csv
import logging
import os
from contextlib import nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from threadpoolctl import threadpool_limits

from sdconv.harness.config import ModelConfig, TrainConfig
from sdconv.harness.data import SynthSample
from sdconv.harness.metrics import confusion_matrix, mean_iou_from_confusion
from sdconv.harness.model import SegmentationModel, softmax_cross_entropy

log = logging.getLogger(__name__)

LOG_FIELDS = ("iter", "lr", "loss", "miou")


class TrainingDiverged(RuntimeError):
    pass


def poly_lr(iteration: int, cfg: TrainConfig) -> float:
    """``(1 - iter / max_iter) ** power * initial_lr``."""
    if not 0 <= iteration <= cfg.max_iter:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.max_iter}]")
    return (1.0 - iteration / cfg.max_iter) ** cfg.power * cfg.initial_lr


class SGD:
    """Momentum SGD with L2 weight decay: ``v = m*v + g + wd*p``; ``p -= lr*v``.

    Biases are not decayed.
    """

    def __init__(self, params: Dict[str, np.ndarray], momentum: float = 0.9,
                 weight_decay: float = 0.0):
        self.params = params
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: Dict[str, np.ndarray], lr: float) -> None:
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay and not name.endswith("bias"):
                g = g + self.weight_decay * p
            v = self.velocity[name]
            v *= self.momentum
            v += g
            p -= lr * v


@dataclass
class TrainResult:
    model: SegmentationModel
    log: List[dict]

    @property
    def final_miou(self) -> float:
        return self.log[-1]["miou"]


def evaluate(model: SegmentationModel, data: Sequence[SynthSample], chunk: int = 8) -> float:
    """Dataset-level mean IoU from one accumulated confusion matrix."""
    k = model.config.classes
    cm = np.zeros((k, k), dtype=np.int64)
    for start in range(0, len(data), chunk):
        part = data[start : start + chunk]
        if len({s.labels.shape for s in part}) == 1:
            pred = model.predict(np.concatenate([s.image for s in part]))
        else:
            pred = [model.predict(s.image)[0] for s in part]
        for p, s in zip(pred, part):
            cm += confusion_matrix(p, s.labels, k)
    return mean_iou_from_confusion(cm)


def _batch(data: Sequence[SynthSample], idx: np.ndarray, crop: int, rng: np.random.Generator):
    images, labels = [], []
    for i in idx:
        s = data[i]
        h, w = s.labels.shape
        ch, cw = min(crop, h), min(crop, w)
        top, left = rng.integers(0, h - ch + 1), rng.integers(0, w - cw + 1)
        images.append(s.image[0, :, top : top + ch, left : left + cw])
        labels.append(s.labels[top : top + ch, left : left + cw])
    return np.stack(images), np.stack(labels)


def _thread_cap():
    threads = os.environ.get("SD_THREADS")
    return threadpool_limits(int(threads)) if threads else nullcontext()


def train(model_cfg: Union[ModelConfig, SegmentationModel], train_data: Sequence[SynthSample],
          cfg: TrainConfig, val_data: Optional[Sequence[SynthSample]] = None) -> TrainResult:
    """Train with per-pixel softmax cross-entropy; log one row per epoch.

    An epoch is ``ceil(len(train_data) / batch)`` iterations over a fresh
    permutation. ``miou`` is measured on ``val_data`` (NaN if absent).
    """
    cfg.validate()
    if not train_data:
        raise ValueError("training set is empty")
    model = (model_cfg if isinstance(model_cfg, SegmentationModel)
             else SegmentationModel.build(model_cfg, cfg.seed))
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.params(), cfg.momentum, cfg.weight_decay)
    per_epoch = -(-len(train_data) // cfg.batch)
    rows: List[dict] = []
    losses: List[float] = []
    order = np.empty(0, dtype=np.int64)

    with _thread_cap():
        for it in range(cfg.max_iter):
            if len(order) < cfg.batch:
                order = np.concatenate([order, rng.permutation(len(train_data))])
            idx, order = order[: cfg.batch], order[cfg.batch :]
            x, y = _batch(train_data, idx, cfg.crop, rng)
            lr = poly_lr(it, cfg)
            loss, grad = softmax_cross_entropy(model.forward(x), y)
            if not np.isfinite(loss):
                raise TrainingDiverged(f"loss became {loss} at iteration {it} (lr={lr:.3g})")
            model.backward(grad)
            opt.step(model.grads(), lr)
            losses.append(loss)

            done = it + 1
            if done % per_epoch == 0 or done == cfg.max_iter:
                miou = evaluate(model, val_data) if val_data else float("nan")
                rows.append(dict(iter=done, lr=lr, loss=float(np.mean(losses)), miou=miou))
                log.info("iter %d lr %.4g loss %.4f miou %.4f", done, lr, rows[-1]["loss"], miou)
                losses = []
    return TrainResult(model, rows)


def write_log(rows: Sequence[dict], path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_FIELDS})
    return path
