"""Cross-entropy, the warm-up + polynomial LR schedule, AdamW and the training loop."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .config import TrainConfig
from .decoder import predict_labels
from .errors import ConfigError, DataError, NumericError, ShapeError
from .metrics import IGNORE_INDEX, ConfusionMatrix, miou
from .model import MMSFormer, save_checkpoint
from .tensor import Tensor

log = logging.getLogger(__name__)


def cross_entropy(logits: Tensor, labels: np.ndarray, ignore_index: int = IGNORE_INDEX) -> Tensor:
    """Mean of -log softmax(logits)[label] over non-ignored pixels (0 if all are ignored)."""
    labels = np.asarray(labels)
    K = logits.shape[0]
    if logits.ndim != 3 or logits.shape[1:] != labels.shape:
        raise ShapeError(f"logits {logits.shape} and labels {labels.shape} disagree")
    valid = labels != ignore_index
    bad = valid & ((labels < 0) | (labels >= K))
    if bad.any():
        pos = tuple(int(i) for i in np.argwhere(bad)[0])
        raise DataError(f"label {int(labels[pos])} at pixel {pos} is outside [0, {K}) and not ignore_index")
    count = int(valid.sum())
    onehot = (labels[None] == np.arange(K)[:, None, None]) & valid[None]
    picked = T.log_softmax(logits, axis=0) * Tensor(onehot, dtype=logits.dtype)
    return picked.sum() * (-1.0 / count if count else 0.0)


def lr_at(epoch: int, iter_frac: float, cfg: TrainConfig) -> float:
    """Constant ``warmup_factor * base_lr`` during warm-up, then poly decay over the remaining epochs."""
    if epoch < cfg.warmup_epochs:
        return cfg.base_lr * cfg.warmup_factor
    span = cfg.total_epochs - cfg.warmup_epochs
    t = (epoch - cfg.warmup_epochs + iter_frac) / span
    return cfg.base_lr * (1.0 - min(max(t, 0.0), 1.0)) ** cfg.poly_power


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def like(cls, params: Sequence[np.ndarray]) -> "OptimizerState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adamw_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray], state: OptimizerState, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01) -> None:
    """One decoupled-weight-decay Adam update, in place on ``params`` and ``state``."""
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay:
            p -= lr * weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class AdamW:
    def __init__(self, params, cfg: TrainConfig):
        self.params = list(params)
        self.cfg = cfg
        self.state = OptimizerState.like([p.data for p in self.params])

    def step(self, lr: float) -> None:
        adamw_step(
            [p.data for p in self.params], [p.grad for p in self.params], self.state, lr,
            tuple(self.cfg.adam_betas), self.cfg.adam_eps, self.cfg.weight_decay,
        )


def evaluate(model: MMSFormer, samples, num_classes: int) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    with T.no_grad():
        for images, label in samples:
            cm.accumulate(predict_labels(model(images)), label)
    return cm


@dataclass
class TrainResult:
    records: list[dict] = field(default_factory=list)
    best_miou: float = -1.0
    final_miou: float = float("nan")
    final_cm: ConfusionMatrix | None = None
    steps: int = 0


def train(model: MMSFormer, dataset, cfg: TrainConfig, modalities: Sequence[str] | None = None,
          out_dir=None, eval_every: int = 1, val_split: str = "val") -> TrainResult:
    """Train in place and return the log records.

    Each batch runs one forward/backward per sample with the loss scaled by
    1/batch, so gradients are batch means. The validation split falls back to
    the training split when the dataset has none. With ``out_dir`` the log is
    written to ``train_log.jsonl`` with ``best.ckpt`` and ``final.ckpt``.
    """
    mods = dataset.resolve_modalities(modalities)
    if len(mods) != model.config.num_modalities:
        raise ConfigError(f"dataset provides {len(mods)} modalities, model expects {model.config.num_modalities}")
    if dataset.num_classes != model.config.decoder.num_classes:
        raise ConfigError(f"dataset has {dataset.num_classes} classes, model predicts {model.config.decoder.num_classes}")
    train_set = dataset.load_split("train", mods)
    if not train_set:
        raise ConfigError("dataset has an empty training split")
    val_set = dataset.load_split(val_split, mods) or train_set

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    params = model.parameters()
    opt = AdamW(params, cfg)
    n, bs = len(train_set), cfg.batch_size
    iters = math.ceil(n / bs)
    result = TrainResult()

    for epoch in range(cfg.total_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for it in range(iters):
            lr = lr_at(epoch, it / iters, cfg)
            batch = order[it * bs:(it + 1) * bs]
            model.zero_grad()
            batch_loss = 0.0
            for idx in batch:
                images, label = train_set[idx]
                loss = cross_entropy(model(images), label) * (1.0 / len(batch))
                loss.backward()
                batch_loss += loss.item()
            if not math.isfinite(batch_loss):
                raise NumericError(f"non-finite loss at epoch {epoch}, iteration {it}")
            opt.step(lr)
            result.steps += 1
            epoch_loss += batch_loss
            result.records.append({"epoch": epoch, "iter": it, "lr": lr, "loss": batch_loss, "val_mIoU": None})

        if (epoch + 1) % eval_every == 0 or epoch == cfg.total_epochs - 1:
            cm = evaluate(model, val_set, dataset.num_classes)
            score = miou(cm)
            result.records[-1]["val_mIoU"] = score
            result.final_miou, result.final_cm = score, cm
            log.info("epoch %d loss %.4f val mIoU %.4f", epoch, epoch_loss / iters, score)
            if score > result.best_miou:
                result.best_miou = score
                if out is not None:
                    save_checkpoint(out / "best.ckpt", model, result.steps)

    if out is not None:
        save_checkpoint(out / "final.ckpt", model, result.steps)
        write_log(out / "train_log.jsonl", result.records)
    return result


def write_log(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
