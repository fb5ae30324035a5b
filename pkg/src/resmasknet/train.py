"""SGD training loop with plateau LR reduction and early stopping."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .checkpoint import load_state, read_entries, save_checkpoint
from .data import Dataset, batch_iter
from .errors import ContractError, NonFiniteError, TrainingDivergedError
from .model import ResMaskingNet, build_network
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    max_epochs: int = 50
    batch_size: int = 48
    lr0: float = 1e-4
    momentum: float = 0.9
    weight_decay: float = 1e-3
    plateau_patience: int = 2
    plateau_factor: float = 0.1
    early_stop_patience: int = 8
    seed: int = 0
    augment: bool = True

    def __post_init__(self):
        for name in ("max_epochs", "batch_size", "plateau_patience", "early_stop_patience"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.lr0 < 0 or self.momentum < 0 or self.weight_decay < 0:
            raise ValueError("lr0, momentum and weight_decay must be non-negative")
        if not 0 < self.plateau_factor < 1:
            raise ValueError("plateau_factor must lie in (0, 1)")


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient.

    ``g' = g + wd * w``, ``v = momentum * v + g'``, ``w -= lr * v``.
    Decay applies to every parameter, BN affine terms and biases included.
    """

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = list(params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        missing = [i for i, p in enumerate(self.params) if p.grad is None]
        if missing:
            raise ContractError(f"{len(missing)} parameters have no gradient (first index {missing[0]})")
        for p, v in zip(self.params, self.velocity):
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= (self.lr * v).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def sgd_step(params, grads, velocity, lr, momentum, weight_decay):
    """Functional form of one update on plain arrays; returns (params, velocity)."""
    if any(g is None for g in grads):
        raise ContractError("a trainable parameter has no gradient")
    new_p, new_v = [], []
    for w, g, v in zip(params, grads, velocity):
        g = g + weight_decay * w
        v = momentum * v + g
        new_p.append(w - lr * v)
        new_v.append(v)
    return new_p, new_v


class PlateauScheduler:
    """Multiply the LR by ``factor`` after ``patience`` epochs without a strict new best."""

    def __init__(self, lr: float, patience: int = 2, factor: float = 0.1):
        self.lr, self.patience, self.factor = lr, patience, factor
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, val_acc: float) -> float:
        if val_acc > self.best:
            self.best = val_acc
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.lr *= self.factor
                self.bad_epochs = 0
        return self.lr


def plateau_schedule(accs, lr0: float = 1e-4, patience: int = 2, factor: float = 0.1) -> list[float]:
    """LR in force after each epoch of ``accs``."""
    sched = PlateauScheduler(lr0, patience, factor)
    return [sched.step(a) for a in accs]


class EarlyStopping:
    def __init__(self, patience: int = 8):
        self.patience = patience
        self.best = -math.inf
        self.bad_epochs = 0

    def step(self, val_acc: float) -> bool:
        if val_acc > self.best:
            self.best, self.bad_epochs = val_acc, 0
        else:
            self.bad_epochs += 1
        return self.bad_epochs >= self.patience


def early_stop_check(history, patience: int = 8) -> bool:
    """True once ``patience`` consecutive epochs fail to beat the running best."""
    stopper = EarlyStopping(patience)
    return any([stopper.step(a) for a in history])


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float
    lr: float


@dataclass
class TrainReport:
    config: dict
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_acc: float = -1.0
    checkpoint: str = ""
    train_acc: float | None = None
    stopped_early: bool = False

    def to_dict(self) -> dict:
        d = asdict(self)
        d["epochs"] = [asdict(e) if not isinstance(e, dict) else e for e in self.epochs]
        return d


def predict(net: ResMaskingNet, ds: Dataset, split: str, batch_size: int = 48, size: int | None = None):
    """Eval-mode argmax predictions and labels for one split."""
    size = size or net.spec.input_size
    net.eval()
    preds, labels = [], []
    with no_grad():
        for x, y in batch_iter(ds, split, batch_size, size=size):
            preds.append(net(x).data.argmax(axis=1))
            labels.append(y)
    if not preds:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    return np.concatenate(preds), np.concatenate(labels)


def evaluate_accuracy(net: ResMaskingNet, ds: Dataset, split: str, batch_size: int = 48) -> float:
    p, y = predict(net, ds, split, batch_size)
    return float((p == y).mean()) if len(y) else 0.0


def train_step(net: ResMaskingNet, opt: SGD, x: Tensor, y: np.ndarray) -> tuple[float, int]:
    net.train()
    opt.zero_grad()
    logits = net(x)
    loss = F.cross_entropy(logits, y)
    backward(loss)
    opt.step()
    return loss.item(), int((logits.data.argmax(axis=1) == y).sum())


def fit(net: ResMaskingNet, ds: Dataset, cfg: TrainConfig, out_dir, val_split: str = "val") -> TrainReport:
    """Train with best-on-validation checkpointing.

    Writes ``train_log.csv`` (epoch,train_loss,val_acc,lr), ``best.ckpt`` and
    ``summary.json`` into ``out_dir``.
    """
    for split in ("train", val_split):
        if len(ds.indices.get(split, ())) == 0:
            raise ContractError(f"fit needs a non-empty {split!r} split")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "best.ckpt"
    size = net.spec.input_size
    opt = SGD(net.parameters(), cfg.lr0, cfg.momentum, cfg.weight_decay)
    sched = PlateauScheduler(cfg.lr0, cfg.plateau_patience, cfg.plateau_factor)
    stopper = EarlyStopping(cfg.early_stop_patience)
    report = TrainReport(config=asdict(cfg), checkpoint=str(ckpt))
    log_path = out / "train_log.csv"
    with open(log_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "val_acc", "lr"])
        for epoch in range(1, cfg.max_epochs + 1):
            lr = opt.lr
            total, correct, seen = 0.0, 0, 0
            batches = batch_iter(ds, "train", cfg.batch_size, cfg.seed + epoch, cfg.augment, size)
            for b, (x, y) in enumerate(batches):
                try:
                    loss, ok = train_step(net, opt, x, y)
                except NonFiniteError as exc:
                    raise TrainingDivergedError(f"non-finite values at epoch {epoch}, batch {b}: {exc}") from exc
                if not math.isfinite(loss):
                    raise TrainingDivergedError(f"loss is {loss} at epoch {epoch}, batch {b}")
                total += loss * len(y)
                correct += ok
                seen += len(y)
            val_acc = evaluate_accuracy(net, ds, val_split, cfg.batch_size)
            rec = EpochRecord(epoch, total / max(seen, 1), correct / max(seen, 1), val_acc, lr)
            report.epochs.append(rec)
            writer.writerow([epoch, f"{rec.train_loss:.6f}", f"{val_acc:.6f}", f"{lr:.6g}"])
            fh.flush()
            log.info("epoch %d loss %.4f train_acc %.4f val_acc %.4f lr %.3g", epoch, rec.train_loss, rec.train_acc, val_acc, lr)
            if val_acc > report.best_val_acc:
                report.best_val_acc, report.best_epoch = val_acc, epoch
                save_checkpoint(net, ckpt)
            opt.lr = sched.step(val_acc)
            if stopper.step(val_acc):
                report.stopped_early = True
                break
    best = build_network(net.spec, dtype=net.parameters()[0].dtype.type)
    load_state(best, read_entries(ckpt))
    report.train_acc = evaluate_accuracy(best, ds, "train", cfg.batch_size)
    (out / "summary.json").write_text(json.dumps(report.to_dict(), indent=2))
    return report
