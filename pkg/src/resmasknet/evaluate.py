"""Accuracy, confusion matrices, ensembles and Grad-CAM."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .data import CLASS_NAMES, NUM_CLASSES, resize_bilinear, write_ppm
from .errors import ContractError, LabelError
from .model import ResMaskingNet, network_forward
from .tensor import Tensor, backward, no_grad, select


def accuracy(preds, labels) -> float:
    """Fraction of exact matches (the multi-class form of (TP+TN)/total)."""
    preds, labels = np.asarray(preds), np.asarray(labels)
    if preds.shape != labels.shape:
        raise ContractError(f"{preds.size} predictions but {labels.size} labels")
    if labels.size == 0:
        raise ContractError("accuracy of an empty set is undefined")
    return float((preds == labels).sum() / labels.size)


@dataclass
class ConfusionMatrix:
    """Rows are true labels, columns predictions."""

    counts: np.ndarray
    class_names: tuple = CLASS_NAMES

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def normalized(self) -> np.ndarray:
        rows = self.counts.sum(axis=1, keepdims=True)
        return np.divide(self.counts, rows, out=np.zeros(self.counts.shape), where=rows > 0)

    def accuracy(self) -> float:
        return float(np.trace(self.counts) / self.total)

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["true\\pred", *self.class_names])
            for name, row in zip(self.class_names, self.counts):
                w.writerow([name, *map(int, row)])
        return path

    def to_text(self, normalized: bool = False) -> str:
        vals = self.normalized() if normalized else self.counts
        cell = (lambda v: f"{v:.2f}") if normalized else (lambda v: str(int(v)))
        width = max(8, *(len(n) for n in self.class_names), *(len(cell(v)) for v in vals.ravel()))
        lines = [" " * width + " " + " ".join(f"{n:>{width}}" for n in self.class_names)]
        for name, row in zip(self.class_names, vals):
            lines.append(f"{name:>{width}} " + " ".join(f"{cell(v):>{width}}" for v in row))
        return "\n".join(lines)


def confusion(preds, labels, k: int = NUM_CLASSES) -> ConfusionMatrix:
    preds, labels = np.asarray(preds, np.int64), np.asarray(labels, np.int64)
    for arr, what in ((labels, "label"), (preds, "prediction")):
        bad = (arr < 0) | (arr >= k)
        if bad.any():
            raise LabelError(f"{what} {int(arr[bad][0])} outside [0, {k})")
    counts = np.zeros((k, k), np.int64)
    np.add.at(counts, (labels, preds), 1)
    names = CLASS_NAMES if k == NUM_CLASSES else tuple(str(i) for i in range(k))
    return ConfusionMatrix(counts, names)


def predict_proba(net: ResMaskingNet, x: Tensor) -> np.ndarray:
    with no_grad():
        return F.softmax(network_forward(net, x, "eval")).data


def ensemble_predict(models, x: Tensor) -> np.ndarray:
    """Unweighted mean of each model's softmax output (N x K)."""
    models = list(models)
    if not models:
        raise ContractError("ensemble needs at least one model")
    return _mean([predict_proba(m, x) for m in models])


def _mean(rows):
    # p0 + mean(p_i - p0): identical members reproduce p0 bit for bit
    base = rows[0]
    dev = np.zeros_like(base)
    for p in rows[1:]:
        dev += p - base
    return base + dev / len(rows)


def mean_probabilities(prob_rows) -> np.ndarray:
    prob_rows = [np.asarray(p, np.float64) for p in prob_rows]
    if not prob_rows:
        raise ContractError("ensemble needs at least one model")
    return _mean(prob_rows)


# ---------------------------------------------------------------- Grad-CAM

@dataclass
class GradCamMap:
    heatmap: np.ndarray
    target_layer: str
    target_class: int


def gradcam_targets(net: ResMaskingNet) -> list[str]:
    n = len(net.stages)
    return [f"stage{i}.last_conv" for i in range(1, n + 1)] + [f"stage{i}" for i in range(1, n + 1)]


def default_gradcam_target(net: ResMaskingNet) -> str:
    return f"stage{len(net.stages)}.last_conv"


def activation_and_grad(net: ResMaskingNet, x: Tensor, class_index: int, target_layer: str):
    """Activation at ``target_layer`` and d(logit[class]) / d(activation), eval mode."""
    valid = gradcam_targets(net)
    if target_layer not in valid:
        raise ContractError(f"unknown Grad-CAM target {target_layer!r}; valid: {', '.join(valid)}")
    k = net.spec.num_classes
    if not 0 <= class_index < k:
        raise LabelError(f"class {class_index} outside 0-{k - 1}")
    saved = {}

    def tap(name, t):
        if name == target_layer:
            t.requires_grad = True  # make it a graph root even with frozen params
            t.retain_grad()
            saved["act"] = t
        return t

    flags = [p.requires_grad for p in net.parameters()]
    net.requires_grad_(False)
    try:
        x = Tensor(x.data)
        logits = network_forward(net, x, "eval", tap)
        target = select(logits, (slice(None), class_index)).sum()
        act = saved["act"]
        if target.requires_grad:
            backward(target)
        grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    finally:
        for p, f in zip(net.parameters(), flags):
            p.requires_grad = f
    return act.data, grad


def cam_from(act: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """ReLU(sum_c mean(grad_c) * act_c), divided by its max (zero map stays zero)."""
    weights = grad.mean(axis=(2, 3))  # N x C
    cam = np.maximum(np.einsum("nc,nchw->nhw", weights, act), 0.0)[0]
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)


def grad_cam(net: ResMaskingNet, x: Tensor, class_index: int, target_layer: str | None = None) -> GradCamMap:
    target_layer = target_layer or default_gradcam_target(net)
    if x.ndim == 3:
        x = Tensor(x.data[None])
    act, grad = activation_and_grad(net, x, class_index, target_layer)
    return GradCamMap(cam_from(act, grad).astype(np.float64), target_layer, class_index)


def overlay(cam: GradCamMap | np.ndarray, base_image: np.ndarray, alpha: float = 0.5) -> np.ndarray:
    """Blend a red heat layer over ``base_image``: out = (1-a)*base + a*(255*m, 0, 0)."""
    heat = cam.heatmap if isinstance(cam, GradCamMap) else np.asarray(cam)
    base = np.asarray(base_image, np.float64)
    if base.ndim == 2:
        base = np.repeat(base[..., None], 3, axis=2)
    h, w = base.shape[:2]
    m = np.clip(resize_bilinear(heat, h, w), 0.0, 1.0)
    red = np.zeros_like(base)
    red[..., 0] = 255.0 * m
    return np.clip(np.rint((1 - alpha) * base + alpha * red), 0, 255).astype(np.uint8)


def render_heatmap(cam: GradCamMap | np.ndarray, base_image: np.ndarray, path) -> Path:
    return write_ppm(path, overlay(cam, base_image))
