"""Layer primitives with forward and backward rules.

All image tensors are NCHW.  Convolution is cross-correlation (no kernel
flip) with symmetric zero padding.
"""
from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DegenerateBatchError, InvalidConfigError, LabelError, ShapeError
from .tensor import Tensor, make_result, reshape


def _need4(x: Tensor, op: str) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{op} expects an NCHW tensor, got shape {list(x.shape)}")


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    _need4(x, "conv2d")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be out x in x kH x kW, got {list(weight.shape)}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d: input has {x.shape[1]} channels, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d: bias shape {list(bias.shape)} does not match {weight.shape[0]} filters")
    out, cols = kernels.conv2d_forward(x.data, weight.data, None if bias is None else bias.data, stride, padding)
    o, c, kh, kw = weight.shape

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(-1, o)
        gx = gw = gb = None
        if x.requires_grad:
            dcols = gmat @ weight.data.reshape(o, -1)
            gx = kernels.col2im(dcols, x.shape, kh, kw, stride, padding)
        if weight.requires_grad:
            gw = (gmat.T @ cols).reshape(weight.shape)
        if bias is not None and bias.requires_grad:
            gb = gmat.sum(axis=0)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, k: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Window max.  On ties the first element in row-major window order wins."""
    _need4(x, "maxpool2d")
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    ho, wo = kernels.check_window(h, w, k, k, stride, padding, "maxpool2d")
    if 2 * padding > k:
        raise InvalidConfigError(f"maxpool2d: padding {padding} exceeds half the {k}x{k} window")
    xp = kernels.pad(x.data, padding, -np.inf)
    win = kernels.windows(xp, k, k, stride).reshape(n, c, ho, wo, k * k)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        dxp = np.zeros(xp.shape, dtype=g.dtype)
        for idx in range(k * k):
            i, j = divmod(idx, k)
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += np.where(arg == idx, g, 0)
        if padding:
            dxp = dxp[:, :, padding:-padding, padding:-padding]
        return (dxp,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def global_avgpool(x: Tensor) -> Tensor:
    _need4(x, "global_avgpool")
    n, c, h, w = x.shape

    def backward(g):
        return (np.broadcast_to(g / (h * w), x.shape).astype(x.dtype),)

    return make_result(x.data.mean(axis=(2, 3), keepdims=True), (x,), backward, "global_avgpool")


def _nearest_index(src: int, dst: int) -> np.ndarray:
    return (np.arange(dst) * src) // dst


def upsample_to(x: Tensor, target_h: int, target_w: int) -> Tensor:
    """Nearest-neighbour resize to an explicit size; source index = floor(i * src / dst)."""
    _need4(x, "upsample_to")
    n, c, h, w = x.shape
    if target_h < h or target_w < w:
        raise InvalidConfigError(f"upsample_to: target {target_h}x{target_w} smaller than input {h}x{w}")
    rows, cols = _nearest_index(h, target_h), _nearest_index(w, target_w)
    out = x.data[:, :, rows][:, :, :, cols]

    def backward(g):
        # index maps are non-decreasing and hit every source cell
        g = np.add.reduceat(g, np.searchsorted(rows, np.arange(h)), axis=2)
        g = np.add.reduceat(g, np.searchsorted(cols, np.arange(w)), axis=3)
        return (g,)

    return make_result(np.ascontiguousarray(out), (x,), backward, "upsample_to")


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation.

    Training mode normalises with batch statistics (biased variance) and
    updates ``running_mean``/``running_var`` in place (unbiased variance).
    Eval mode is the affine map given by the running statistics.
    """
    _need4(x, "batchnorm2d")
    n, c, h, w = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: {c} input channels but parameters of shape {list(gamma.shape)}")
    g_ = gamma.data.reshape(1, c, 1, 1)
    if not training:
        scale = gamma.data / np.sqrt(running_var.astype(x.dtype) + eps)
        shift = beta.data - running_mean.astype(x.dtype) * scale
        xhat = (x.data - running_mean.astype(x.dtype).reshape(1, c, 1, 1)) / np.sqrt(
            running_var.astype(x.dtype).reshape(1, c, 1, 1) + eps
        )
        out = x.data * scale.reshape(1, c, 1, 1) + shift.reshape(1, c, 1, 1)

        def backward_eval(g):
            gx = g * scale.reshape(1, c, 1, 1)
            return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

        return make_result(out.astype(x.dtype), (x, gamma, beta), backward_eval, "batchnorm2d")

    m = n * h * w
    if m < 2:
        raise DegenerateBatchError(f"batchnorm2d in train mode needs batch*spatial >= 2, got {m}")
    mu = x.data.mean(axis=(0, 2, 3))
    xc = x.data - mu.reshape(1, c, 1, 1)
    var = (xc * xc).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv.reshape(1, c, 1, 1)
    out = xhat * g_ + beta.data.reshape(1, c, 1, 1)
    running_mean *= 1 - momentum
    running_mean += momentum * mu
    running_var *= 1 - momentum
    running_var += momentum * var * (m / (m - 1))

    def backward(g):
        gbeta = g.sum(axis=(0, 2, 3))
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            gxhat = g * g_
            gx = (inv.reshape(1, c, 1, 1) / m) * (
                m * gxhat
                - gxhat.sum(axis=(0, 2, 3), keepdims=True)
                - xhat * (gxhat * xhat).sum(axis=(0, 2, 3), keepdims=True)
            )
        return gx, ggamma, gbeta

    return make_result(out, (x, gamma, beta), backward, "batchnorm2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_result(x.data * mask, (x,), backward, "relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    s = np.where(z >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(z.dtype)
    # keep strictly inside (0, 1) even where the exact value rounds to an endpoint
    fi = np.finfo(z.dtype)
    return np.clip(s, fi.smallest_subnormal, 1.0 - fi.epsneg)


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g):
        return (g * s * (1 - s),)

    return make_result(s, (x,), backward, "sigmoid")


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax over the class axis of an N x K tensor."""
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects N x K logits, got {list(logits.shape)}")
    p = _softmax(logits.data)

    def backward(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return make_result(p, (logits,), backward, "softmax")


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy expects N x K logits, got {list(logits.shape)}")
    n, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"cross_entropy: {n} rows of logits but {labels.shape[0]} labels")
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        raise LabelError(f"label {int(labels[bad][0])} outside [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[np.arange(n), labels] -= 1
        return (d * (g / n),)

    return make_result(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    _need4(a, "concat_channels")
    _need4(b, "concat_channels")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: N/H/W differ, {list(a.shape)} vs {list(b.shape)}")
    c1 = a.shape[1]

    def backward(g):
        return g[:, :c1], g[:, c1:]

    return make_result(np.concatenate([a.data, b.data], axis=1), (a, b), backward, "concat_channels")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` for x of shape N x in, weight out x in."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: cannot apply weight {list(weight.shape)} to input {list(x.shape)}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_result(out, parents, backward, "linear")


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))
