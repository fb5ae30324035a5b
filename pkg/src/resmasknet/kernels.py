"""Raw numpy convolution kernels (no autodiff).

``conv2d_forward`` lowers the input to a column matrix (im2col) and reduces
against the flattened filters.  In float32 the reduction goes through BLAS.
In float64 it walks the reduction axis in a fixed order (channel, kernel row,
kernel column), which is exactly the accumulation order of
``conv2d_reference``; the two therefore agree bit for bit.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidConfigError


def out_size(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def check_window(h: int, w: int, kh: int, kw: int, stride: int, padding: int, op: str) -> tuple[int, int]:
    if stride < 1 or padding < 0 or kh < 1 or kw < 1:
        raise InvalidConfigError(f"{op}: need stride >= 1, padding >= 0, kernel >= 1")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise InvalidConfigError(
            f"{op}: {kh}x{kw} window larger than padded input {h + 2 * padding}x{w + 2 * padding}"
        )
    return out_size(h, kh, stride, padding), out_size(w, kw, stride, padding)


def pad(x: np.ndarray, padding: int, value: float = 0.0) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=value)


def windows(xp: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape (N, C, Ho, Wo, kh, kw) over a padded input."""
    v = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return v[:, :, ::stride, ::stride]


def im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """(N*Ho*Wo, C*kh*kw) column matrix, rows in (n, y, x) order."""
    n, c = x.shape[:2]
    v = windows(pad(x, padding), kh, kw, stride)
    ho, wo = v.shape[2:4]
    return v.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)


def col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`im2col`: scatter-add columns back onto the input grid."""
    n, c, h, w = x_shape
    ho, wo = out_size(h, kh, stride, padding), out_size(w, kw, stride, padding)
    cols = cols.reshape(n, ho, wo, c, kh, kw)
    dxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        dxp = dxp[:, :, padding:-padding, padding:-padding]
    return dxp


def ordered_matmul_t(cols: np.ndarray, wmat: np.ndarray) -> np.ndarray:
    """``cols @ wmat.T`` accumulated strictly left to right along the shared axis."""
    acc = np.zeros((cols.shape[0], wmat.shape[0]), dtype=cols.dtype)
    for k in range(cols.shape[1]):
        acc += cols[:, k, None] * wmat[None, :, k]
    return acc


def conv2d_forward(x, w, b, stride: int, padding: int):
    """Returns (output NCHW, cols) so the caller can reuse the columns in backward."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = check_window(h, wd, kh, kw, stride, padding, "conv2d")
    if ho < 1 or wo < 1:
        raise InvalidConfigError(f"conv2d: output size {ho}x{wo} < 1")
    cols = im2col(x, kh, kw, stride, padding)
    wmat = w.reshape(o, -1)
    if x.dtype == np.float64:
        out = ordered_matmul_t(cols, wmat)
    else:
        out = cols @ wmat.T
    if b is not None:
        out += b
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def conv2d_reference(x, w, b, stride: int, padding: int) -> np.ndarray:
    """Naive six-loop cross-correlation; the oracle for the shipped kernel."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    ho, wo = out_size(h, kh, stride, padding), out_size(wd, kw, stride, padding)
    out = np.zeros((n, o, ho, wo), dtype=x.dtype)
    for bi in range(n):
        for oc in range(o):
            for y in range(ho):
                for xx in range(wo):
                    acc = x.dtype.type(0)
                    for ic in range(c):
                        for i in range(kh):
                            for j in range(kw):
                                r = y * stride + i - padding
                                s = xx * stride + j - padding
                                v = x[bi, ic, r, s] if 0 <= r < h and 0 <= s < wd else x.dtype.type(0)
                                acc = acc + v * w[oc, ic, i, j]
                    if b is not None:
                        acc = acc + b[oc]
                    out[bi, oc, y, xx] = acc
    return out
