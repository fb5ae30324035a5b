"""Central-difference verification of analytic gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError
from .rng import Rng
from .tensor import Tensor, backward, no_grad, precision


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def numeric_grad(f: Callable[[], Tensor], x: Tensor, h: float, coords) -> np.ndarray:
    flat = x.data.reshape(-1)
    out = np.empty(len(coords))
    with no_grad():
        _sweep(f, flat, h, coords, out)
    return out


def _sweep(f, flat, h, coords, out):
    for k, i in enumerate(coords):
        orig = flat[i]
        flat[i] = orig + h
        fp = f().item()
        flat[i] = orig - h
        fm = f().item()
        flat[i] = orig
        out[k] = (fp - fm) / (2 * h)


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    h: float = 1e-5,
    mode: str = "f64",
    max_checks: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between backprop and central differences.

    ``f(*inputs)`` must return a scalar tensor.  Inputs are cast to ``mode``
    precision in place and marked as requiring gradients.  With
    ``max_checks`` set, each input is probed at that many randomly chosen
    coordinates instead of all of them (for networks too large to sweep).
    """
    with precision(mode):
        for x in inputs:
            x.data = np.array(x.data, dtype=np.float64 if mode in ("f64", "float64") else np.float32)
            x.requires_grad = True
            x.grad = None
        out = f(*inputs)
        if out.size != 1:
            raise ContractError(f"grad_check needs a scalar-valued function, got shape {list(out.shape)}")
        backward(out)
        rng = Rng(seed)
        worst = 0.0
        for x in inputs:
            n = x.size
            if max_checks is not None and n > max_checks:
                coords = np.sort(rng.permutation(n)[:max_checks])
            else:
                coords = np.arange(n)
            analytic = np.zeros(len(coords)) if x.grad is None else x.grad.reshape(-1)[coords]
            numeric = numeric_grad(lambda: f(*inputs), x, h, coords)
            if len(coords):
                worst = max(worst, float(relative_error(analytic, numeric).max()))
        return worst
