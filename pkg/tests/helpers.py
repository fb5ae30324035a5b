"""Gradient-oracle helpers shared by the op tests and the acceptance suite."""
import numpy as np

from resmasknet import functional as F
from resmasknet.gradcheck import grad_check, numeric_grad, relative_error
from resmasknet.tensor import Tensor, no_grad, tsum


def weighted_sum(out: Tensor, seed: int) -> Tensor:
    """sum(out * w) for a fixed random w, so every output element matters."""
    w = Tensor(np.random.default_rng(seed).normal(size=out.shape), dtype=out.dtype)
    return tsum(out * w)


def property_check(f, inputs, seed=0, h=1e-5):
    """grad_check for randomly drawn configs.

    A random draw can land on a coordinate whose true gradient is tiny next
    to the loss value, where central differences carry round-off of about
    eps * |f| / h.  Such coordinates (both gradients under 1e4 times that
    bound) are compared absolutely against the bound instead of relatively.
    """
    err = grad_check(f, inputs, h=h, seed=seed)
    if err < 1e-4:
        return err
    with no_grad():
        noise = 8 * np.finfo(np.float64).eps * max(1.0, abs(f(*inputs).item())) / h
    worst = 0.0
    for x in inputs:
        num = numeric_grad(lambda: f(*inputs), x, h, np.arange(x.size))
        ana = x.grad.reshape(-1)
        tiny = np.maximum(np.abs(ana), np.abs(num)) < 1e4 * noise
        assert np.all(np.abs(ana - num)[tiny] < 10 * noise)
        worst = max(worst, float(relative_error(ana, num)[~tiny].max(initial=0.0)))
    return worst


def _conv(r, seed):
    h, w, k = r.integers(1, 9), r.integers(1, 9), int(r.integers(1, 5))
    p = int(r.integers(0, 3))
    p = max(p, (k - min(h, w) + 1) // 2)
    s = int(r.integers(1, 4))
    n, cin, cout = r.integers(1, 3), r.integers(1, 4), r.integers(1, 4)
    ins = [Tensor(r.normal(size=(n, cin, h, w))), Tensor(r.normal(size=(cout, cin, k, k))), Tensor(r.normal(size=cout))]
    return lambda x, wt, b: weighted_sum(F.conv2d(x, wt, b, s, p), seed), ins


def _maxpool(r, seed):
    h = int(r.integers(1, 9))
    k = int(r.integers(1, min(h, 3) + 1))
    p = int(r.integers(0, k // 2 + 1))
    s = int(r.integers(1, 4))
    return lambda x: weighted_sum(F.maxpool2d(x, k, s, p), seed), [Tensor(r.normal(size=(2, 2, h, h)))]


def _avgpool(r, seed):
    x = Tensor(r.normal(size=(2, 3, r.integers(1, 7), r.integers(1, 7))))
    return lambda x: weighted_sum(F.global_avgpool(x), seed), [x]


def _upsample(r, seed):
    h, w = int(r.integers(1, 6)), int(r.integers(1, 6))
    th, tw = h + int(r.integers(0, 5)), w + int(r.integers(0, 5))
    return lambda x: weighted_sum(F.upsample_to(x, th, tw), seed), [Tensor(r.normal(size=(1, 2, h, w)))]


def _batchnorm(r, seed):
    n, c, h = int(r.integers(1, 4)), int(r.integers(1, 4)), int(r.integers(1, 5))
    n = max(n, 2) if n * h * h < 2 else n
    training = bool(r.integers(0, 2))
    rm, rv = r.normal(size=c), r.uniform(0.5, 2, size=c)
    ins = [Tensor(r.normal(size=(n, c, h, h))), Tensor(r.normal(size=c) + 1), Tensor(r.normal(size=c))]
    return lambda x, g, b: weighted_sum(F.batchnorm2d(x, g, b, rm.copy(), rv.copy(), training), seed), ins


def _relu(r, seed):
    x = r.normal(size=int(r.integers(1, 17))) * 3
    x[np.abs(x) < 1e-3] = 0.5  # keep probes off the kink
    return lambda x: weighted_sum(F.relu(x), seed), [Tensor(x)]


def _sigmoid(r, seed):
    return lambda x: weighted_sum(F.sigmoid(x), seed), [Tensor(r.normal(size=int(r.integers(1, 17))) * 3)]


def _softmax(r, seed):
    return lambda z: weighted_sum(F.softmax(z), seed), [Tensor(r.normal(size=(int(r.integers(1, 5)), 7)) * 2)]


def _cross_entropy(r, seed):
    n = int(r.integers(1, 7))
    labels = r.integers(0, 7, n)
    return lambda z: F.cross_entropy(z, labels), [Tensor(r.normal(size=(n, 7)) * 2)]


def _concat(r, seed):
    c1, c2 = int(r.integers(0, 4)), int(r.integers(1, 4))
    ins = [Tensor(r.normal(size=(2, c1, 3, 3))), Tensor(r.normal(size=(2, c2, 3, 3)))]
    return lambda a, b: weighted_sum(F.concat_channels(a, b), seed), ins


# op name -> (case builder, relative-error bound)
OP_CASES = {
    "conv2d": (_conv, 1e-4),
    "maxpool2d": (_maxpool, 1e-4),
    "global_avgpool": (_avgpool, 1e-4),
    "upsample_to": (_upsample, 1e-4),
    "batchnorm2d": (_batchnorm, 1e-3),
    "relu": (_relu, 1e-4),
    "sigmoid": (_sigmoid, 1e-4),
    "softmax": (_softmax, 1e-4),
    "cross_entropy": (_cross_entropy, 1e-4),
    "concat_channels": (_concat, 1e-4),
}
