"""Residual Masking Network: ResNet-34 trunk with a Unet-style mask per stage.

Each stage computes ``F_R = residual_layer(F)``, ``F_M = masking_block(F_R)``
(sigmoid output, same shape as ``F_R``) and returns ``F_R + F_R * F_M``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from . import functional as F
from .errors import BuildError, ShapeError
from .kernels import out_size
from .rng import Rng
from .tensor import Constant, KaimingNormal, Tensor, Uniform, Zeros, add, create, mul

Tap = Callable[[str, Tensor], Tensor]


@dataclass(frozen=True)
class NetworkSpec:
    input_size: int = 224
    in_channels: int = 3
    stem_kernel: int = 7
    stem_stride: int = 2
    stem_padding: int = 3
    pool_kernel: int = 3
    pool_stride: int = 2
    pool_padding: int = 1
    channels: tuple = (64, 128, 256, 512)
    blocks: tuple = (3, 4, 6, 3)
    depths: tuple = (4, 3, 2, 1)
    num_classes: int = 7
    masking: bool = True

    @property
    def stem_channels(self) -> int:
        return self.channels[0]

    def backbone_only(self) -> "NetworkSpec":
        return replace(self, masking=False)

    def to_dict(self) -> dict:
        return asdict(self)


def default_spec() -> NetworkSpec:
    return NetworkSpec()


def mini_spec() -> NetworkSpec:
    """Width-reduced preset for desk-scale training and gradient checks."""
    return NetworkSpec(input_size=64, channels=(8, 16, 32, 64), blocks=(1, 1, 1, 1), depths=(2, 2, 1, 1))


PRESETS = {"default": default_spec, "mini": mini_spec}


def shape_chain(spec: NetworkSpec) -> list[tuple[str, tuple]]:
    """Expected (label, C x H x W) after each top-level stage, for the given spec.

    Raises BuildError naming the first stage whose configuration cannot run.
    """
    n_stages = len(spec.channels)
    if not (len(spec.blocks) == len(spec.depths) == n_stages) or n_stages < 1:
        raise BuildError("channels, blocks and depths must list the same number of stages")
    s = out_size(spec.input_size, spec.stem_kernel, spec.stem_stride, spec.stem_padding)
    if s < 1:
        raise BuildError(f"stem: {spec.input_size}px input too small for a {spec.stem_kernel}x{spec.stem_kernel} kernel")
    chain = [("Conv1", (spec.stem_channels, s, s))]
    s = out_size(s, spec.pool_kernel, spec.pool_stride, spec.pool_padding)
    if s < 1:
        raise BuildError("stem max-pooling leaves no spatial extent")
    chain.append(("MaxPooling", (spec.stem_channels, s, s)))
    for i, (c, nb, d) in enumerate(zip(spec.channels, spec.blocks, spec.depths), start=1):
        if c < 1 or nb < 1 or d < 0:
            raise BuildError(f"stage {i}: channels and block count must be positive, depth non-negative")
        if i > 1:
            s = out_size(s, 3, 2, 1)
        if s < 1:
            raise BuildError(f"stage {i}: spatial size collapsed below 1x1")
        if spec.masking and s >> d < 1:
            raise BuildError(f"stage {i}: masking depth {d} pools {s}x{s} below 1x1")
        chain.append((f"Resmasking Block {i}", (c, s, s)))
    chain.append(("Average pooling", (spec.channels[-1], 1, 1)))
    chain.append(("FC, Softmax", (spec.num_classes,)))
    return chain


def format_size(shape) -> str:
    return "×".join(str(d) for d in shape)


# ---------------------------------------------------------------- modules

class Module:
    """Minimal container: registers parameters, buffers and children by attribute."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_children", {})
        object.__setattr__(self, "training", True)

    def __setattr__(self, name, value):
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        object.__setattr__(self, name, value)

    def register_buffer(self, name: str, value: np.ndarray) -> None:
        self._buffers[name] = value
        object.__setattr__(self, name, value)

    def add_module(self, name: str, module: "Module") -> None:
        self._children[name] = module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for cname, child in self._children.items():
            yield from child.named_parameters(f"{prefix}{cname}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, b in self._buffers.items():
            yield prefix + name, b
        for cname, child in self._children.items():
            yield from child.named_buffers(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state(self) -> dict:
        """Every parameter and buffer array by registry name."""
        out = {n: p.data for n, p in self.named_parameters()}
        out.update(self.named_buffers())
        return out

    def train(self, mode: bool = True) -> "Module":
        object.__setattr__(self, "training", mode)
        for child in self._children.values():
            child.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def requires_grad_(self, flag: bool = True) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class Sequence(Module):
    def __init__(self, modules):
        super().__init__()
        self.items = list(modules)
        for i, m in enumerate(self.items):
            self.add_module(str(i), m)

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)

    def __getitem__(self, i):
        return self.items[i]


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: Rng, stride: int = 1, padding: int = 0, dtype=None):
        super().__init__()
        self.stride, self.padding = stride, padding
        fan_in = cin * k * k
        self.weight = create((cout, cin, k, k), KaimingNormal(rng, fan_in), requires_grad=True, dtype=dtype)
        self.bias = create((cout,), Zeros(), requires_grad=True, dtype=dtype)

    def forward(self, x):
        return F.conv2d(x, self.weight, self.bias, self.stride, self.padding)


class BatchNorm2d(Module):
    def __init__(self, c: int, momentum: float = 0.1, eps: float = 1e-5, dtype=None):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = create((c,), Constant(1.0), requires_grad=True, dtype=dtype)
        self.beta = create((c,), Zeros(), requires_grad=True, dtype=dtype)
        self.register_buffer("running_mean", np.zeros(c, self.gamma.dtype))
        self.register_buffer("running_var", np.ones(c, self.gamma.dtype))

    def forward(self, x):
        return F.batchnorm2d(
            x, self.gamma, self.beta, self.running_mean, self.running_var, self.training, self.momentum, self.eps
        )


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: Rng, dtype=None):
        super().__init__()
        bound = 1.0 / np.sqrt(cin)
        self.weight = create((cout, cin), Uniform(rng, -bound, bound), requires_grad=True, dtype=dtype)
        self.bias = create((cout,), Zeros(), requires_grad=True, dtype=dtype)

    def forward(self, x):
        return F.linear(x, self.weight, self.bias)


class BasicBlock(Module):
    """conv3x3-BN-ReLU-conv3x3-BN plus shortcut, then ReLU."""

    def __init__(self, cin: int, cout: int, stride: int, rng: Rng, dtype=None):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, stride, 1, dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, 1, 1, dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)
        self.has_projection = stride != 1 or cin != cout
        if self.has_projection:
            self.proj = Conv2d(cin, cout, 1, rng, stride, 0, dtype)
            self.proj_bn = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x, tap: Tap | None = None, name: str = ""):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.conv2(out)
        if tap is not None:
            out = tap(name, out)
        out = self.bn2(out)
        short = self.proj_bn(self.proj(x)) if self.has_projection else x
        return F.relu(add(out, short))


class DoubleConv(Module):
    def __init__(self, cin: int, cout: int, rng: Rng, dtype=None):
        super().__init__()
        self.conv1 = Conv2d(cin, cout, 3, rng, 1, 1, dtype)
        self.bn1 = BatchNorm2d(cout, dtype=dtype)
        self.conv2 = Conv2d(cout, cout, 3, rng, 1, 1, dtype)
        self.bn2 = BatchNorm2d(cout, dtype=dtype)

    def forward(self, x):
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class MaskingBlock(Module):
    """Unet-style encoder/decoder producing a [0, 1] map the shape of its input.

    Encoder level i: 2x2 max-pool, then a double conv that doubles the width.
    Decoder level i: nearest upsample back to the size recorded on the way
    down, concatenate the skip, double conv back to that level's width.
    A 1x1 conv and sigmoid form the head.
    """

    def __init__(self, channels: int, depth: int, rng: Rng, dtype=None):
        super().__init__()
        self.channels, self.depth = channels, depth
        widths = [channels * 2**i for i in range(depth + 1)]
        self.down = Sequence(DoubleConv(widths[i], widths[i + 1], rng, dtype) for i in range(depth))
        self.up = Sequence(DoubleConv(widths[i + 1] + widths[i], widths[i], rng, dtype) for i in range(depth))
        self.head = Conv2d(channels, channels, 1, rng, dtype=dtype)

    def forward(self, fr: Tensor) -> Tensor:
        if fr.ndim != 4 or fr.shape[1] != self.channels:
            raise ShapeError(f"masking block expects {self.channels} channels, got shape {list(fr.shape)}")
        if fr.shape[2] >> self.depth < 1 or fr.shape[3] >> self.depth < 1:
            raise ShapeError(f"{fr.shape[2]}x{fr.shape[3]} input too small for masking depth {self.depth}")
        skips = [fr]
        x = fr
        for enc in self.down:
            x = enc(F.maxpool2d(x, 2, 2))
            skips.append(x)
        for i in reversed(range(self.depth)):
            skip = skips[i]
            x = F.upsample_to(x, skip.shape[2], skip.shape[3])
            x = self.up[i](F.concat_channels(skip, x))
        return F.sigmoid(self.head(x))


class ResMaskingBlock(Module):
    def __init__(self, cin: int, cout: int, n_blocks: int, stride: int, depth: int, rng: Rng, masking=True, dtype=None):
        super().__init__()
        blocks = [BasicBlock(cin, cout, stride, rng, dtype)]
        blocks += [BasicBlock(cout, cout, 1, rng, dtype) for _ in range(n_blocks - 1)]
        self.residual = Sequence(blocks)
        self.masking = masking
        if masking:
            self.mask = MaskingBlock(cout, depth, rng, dtype)

    def forward(self, x: Tensor, tap: Tap | None = None, name: str = "") -> Tensor:
        last = len(self.residual) - 1
        for i, blk in enumerate(self.residual):
            x = blk(x, tap if i == last else None, f"{name}.last_conv")
        fr = x
        if tap is not None:
            fr = tap(f"{name}.residual", fr)
        if not self.masking:
            return fr
        fm = self.mask(fr)
        if tap is not None:
            fm = tap(f"{name}.mask", fm)
        return fuse(fr, fm)


def fuse(fr: Tensor, fm: Tensor) -> Tensor:
    """Attention-residual fusion ``fr + fr * fm``."""
    return add(fr, mul(fr, fm))


class ResMaskingNet(Module):
    def __init__(self, spec: NetworkSpec, seed: int = 0, dtype=None):
        super().__init__()
        self.chain = shape_chain(spec)
        object.__setattr__(self, "spec", spec)
        rng = Rng(seed)
        c0 = spec.stem_channels
        self.stem_conv = Conv2d(spec.in_channels, c0, spec.stem_kernel, rng, spec.stem_stride, spec.stem_padding, dtype)
        self.stem_bn = BatchNorm2d(c0, dtype=dtype)
        stages, cin = [], c0
        for i, (c, nb, d) in enumerate(zip(spec.channels, spec.blocks, spec.depths)):
            stages.append(ResMaskingBlock(cin, c, nb, 1 if i == 0 else 2, d, rng, spec.masking, dtype))
            cin = c
        self.stages = Sequence(stages)
        self.fc = Linear(cin, spec.num_classes, rng, dtype)

    def forward(self, x: Tensor, tap: Tap | None = None) -> Tensor:
        spec = self.spec
        want = (spec.in_channels, spec.input_size, spec.input_size)
        if x.ndim != 4 or tuple(x.shape[1:]) != want:
            raise ShapeError(f"network expects N x {format_size(want)} input, got {list(x.shape)}")
        t = tap if tap is not None else (lambda _n, v: v)
        x = t("conv1", F.relu(self.stem_bn(self.stem_conv(x))))
        x = t("maxpool", F.maxpool2d(x, spec.pool_kernel, spec.pool_stride, spec.pool_padding))
        for i, stage in enumerate(self.stages, start=1):
            x = t(f"stage{i}", stage(x, tap, f"stage{i}"))
        x = t("avgpool", F.global_avgpool(x))
        return t("logits", self.fc(F.flatten(x)))


def chain_taps(n_stages: int) -> list[str]:
    return ["conv1", "maxpool", *(f"stage{i}" for i in range(1, n_stages + 1)), "avgpool", "logits"]


def build_network(spec: NetworkSpec | None = None, seed: int = 0, dtype=None) -> ResMaskingNet:
    """Instantiate ``spec`` with deterministic initial parameters.

    Convolutions are Kaiming-normal with zero bias, BN is gamma=1 / beta=0,
    and the classifier is uniform in +-1/sqrt(fan_in).
    """
    return ResMaskingNet(spec or default_spec(), seed, dtype)


def network_forward(net: ResMaskingNet, batch: Tensor, mode: str = "eval", tap: Tap | None = None) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be train or eval, not {mode!r}")
    net.train(mode == "train")
    return net(batch, tap)


def trace_shapes(net: ResMaskingNet, batch: Tensor, mode: str = "eval") -> list[tuple[str, tuple]]:
    """Run a forward pass and record (tap name, C x H x W) at each stage boundary."""
    taps = chain_taps(len(net.stages))
    seen = []

    def tap(name, t):
        if name in taps:
            seen.append((name, tuple(t.shape[1:])))
        return t

    network_forward(net, batch, mode, tap)
    return seen


def count_parameters(net: Module) -> int:
    return sum(p.size for p in net.parameters())


@dataclass
class LayerRow:
    layer: str
    output_size: str
    params: int
    shapes: list = field(default_factory=list)


def describe(net: ResMaskingNet) -> list[LayerRow]:
    """One row per top-level layer, mirroring the configuration table."""
    chain = net.chain
    groups = [
        [net.stem_conv, net.stem_bn],
        [],
        *[[s] for s in net.stages],
        [],
        [net.fc],
    ]
    rows = []
    for (label, size), mods in zip(chain, groups):
        params = [p for m in mods for p in m.parameters()]
        rows.append(LayerRow(label, format_size(size), sum(p.size for p in params), [p.shape for p in params]))
    return rows


def format_table(rows: list[LayerRow]) -> str:
    w0 = max(len("Layer"), *(len(r.layer) for r in rows))
    w1 = max(len("Output size"), *(len(r.output_size) for r in rows))
    lines = [f"{'Layer':<{w0}}  {'Output size':<{w1}}  {'Params':>12}"]
    lines.append("-" * len(lines[0]))
    for r in rows:
        lines.append(f"{r.layer:<{w0}}  {r.output_size:<{w1}}  {r.params:>12,}")
    return "\n".join(lines)
