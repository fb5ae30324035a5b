"""Binary checkpoint archive.

Layout (all integers little-endian)::

    b"RMSK"  u16 version=1  u32 entry_count
    entry:   u16 name_len  name (UTF-8)  u8 dtype  u8 rank  u32 dims[rank]  raw data

dtype tags: 0 = float32, 1 = float64.  Entries cover every parameter and BN
running statistic of a network, each name exactly once, plus one float64
``meta.geometry`` vector (input size, stem stride/padding, pool
kernel/stride/padding) that the tensors themselves cannot reveal.
"""
from __future__ import annotations

import re
import struct
from dataclasses import replace
from pathlib import Path

import numpy as np

from .errors import (
    CheckpointError,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    UnknownParameterError,
)
from .model import PRESETS, NetworkSpec, ResMaskingNet, build_network

MAGIC = b"RMSK"
VERSION = 1
DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_OF = {np.dtype("float32"): 0, np.dtype("float64"): 1}
GEOMETRY = "meta.geometry"
GEOMETRY_FIELDS = ("input_size", "stem_stride", "stem_padding", "pool_kernel", "pool_stride", "pool_padding")


def write_entries(path, entries: dict) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC + struct.pack("<HI", VERSION, len(entries)))
        for name, arr in entries.items():
            raw = name.encode("utf-8")
            arr = np.asarray(arr)
            fh.write(struct.pack("<H", len(raw)) + raw)
            fh.write(struct.pack("<BB", _TAG_OF[arr.dtype], arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype=DTYPE_TAGS[_TAG_OF[arr.dtype]]).tobytes())


class _Reader:
    def __init__(self, buf: bytes):
        self.buf, self.pos = buf, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"file ends at byte {len(self.buf)}, needed {self.pos + n}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_entries(path) -> dict:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint (bad magic {buf[:4]!r})")
    r = _Reader(buf)
    r.take(4)
    version, count = r.unpack("<HI")
    if version != VERSION:
        raise CheckpointVersionError(f"{path}: unsupported checkpoint version {version}")
    out = {}
    for _ in range(count):
        (nlen,) = r.unpack("<H")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"{path}: entry name is not UTF-8") from exc
        tag, rank = r.unpack("<BB")
        if tag not in DTYPE_TAGS:
            raise CheckpointFormatError(f"{path}: entry {name!r} has unknown dtype tag {tag}")
        dims = r.unpack(f"<{rank}I")
        dt = DTYPE_TAGS[tag]
        n = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(n * dt.itemsize), dtype=dt).reshape(dims)
        if name in out:
            raise CheckpointFormatError(f"{path}: duplicate entry {name!r}")
        out[name] = data.astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{path}: {len(buf) - r.pos} trailing bytes after last entry")
    return out


def save_checkpoint(net: ResMaskingNet, path) -> Path:
    path = Path(path)
    entries = net.state()
    entries[GEOMETRY] = np.array([getattr(net.spec, f) for f in GEOMETRY_FIELDS], np.float64)
    write_entries(path, entries)
    return path


def infer_spec(entries: dict) -> NetworkSpec:
    """Recover the architecture from parameter names and shapes.

    Widths, block counts, masking depths and class count are read from the
    tensors, the rest from ``meta.geometry``.  Files without that entry fall
    back to a matching preset's input size, else 224.
    """
    try:
        stem = entries["stem_conv.weight"]
        fc = entries["fc.weight"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks {exc.args[0]!r}; not a network checkpoint") from None
    stages = []
    while f"stages.{len(stages)}.residual.0.conv1.weight" in entries:
        stages.append(len(stages))  # stray names are left for load_state to reject
    if not stages:
        raise CheckpointError("checkpoint has no stages; not a network checkpoint")
    channels, blocks, depths = [], [], []
    masking = any(".mask." in k for k in entries)
    for s in stages:
        pre = f"stages.{s}."
        channels.append(int(entries[f"{pre}residual.0.conv1.weight"].shape[0]))
        blocks.append(len({m.group(1) for k in entries if (m := re.match(re.escape(pre) + r"residual\.(\d+)\.", k))}))
        depths.append(len({m.group(1) for k in entries if (m := re.match(re.escape(pre) + r"mask\.down\.(\d+)\.", k))}))
    spec = NetworkSpec(
        in_channels=int(stem.shape[1]),
        stem_kernel=int(stem.shape[2]),
        stem_padding=int(stem.shape[2]) // 2,
        channels=tuple(channels),
        blocks=tuple(blocks),
        depths=tuple(depths) if masking else NetworkSpec().depths[: len(stages)],
        num_classes=int(fc.shape[0]),
        masking=masking,
    )
    if GEOMETRY in entries:
        geo = entries[GEOMETRY]
        if geo.shape != (len(GEOMETRY_FIELDS),):
            raise CheckpointFormatError(f"{GEOMETRY} has shape {list(geo.shape)}")
        return replace(spec, **{f: int(v) for f, v in zip(GEOMETRY_FIELDS, geo)})
    for preset in PRESETS.values():
        p = preset()
        if (p.channels, p.blocks) == (spec.channels, spec.blocks) and (not masking or p.depths == spec.depths):
            return replace(spec, input_size=p.input_size)
    return spec


def load_checkpoint(path) -> ResMaskingNet:
    entries = read_entries(path)
    spec = infer_spec(entries)
    dtype = entries["stem_conv.weight"].dtype
    net = build_network(spec, seed=0, dtype=dtype.type)
    load_state(net, entries)
    return net


def load_state(net: ResMaskingNet, entries: dict) -> None:
    """Copy ``entries`` into ``net``; every name must exist with a matching shape."""
    params = dict(net.named_parameters())
    buffers = dict(net.named_buffers())
    missing = (set(params) | set(buffers)) - set(entries)
    for name, arr in entries.items():
        if name == GEOMETRY:
            continue
        if name in params:
            target = params[name].data
        elif name in buffers:
            target = buffers[name]
        else:
            raise UnknownParameterError(f"checkpoint entry {name!r} does not exist in the network")
        if target.shape != arr.shape:
            raise CheckpointError(f"{name}: checkpoint shape {list(arr.shape)} vs network {list(target.shape)}")
        target[...] = arr
    if missing:
        raise CheckpointError(f"checkpoint is missing {len(missing)} entries, e.g. {sorted(missing)[0]!r}")
