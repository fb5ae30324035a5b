"""FER2013-format ingestion, preprocessing, augmentation and batching."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np
from PIL import Image

from .errors import ParseError
from .rng import Rng
from .tensor import Tensor, default_dtype

CLASS_NAMES = ("Angry", "Disgust", "Fear", "Happy", "Sad", "Surprise", "Neutral")
NUM_CLASSES = len(CLASS_NAMES)
IMAGE_SIDE = 48
SPLITS = ("train", "val", "test")
USAGE_TO_SPLIT = {"Training": "train", "PublicTest": "val", "PrivateTest": "test"}
SPLIT_TO_USAGE = {v: k for k, v in USAGE_TO_SPLIT.items()}


@dataclass
class Sample:
    pixels: np.ndarray  # 48 x 48 uint8
    label: int
    split: str


@dataclass
class Dataset:
    """Samples stored column-wise; ``indices[split]`` lists positions in file order."""

    pixels: np.ndarray  # (N, 48, 48) uint8
    labels: np.ndarray  # (N,) int64
    splits: np.ndarray  # (N,) str
    indices: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.indices:
            self.indices = {s: np.flatnonzero(self.splits == s) for s in SPLITS}

    def __len__(self):
        return len(self.labels)

    def sample(self, i: int) -> Sample:
        return Sample(self.pixels[i], int(self.labels[i]), str(self.splits[i]))

    def subset(self, positions) -> "Dataset":
        positions = np.asarray(positions, dtype=np.int64)
        return Dataset(self.pixels[positions], self.labels[positions], self.splits[positions])

    @classmethod
    def empty(cls) -> "Dataset":
        return cls(np.zeros((0, IMAGE_SIDE, IMAGE_SIDE), np.uint8), np.zeros(0, np.int64), np.zeros(0, "<U5"))


def parse_fer_csv(path) -> Dataset:
    """Read a ``emotion,pixels,Usage`` CSV.  Errors carry the 1-based file line."""
    pixels, labels, splits = [], [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["emotion", "pixels", "Usage"]:
            raise ParseError(1, f"expected header emotion,pixels,Usage, got {header}")
        for row in reader:
            line = reader.line_num
            if len(row) != 3:
                raise ParseError(line, f"expected 3 columns, got {len(row)}")
            emotion, pix, usage = row
            try:
                label = int(emotion)
            except ValueError:
                raise ParseError(line, f"emotion {emotion!r} is not an integer") from None
            if not 0 <= label < NUM_CLASSES:
                raise ParseError(line, f"emotion {label} outside 0-6")
            try:
                values = np.array(pix.split(), dtype=np.int64)
            except ValueError:
                raise ParseError(line, "pixel field contains a non-integer value") from None
            if values.size != IMAGE_SIDE * IMAGE_SIDE:
                raise ParseError(line, f"expected {IMAGE_SIDE * IMAGE_SIDE} pixels, got {values.size}")
            if values.min() < 0 or values.max() > 255:
                raise ParseError(line, "pixel value outside 0-255")
            if usage not in USAGE_TO_SPLIT:
                raise ParseError(line, f"unknown Usage {usage!r}")
            pixels.append(values.astype(np.uint8).reshape(IMAGE_SIDE, IMAGE_SIDE))
            labels.append(label)
            splits.append(USAGE_TO_SPLIT[usage])
    if not labels:
        return Dataset.empty()
    return Dataset(np.stack(pixels), np.array(labels, np.int64), np.array(splits))


def write_fer_csv(ds: Dataset, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["emotion", "pixels", "Usage"])
        for px, lab, sp in zip(ds.pixels, ds.labels, ds.splits):
            w.writerow([int(lab), " ".join(map(str, px.reshape(-1).tolist())), SPLIT_TO_USAGE[str(sp)]])


def class_histogram(ds: Dataset, split: str) -> np.ndarray:
    idx = ds.indices.get(split, np.zeros(0, np.int64))
    return np.bincount(ds.labels[idx], minlength=NUM_CLASSES).astype(np.int64)


# ---------------------------------------------------------------- geometry

def bilinear_matrix(src: int, dst: int) -> np.ndarray:
    """(dst, src) interpolation weights with half-pixel centres, edge-clamped."""
    pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0, src - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src - 1)
    frac = pos - lo
    m = np.zeros((dst, src))
    np.add.at(m, (np.arange(dst), lo), 1 - frac)
    np.add.at(m, (np.arange(dst), hi), frac)
    return m


def resize_bilinear(img: np.ndarray, h: int, w: int) -> np.ndarray:
    """Separable bilinear resize of a 2-D array (float64 result)."""
    return bilinear_matrix(img.shape[0], h) @ np.asarray(img, np.float64) @ bilinear_matrix(img.shape[1], w).T


def preprocess(s: Sample | np.ndarray, size: int = 224) -> Tensor:
    """48x48 grey -> 3 x size x size, values (x/255 - 0.5)/0.5 in [-1, 1]."""
    px = s.pixels if isinstance(s, Sample) else s
    up = np.clip(resize_bilinear(px, size, size), 0.0, 255.0)
    x = (up / 255.0 - 0.5) / 0.5
    x = x.astype(default_dtype())
    return Tensor(np.broadcast_to(x, (3, size, size)).copy())


def flip(pixels: np.ndarray) -> np.ndarray:
    return pixels[:, ::-1].copy()


def rotate(pixels: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image centre (counter-clockwise as displayed).

    Inverse-mapped bilinear sampling; source positions outside the image
    read as zero.
    """
    h, w = pixels.shape
    img = np.asarray(pixels, np.float64)
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    # output (y, x) samples input at R(-t) applied to the offset; y axis points down
    sx = c * dx - s * dy + cx
    sy = s * dx + c * dy + cy
    y0, x0 = np.floor(sy).astype(np.int64), np.floor(sx).astype(np.int64)
    fy, fx = sy - y0, sx - x0
    padded = np.zeros((h + 2, w + 2))
    padded[1:-1, 1:-1] = img

    def at(yi, xi):
        ok = (yi >= -1) & (yi <= h) & (xi >= -1) & (xi <= w)
        return np.where(ok, padded[np.clip(yi + 1, 0, h + 1), np.clip(xi + 1, 0, w + 1)], 0.0)

    out = (
        at(y0, x0) * (1 - fy) * (1 - fx)
        + at(y0, x0 + 1) * (1 - fy) * fx
        + at(y0 + 1, x0) * fy * (1 - fx)
        + at(y0 + 1, x0 + 1) * fy * fx
    )
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def augment(s: Sample, rng: Rng, max_angle: float = 30.0, force_flip: bool | None = None) -> Sample:
    """Horizontal flip with p=0.5, then rotation by U(-max_angle, max_angle)."""
    do_flip = rng.random() < 0.5 if force_flip is None else force_flip
    angle = float(rng.uniform(1, -max_angle, max_angle)[0])
    px = flip(s.pixels) if do_flip else s.pixels
    return Sample(rotate(px, angle), s.label, s.split)


def batch_iter(
    ds: Dataset,
    split: str,
    batch_size: int,
    shuffle_seed: int | None = None,
    augment_images: bool = False,
    size: int = 224,
    aug_seed: int | None = None,
) -> Iterator[tuple[Tensor, np.ndarray]]:
    """Yield (N x 3 x size x size, labels) batches; the final short batch is kept.

    ``shuffle_seed=None`` keeps file order.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    idx = ds.indices.get(split, np.zeros(0, np.int64))
    if shuffle_seed is not None:
        idx = idx[Rng(shuffle_seed).permutation(len(idx))]
    aug_rng = Rng(shuffle_seed if aug_seed is None else aug_seed).fork(1) if augment_images else None
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        xs = []
        for i in chunk:
            s = ds.sample(int(i))
            if aug_rng is not None:
                s = augment(s, aug_rng)
            xs.append(preprocess(s, size).data)
        yield Tensor(np.stack(xs)), ds.labels[chunk].copy()


def synthetic_dataset(n_train: int = 64, n_val: int = 0, n_test: int = 0, seed: int = 0, noise: float = 12.0) -> Dataset:
    """Seeded 7-class toy set: class k is a bright ring of radius 3 + 3k px.

    Labels cycle 0..6 within each split.  The ring centre jitters by up to
    3 px and Gaussian pixel noise is added; classes stay separable under
    flips and rotations.
    """
    rng = Rng(seed)
    yy, xx = np.mgrid[0:IMAGE_SIDE, 0:IMAGE_SIDE].astype(np.float64)
    pixels, labels, splits = [], [], []
    for split, n in zip(SPLITS, (n_train, n_val, n_test)):
        for i in range(n):
            k = i % NUM_CLASSES
            cy, cx = 23.5 + rng.uniform(2, -3, 3)
            r = np.hypot(yy - cy, xx - cx)
            img = 40 + 190 * np.exp(-((r - (3 + 3 * k)) ** 2) / (2 * 1.5**2))
            img += noise * rng.normal(img.size).reshape(img.shape)
            pixels.append(np.clip(np.rint(img), 0, 255).astype(np.uint8))
            labels.append(k)
            splits.append(split)
    if not labels:
        return Dataset.empty()
    return Dataset(np.stack(pixels), np.array(labels, np.int64), np.array(splits))


# ---------------------------------------------------------------- image files

def read_image(path) -> np.ndarray:
    """Load a PGM/PPM (or any Pillow-readable file) as a uint8 array (H x W or H x W x 3)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "RGB"):
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def to_grayscale(img: np.ndarray) -> np.ndarray:
    if img.ndim == 2:
        return img
    return np.clip(np.rint(img[..., :3] @ np.array([0.299, 0.587, 0.114])), 0, 255).astype(np.uint8)


def image_to_input(img: np.ndarray, size: int = 224) -> Tensor:
    """Arbitrary-size grey or RGB image -> 1 x 3 x size x size network input."""
    return Tensor(preprocess(to_grayscale(img), size).data[None])


def write_ppm(path, rgb: np.ndarray) -> Path:
    path = Path(path)
    Image.fromarray(np.asarray(rgb, np.uint8), "RGB").save(path, format="PPM")
    return path


def write_pgm(path, gray: np.ndarray) -> Path:
    path = Path(path)
    Image.fromarray(np.asarray(gray, np.uint8), "L").save(path, format="PPM")
    return path
