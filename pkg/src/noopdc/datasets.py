"""Synthetic shape/texture datasets, few-shot splits and the NDS1 file format.

NDS1 layout (little-endian): magic ``NDS1``, u32 count, u16 H, u16 W, u16 C,
u16 K, u16 labels[count], f32 pixels[count*H*W*C] (NHWC order), then K class
names, each a u16 byte length followed by UTF-8 bytes.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

SHAPE_CLASSES = ["disc", "square", "cross", "triangle"]
TEXTURE_CLASSES = ["vertical_stripes", "horizontal_stripes", "checkerboard", "dot_lattice"]

_SUPERSAMPLE = 4


class DatasetFormatError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # (count, H, W, C) float32 in [-1, 1]
    labels: np.ndarray  # (count,) int64
    class_names: List[str]
    provenance: Dict[str, object] = field(default_factory=dict)

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise ValueError("images must be (count, H, W, C) with one label each")
        k = len(self.class_names)
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= k):
            raise ValueError(f"labels must lie in [0, {k})")
        if np.any(np.abs(self.images) > 1):
            raise ValueError("pixel values must lie in [-1, 1]")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple:
        return self.images.shape[1:]

    def __len__(self) -> int:
        return len(self.labels)

    def nchw(self, idx=None) -> np.ndarray:
        imgs = self.images if idx is None else self.images[idx]
        return np.ascontiguousarray(imgs.transpose(0, 3, 1, 2))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.images[idx], self.labels[idx], list(self.class_names), dict(self.provenance))


# ------------------------------------------------------------------ shapes


def _subpixel_grid(size: int):
    s = _SUPERSAMPLE
    coords = (np.arange(size * s) + 0.5) / s
    return np.meshgrid(coords, coords, indexing="xy")


def _shape_mask(kind: str, xx, yy, cx: float, cy: float, half: float) -> np.ndarray:
    dx, dy = xx - cx, yy - cy
    if kind == "disc":
        return dx * dx + dy * dy <= half * half
    if kind == "square":
        return (np.abs(dx) <= half) & (np.abs(dy) <= half)
    if kind == "cross":
        arm = half / 3
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= half)) | ((np.abs(dy) <= arm) & (np.abs(dx) <= half))
    if kind == "triangle":
        # apex up; inside when below the apex and within the widening flanks
        rel = (dy + half) / (2 * half)
        return (dy <= half) & (rel >= 0) & (np.abs(dx) <= half * rel)
    raise ValueError(f"unknown shape {kind!r}")


_SHAPE_STYLES = {
    # scale range, foreground, background baseline, gradient amplitude
    "default": dict(scale=(0.5, 0.9), fg=0.8, bg=-0.8, grad=0.15),
    "shifted": dict(scale=(0.4, 0.65), fg=0.55, bg=-0.55, grad=0.3),
}


def gen_shapes(n_per_class: int, size: int = 16, seed: int = 0, variant: str = "default") -> Dataset:
    """Anti-aliased disc/square/cross/triangle on a smooth background gradient."""
    if size < 8:
        raise ValueError(f"image size must be >= 8, got {size}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    if variant not in _SHAPE_STYLES:
        raise ValueError(f"unknown shapes variant {variant!r}")
    style = _SHAPE_STYLES[variant]
    rng = np.random.default_rng(seed)
    xx, yy = _subpixel_grid(size)
    px = (np.arange(size) + 0.5)[None, :] - size / 2
    py = (np.arange(size) + 0.5)[:, None] - size / 2
    images, labels = [], []
    for label, kind in enumerate(SHAPE_CLASSES):
        for _ in range(n_per_class):
            cx = size / 2 + rng.uniform(-3, 3)
            cy = size / 2 + rng.uniform(-3, 3)
            half = rng.uniform(*style["scale"]) * size / 2
            mask = _shape_mask(kind, xx, yy, cx, cy, half)
            cover = mask.reshape(size, _SUPERSAMPLE, size, _SUPERSAMPLE).mean(axis=(1, 3))
            theta = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0, style["grad"])
            bg = style["bg"] + amp * (px * np.cos(theta) + py * np.sin(theta)) / (size / 2)
            img = bg * (1 - cover) + style["fg"] * cover
            images.append(np.clip(img, -1, 1))
            labels.append(label)
    imgs = np.stack(images)[..., None].astype(np.float32)
    prov = {"generator": "shapes", "n_per_class": n_per_class, "size": size, "seed": seed, "variant": variant}
    return Dataset(imgs, np.array(labels), list(SHAPE_CLASSES), prov)


# ------------------------------------------------------------------ textures


def _square_wave(coord: np.ndarray, period: int, phase: int) -> np.ndarray:
    return np.where(((coord + phase) % period) < period / 2, 1.0, -1.0)


# Periods divide the default size and every pattern is zero-mean, so class
# identity lives only in the high band (no DC or leakage differences).
_TEXTURE_PERIODS = (2, 4)


def gen_textures(n_per_class: int, size: int = 16, seed: int = 0) -> Dataset:
    """Full-frame stripes (both orientations), checkerboards and dot lattices."""
    if size < 8:
        raise ValueError(f"image size must be >= 8, got {size}")
    if n_per_class < 1:
        raise ValueError("n_per_class must be >= 1")
    rng = np.random.default_rng(seed)
    x = np.arange(size)[None, :]
    y = np.arange(size)[:, None]
    images, labels = [], []
    for label, kind in enumerate(TEXTURE_CLASSES):
        for _ in range(n_per_class):
            period = int(rng.choice(_TEXTURE_PERIODS))
            px, py = (int(v) for v in rng.integers(0, period, size=2))
            amp = rng.uniform(0.6, 0.9)
            if kind == "vertical_stripes":
                pat = _square_wave(x, period, px) * np.ones_like(y)
            elif kind == "horizontal_stripes":
                pat = _square_wave(y, period, py) * np.ones_like(x)
            elif kind == "checkerboard":
                pat = _square_wave(x, period, px) * _square_wave(y, period, py)
            else:
                dots = ((((x + px) % period) == 0) & (((y + py) % period) == 0)).astype(np.float64)
                pat = (dots - dots.mean()) / (1 - dots.mean())
            jitter = rng.uniform(0.9, 1.1, size=(size, size))
            images.append(np.clip(amp * pat * jitter, -1, 1))
            labels.append(label)
    imgs = np.stack(images)[..., None].astype(np.float32)
    prov = {"generator": "textures", "n_per_class": n_per_class, "size": size, "seed": seed}
    return Dataset(imgs, np.array(labels), list(TEXTURE_CLASSES), prov)


GENERATORS = {"shapes": gen_shapes, "textures": gen_textures}


def generate(generator: str, n_per_class: int, size: int = 16, seed: int = 0, variant: str = "default") -> Dataset:
    if generator == "shapes":
        return gen_shapes(n_per_class, size, seed, variant)
    if generator == "textures":
        if variant != "default":
            raise ValueError("textures have no variants")
        return gen_textures(n_per_class, size, seed)
    raise ValueError(f"unknown generator {generator!r}")


# ------------------------------------------------------------------ few-shot


@dataclass(frozen=True)
class FewShotSplit:
    train: np.ndarray
    test: np.ndarray
    shots: int
    seed: int


def few_shot_split(ds: Dataset, shots: int, seed: int) -> FewShotSplit:
    """Pick exactly ``shots`` training images per class; everything else is test."""
    if shots < 1:
        raise ValueError("shots must be >= 1")
    rng = np.random.default_rng(seed)
    train = []
    for k in range(ds.num_classes):
        members = np.flatnonzero(ds.labels == k)
        if len(members) <= shots:
            raise ValueError(f"class {k} has {len(members)} samples, need more than {shots}")
        train.append(np.sort(rng.choice(members, size=shots, replace=False)))
    train_idx = np.concatenate(train)
    test_idx = np.setdiff1d(np.arange(len(ds)), train_idx)
    return FewShotSplit(train=train_idx, test=test_idx, shots=shots, seed=seed)


# ------------------------------------------------------------------ NDS1

MAGIC = b"NDS1"


def dumps_dataset(ds: Dataset) -> bytes:
    count, h, w, c = ds.images.shape
    parts = [MAGIC, struct.pack("<IHHHH", count, h, w, c, ds.num_classes)]
    parts.append(ds.labels.astype("<u2").tobytes())
    parts.append(np.ascontiguousarray(ds.images, dtype="<f4").tobytes())
    for name in ds.class_names:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    return b"".join(parts)


def loads_dataset(buf: bytes, provenance: Optional[dict] = None) -> Dataset:
    if buf[:4] != MAGIC:
        raise DatasetFormatError("bad magic, not an NDS1 file")
    if len(buf) < 16:
        raise DatasetFormatError("truncated NDS1 header")
    count, h, w, c, k = struct.unpack("<IHHHH", buf[4:16])
    pos = 16
    n_pix = count * h * w * c
    need = pos + 2 * count + 4 * n_pix
    if len(buf) < need:
        raise DatasetFormatError("truncated NDS1 body")
    labels = np.frombuffer(buf, dtype="<u2", count=count, offset=pos).astype(np.int64)
    pos += 2 * count
    pixels = np.frombuffer(buf, dtype="<f4", count=n_pix, offset=pos).reshape(count, h, w, c).copy()
    pos += 4 * n_pix
    names = []
    for _ in range(k):
        if pos + 2 > len(buf):
            raise DatasetFormatError("truncated class-name block")
        (n,) = struct.unpack("<H", buf[pos:pos + 2])
        pos += 2
        if pos + n > len(buf):
            raise DatasetFormatError("truncated class-name block")
        names.append(buf[pos:pos + n].decode("utf-8"))
        pos += n
    if pos != len(buf):
        raise DatasetFormatError("trailing bytes after class names")
    if count and labels.max() >= k:
        raise DatasetFormatError(f"label {labels.max()} >= K={k}")
    return Dataset(pixels, labels, names, dict(provenance or {}))


def save_dataset(ds: Dataset, path) -> None:
    Path(path).write_bytes(dumps_dataset(ds))


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_bytes(), {"path": str(path)})


def export_pgm(image: np.ndarray, path) -> None:
    """Write one (H, W) or (H, W, 1) image as binary 8-bit PGM, mapping [-1, 1] to [0, 255]."""
    img = np.asarray(image)
    if img.ndim == 3:
        img = img[..., 0]
    u8 = np.clip(np.round((img + 1) * 127.5), 0, 255).astype(np.uint8)
    h, w = u8.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + u8.tobytes())
