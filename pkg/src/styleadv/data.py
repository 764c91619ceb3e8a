"""Desk-scale image data: a procedural 10-class glyph dataset, a procedural
texture corpus for style training, and class-per-subdirectory folder I/O.

Glyph classes are defined by shape (the semantic content); foreground and
background colors, position, scale, rotation and pixel noise vary freely per
sample, so low-level statistics carry no label information.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .core import ConfigError, Tensor

CLASS_NAMES = [
    "disk", "ring", "square", "frame", "triangle",
    "cross", "saltire", "bars", "diamond", "tee",
]

ENV_ROOT = "STYLEADV_ROOT"


def default_root() -> Path:
    return Path(os.environ.get(ENV_ROOT, "styleadv_runs"))


def _glyph_mask(cls: int, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    r = np.sqrt(u * u + v * v)
    box = np.maximum(np.abs(u), np.abs(v))
    if cls == 0:    # disk
        return r < 0.62
    if cls == 1:    # ring
        return (r > 0.36) & (r < 0.66)
    if cls == 2:    # square
        return box < 0.55
    if cls == 3:    # frame
        return (box > 0.33) & (box < 0.62)
    if cls == 4:    # triangle
        return (v < 0.55) & (v > -0.62 + 1.9 * np.abs(u))
    if cls == 5:    # cross
        return ((np.abs(u) < 0.21) | (np.abs(v) < 0.21)) & (box < 0.64)
    if cls == 6:    # saltire
        return ((np.abs(u - v) < 0.30) | (np.abs(u + v) < 0.30)) & (box < 0.64)
    if cls == 7:    # bars
        bar = (np.abs(v + 0.45) < 0.14) | (np.abs(v) < 0.14) | (np.abs(v - 0.45) < 0.14)
        return bar & (np.abs(u) < 0.60)
    if cls == 8:    # diamond
        return (np.abs(u) + np.abs(v)) < 0.72
    if cls == 9:    # tee
        top = (np.abs(v + 0.45) < 0.16) & (np.abs(u) < 0.60)
        stem = (np.abs(u) < 0.16) & (v > -0.45) & (v < 0.62)
        return top | stem
    raise ConfigError(f"unknown glyph class {cls}")


_LUMA = np.array([0.299, 0.587, 0.114])


def _draw_colors(rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    # rejection keeps foreground/background separated enough to be learnable:
    # hues stay fully random, but the pair must differ in overall intensity
    # so shape edges survive any color combination
    bg = rng.uniform(0.0, 1.0, size=3)
    for _ in range(100):
        fg = rng.uniform(0.0, 1.0, size=3)
        if np.abs(fg - bg).sum() >= 0.9 and abs((fg - bg) @ _LUMA) >= 0.25:
            return fg, bg
    return (np.full(3, 0.95) if bg @ _LUMA < 0.5 else np.full(3, 0.05)), bg


def render_glyph(cls: int, image_size: int, rng: np.random.Generator,
                 noise_std: float = 0.04, supersample: int = 2) -> np.ndarray:
    """One (H, W, 3) float32 glyph image with randomized pose, colors and noise."""
    n = image_size * supersample
    ax = (np.arange(n) + 0.5) / n * 2.0 - 1.0
    uu, vv = np.meshgrid(ax, ax)

    theta = rng.uniform(-0.32, 0.32)
    scale = rng.uniform(0.80, 1.10)
    dx, dy = rng.uniform(-0.12, 0.12, size=2)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    u = (cos_t * (uu - dx) + sin_t * (vv - dy)) / scale
    v = (-sin_t * (uu - dx) + cos_t * (vv - dy)) / scale

    mask = _glyph_mask(cls, u, v).astype(np.float64)
    mask = mask.reshape(image_size, supersample, image_size, supersample).mean(axis=(1, 3))

    fg, bg = _draw_colors(rng)
    img = bg[None, None, :] + mask[:, :, None] * (fg - bg)[None, None, :]
    img = img + rng.normal(0.0, noise_std, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


@dataclass
class ShapesDataset:
    train_images: Tensor    # (N, H, W, C) float32 in [0, 1]
    train_labels: Tensor    # (N,) int64
    test_images: Tensor
    test_labels: Tensor

    @property
    def num_classes(self) -> int:
        return len(CLASS_NAMES)

    @property
    def image_size(self) -> int:
        return int(self.train_images.shape[1])


def make_shapes_dataset(n_train: int = 4000, n_test: int = 1000,
                        image_size: int = 32, seed: int = 0) -> ShapesDataset:
    """Generate balanced train/test splits of the glyph dataset."""
    rng = np.random.default_rng(seed)
    k = len(CLASS_NAMES)

    def make_split(n):
        labels = np.arange(n) % k
        rng.shuffle(labels)
        images = np.stack([render_glyph(int(c), image_size, rng) for c in labels])
        return torch.from_numpy(images), torch.from_numpy(labels.astype(np.int64))

    train_x, train_y = make_split(n_train)
    test_x, test_y = make_split(n_test)
    return ShapesDataset(train_x, train_y, test_x, test_y)


# ---------------------------------------------------------------------------
# style texture corpus
# ---------------------------------------------------------------------------

def _texture(kind: int, size: int, rng: np.random.Generator) -> np.ndarray:
    ax = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    uu, vv = np.meshgrid(ax, ax)
    c1 = rng.uniform(0.0, 1.0, size=3)
    c2 = rng.uniform(0.0, 1.0, size=3)
    theta = rng.uniform(0.0, np.pi)
    proj = uu * np.cos(theta) + vv * np.sin(theta)

    kind = kind % 6
    if kind == 0:       # two-color gradient
        w = (proj + 1.0) / 2.0
    elif kind == 1:     # stripes
        freq = rng.uniform(2.0, 6.0)
        w = (np.sin(np.pi * freq * proj) > 0).astype(np.float64)
    elif kind == 2:     # checkerboard
        freq = rng.integers(2, 5)
        w = ((np.floor((uu + 1) * freq) + np.floor((vv + 1) * freq)) % 2)
    elif kind == 3:     # smooth colored noise
        low = rng.uniform(0.0, 1.0, size=(4, 4, 3))
        img = np.array(Image.fromarray((low * 255).astype(np.uint8)).resize(
            (size, size), Image.BILINEAR)) / 255.0
        return img.astype(np.float32)
    elif kind == 4:     # rings
        freq = rng.uniform(2.0, 5.0)
        w = (np.sin(np.pi * freq * np.sqrt(uu ** 2 + vv ** 2)) > 0).astype(np.float64)
    else:               # bright speckles on a dark base
        base = c1 * 0.25
        img = np.tile(base[None, None, :], (size, size, 1))
        mask = rng.random((size, size)) < 0.08
        img[mask] = 0.6 + 0.4 * c2
        return np.clip(img, 0.0, 1.0).astype(np.float32)

    img = c1[None, None, :] * (1.0 - w[:, :, None]) + c2[None, None, :] * w[:, :, None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_style_corpus(num_styles: int = 8, image_size: int = 32,
                      seed: int = 0) -> Tensor:
    """(S, H, W, C) stack of procedural textures with diverse color statistics."""
    if num_styles < 1:
        raise ConfigError(f"num_styles must be >= 1, got {num_styles}")
    rng = np.random.default_rng(seed)
    return torch.from_numpy(
        np.stack([_texture(i, image_size, rng) for i in range(num_styles)]))


# ---------------------------------------------------------------------------
# folder I/O (class-per-subdirectory layout)
# ---------------------------------------------------------------------------

def save_png(image, path: Path) -> None:
    arr = np.asarray(image)
    Image.fromarray((np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)).save(path)


def load_png(path: Path) -> Tensor:
    arr = np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr)


def save_image_folder(images, labels, root, class_names=CLASS_NAMES) -> None:
    """Write images as PNGs under root/<class_name>/NNNN.png."""
    root = Path(root)
    counters = {}
    for img, lab in zip(images, labels):
        name = class_names[int(lab)]
        sub = root / name
        sub.mkdir(parents=True, exist_ok=True)
        idx = counters.get(name, 0)
        counters[name] = idx + 1
        save_png(np.asarray(img), sub / f"{idx:05d}.png")


_IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")


def _image_files(directory: Path) -> list[Path]:
    return sorted(f for f in directory.iterdir()
                  if f.suffix.lower() in _IMAGE_SUFFIXES)


def load_image_folder(root) -> tuple[Tensor, Tensor, list[str]]:
    """Read a class-per-subdirectory folder; classes sorted by directory name."""
    root = Path(root)
    if not root.is_dir():
        raise ConfigError(f"dataset directory {root} does not exist")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    if not class_dirs:
        raise ConfigError(f"dataset directory {root} has no class subdirectories")
    images, labels = [], []
    for idx, sub in enumerate(class_dirs):
        for f in _image_files(sub):
            images.append(load_png(f))
            labels.append(idx)
    if not images:
        raise ConfigError(f"no image files found under {root}")
    return torch.stack(images), torch.tensor(labels, dtype=torch.int64), [p.name for p in class_dirs]


def save_style_folder(styles: Tensor, root) -> None:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(styles):
        save_png(img.numpy(), root / f"style_{i:03d}.png")


def load_style_folder(root) -> Tensor:
    root = Path(root)
    files = _image_files(root) if root.is_dir() else []
    if not files:
        raise ConfigError(f"no style images found under {root}")
    return torch.stack([load_png(f) for f in files])
