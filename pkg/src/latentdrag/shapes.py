"""Synthetic shape images used for toy training and the toy benchmark.

Images are single- or three-channel float arrays in [-1, 1] with a one-pixel
soft edge, which keeps denoiser features and bilinear sampling smooth.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLASS_NAMES: tuple[str, ...] = ("disc", "square", "scene")


def _grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    return xs, ys


def render_disc(size: int, cx: float, cy: float, radius: float, fg: float = 1.0, bg: float = -1.0) -> np.ndarray:
    xs, ys = _grid(size)
    dist = np.sqrt((xs - cx) ** 2 + (ys - cy) ** 2)
    coverage = np.clip(radius + 0.5 - dist, 0.0, 1.0)
    return (bg + (fg - bg) * coverage).astype(np.float32)


def render_square(size: int, cx: float, cy: float, half: float, fg: float = 1.0, bg: float = -1.0) -> np.ndarray:
    xs, ys = _grid(size)
    dist = np.maximum(np.abs(xs - cx), np.abs(ys - cy))
    coverage = np.clip(half + 0.5 - dist, 0.0, 1.0)
    return (bg + (fg - bg) * coverage).astype(np.float32)


def compose(*layers: np.ndarray, bg: float = -1.0) -> np.ndarray:
    """Overlay shape layers (max blend over the shared background)."""
    out = np.full_like(layers[0], bg)
    for layer in layers:
        out = np.maximum(out, layer)
    return out


@dataclass
class ShapeCorpus:
    """A seeded corpus of shape images with class labels (0=disc, 1=square, 2=scene)."""

    images: np.ndarray  # (N, C, H, W) float32 in [-1, 1]
    labels: np.ndarray  # (N,) int64

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def content_hash(self) -> str:
        import hashlib

        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.labels.tobytes())
        return h.hexdigest()


def _random_shape(rng: np.random.Generator, size: int, kind: int) -> np.ndarray:
    margin = size * 0.18
    fg = rng.uniform(0.35, 1.0)
    if kind == 0:
        r = rng.uniform(size * 0.10, size * 0.22)
        cx = rng.uniform(margin, size - margin)
        cy = rng.uniform(margin, size - margin)
        return render_disc(size, cx, cy, r, fg=fg)
    if kind == 1:
        half = rng.uniform(size * 0.09, size * 0.2)
        cx = rng.uniform(margin, size - margin)
        cy = rng.uniform(margin, size - margin)
        return render_square(size, cx, cy, half, fg=fg)
    # scene: a disc and a square, roughly separated
    r = rng.uniform(size * 0.08, size * 0.16)
    half = rng.uniform(size * 0.08, size * 0.15)
    cx1 = rng.uniform(margin, size * 0.45)
    cy1 = rng.uniform(margin, size - margin)
    cx2 = rng.uniform(size * 0.55, size - margin)
    cy2 = rng.uniform(margin, size - margin)
    disc = render_disc(size, cx1, cy1, r, fg=fg)
    square = render_square(size, cx2, cy2, half, fg=rng.uniform(0.35, 1.0))
    return compose(disc, square)


def make_shape_corpus(n: int, image_size: int, channels: int = 1, seed: int = 0) -> ShapeCorpus:
    """Generate ``n`` images, cycling through the shape classes."""
    rng = np.random.default_rng(seed)
    images = np.empty((n, channels, image_size, image_size), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        kind = i % len(CLASS_NAMES)
        img = _random_shape(rng, image_size, kind)
        images[i] = np.broadcast_to(img, (channels, image_size, image_size))
        labels[i] = kind
    return ShapeCorpus(images=images, labels=labels)
