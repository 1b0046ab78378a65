"""Synthetic texture-segmentation data.

Each image is a smooth background with axis-aligned rectangles filled by
fine (1-2 pixel period) textures; the label of a pixel is the texture class
of the rectangle covering it, 0 for background. Texture means match the
local brightness range of the background so that intensity alone does not
identify a class, which is where gridding hurts: a period-2 texture
subsampled at rate 2 collapses to a constant inside every group.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List

import numpy as np


def _checker(y, x):
    return (y + x) % 2


def _vstripes(y, x):
    return x % 2 + 0 * y


def _hstripes(y, x):
    return y % 2 + 0 * x


def _checker2(y, x):
    return (y // 2 + x // 2) % 2


def _vstripes2(y, x):
    return (x // 2) % 2 + 0 * y


def _hstripes2(y, x):
    return (y // 2) % 2 + 0 * x


TEXTURES = (_checker, _vstripes, _hstripes, _checker2, _vstripes2, _hstripes2)


@dataclass
class SynthSample:
    image: np.ndarray   # (1, 1, H, W) in [0, 1]
    labels: np.ndarray  # (H, W) int64 in [0, classes)


def synth_dataset(seed: int, n: int, size: int = 64, classes: int = 4) -> List[SynthSample]:
    if size < 32:
        raise ValueError(f"size must be >= 32, got {size}")
    if not 2 <= classes <= len(TEXTURES) + 1:
        raise ValueError(f"classes must be in [2, {len(TEXTURES) + 1}], got {classes}")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size]
    samples = []
    next_class = 1
    for _ in range(n):
        level = rng.uniform(0.3, 0.7)
        gy, gx = rng.uniform(-0.15, 0.15, size=2)
        image = level + gy * (yy / size - 0.5) + gx * (xx / size - 0.5)
        labels = np.zeros((size, size), dtype=np.int64)
        for _ in range(rng.integers(2, 5)):
            c = next_class
            next_class = next_class % (classes - 1) + 1
            h, w = rng.integers(size // 6, size // 2, size=2)
            top, left = rng.integers(0, size - h), rng.integers(0, size - w)
            region = (slice(top, top + h), slice(left, left + w))
            amp = rng.uniform(0.25, 0.5)
            base = rng.uniform(0.3, 0.7)
            pattern = TEXTURES[c - 1](yy[region], xx[region])
            image[region] = base + amp * (pattern - 0.5)
            labels[region] = c
        image = np.clip(image, 0.0, 1.0)
        samples.append(SynthSample(image[None, None].astype(np.float64), labels))
    return samples
