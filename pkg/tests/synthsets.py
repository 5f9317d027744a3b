"""Synthetic images and datasets shared across the test suite."""

from __future__ import annotations

import numpy as np
from PIL import Image, ImageFilter

from pixelprov import forge
from pixelprov.datapipe import Sample
from pixelprov.forge import SourceCategory, blend_inpaint, synth_inpaint_stub, target_masks


def smooth_image(rng: np.random.Generator, size: int = 64) -> np.ndarray:
    """Smooth-ish authentic stand-in: blurred noise plus random gradients."""
    base = rng.normal(127, 30, size=(size, size, 3))
    gx = np.linspace(0, 60, size)[None, :, None] * rng.uniform(-1, 1)
    gy = np.linspace(0, 60, size)[:, None, None] * rng.uniform(-1, 1)
    img = np.clip(base * 0.3 + 100 + gx + gy, 0, 255).astype(np.uint8)
    return np.asarray(Image.fromarray(img).filter(ImageFilter.GaussianBlur(2)))


def blended_sample(rng: np.random.Generator, size: int = 64,
                   min_frac: float = 0.3, max_frac: float = 0.55) -> Sample:
    """One inpaint-blended sample with a rectangular synthetic region."""
    img = smooth_image(rng, size)
    region = np.zeros((size, size), np.uint8)
    r = forge._random_rect(rng, size, size, min_frac, max_frac)
    region[r.top : r.bottom, r.left : r.right] = 1
    stub = synth_inpaint_stub(img, region, seed=int(rng.integers(1 << 30)))
    forged = blend_inpaint(img, stub, region)
    pair = target_masks(SourceCategory.INPAINT_BLENDED, region)
    return Sample(forged, pair.mask_mani, pair.mask_ai, 1, SourceCategory.INPAINT_BLENDED)


def real_sample(rng: np.random.Generator, size: int = 64) -> Sample:
    img = smooth_image(rng, size)
    zeros = np.zeros((size, size), np.uint8)
    return Sample(img, zeros, zeros.copy(), 0, SourceCategory.REAL)


def separable_set(seed: int = 0, n: int = 32, size: int = 64) -> list[Sample]:
    """Half authentic, half inpaint-blended; easy to fit at toy scale."""
    rng = np.random.default_rng(seed)
    return [
        real_sample(rng, size) if i % 2 == 0 else blended_sample(rng, size)
        for i in range(n)
    ]


def write_corpus(directory, n: int = 6, size: int = 64, seed: int = 0) -> list:
    """Write `n` smooth PNG images; returns their paths."""
    rng = np.random.default_rng(seed)
    paths = []
    for i in range(n):
        path = directory / f"src_{i:03d}.png"
        Image.fromarray(smooth_image(rng, size)).save(path)
        paths.append(path)
    return paths
