"""Manifest-driven dataset access plus the crop/augmentation pipeline.

A manifest is a tab-separated text file, one sample per line:

    image_path <TAB> mask_mani_path <TAB> mask_ai_path <TAB> cls <TAB> category <TAB> split

Paths are relative to the manifest's root directory; `-` marks an absent mask,
which is read as an all-zero map of the image's size. This module is
numpy/PIL only; tensor conversion happens in the trainer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from PIL import Image, ImageEnhance, ImageFilter

from .forge import SourceCategory, assign_labels, decode_jpeg, jpeg_align, load_mask


class ManifestError(ValueError):
    """Raised for structurally invalid manifests or records."""


@dataclass
class SampleRecord:
    image_path: str
    mask_mani_path: str | None
    mask_ai_path: str | None
    cls_label: int
    category: SourceCategory
    split: str


@dataclass
class Sample:
    """A loaded sample: image plus its two ground-truth masks."""

    image: np.ndarray        # HxWx3 uint8
    mask_mani: np.ndarray    # HxW uint8 in {0,1}
    mask_ai: np.ndarray      # HxW uint8 in {0,1}
    cls_label: int
    category: SourceCategory


_SPLITS = ("train", "val", "test")


@dataclass
class Manifest:
    records: list[SampleRecord]
    root: Path

    def __len__(self) -> int:
        return len(self.records)

    def split_counts(self) -> dict[str, int]:
        counts = {s: 0 for s in _SPLITS}
        for r in self.records:
            counts[r.split] += 1
        return counts

    def category_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for r in self.records:
            counts[r.category.value] = counts.get(r.category.value, 0) + 1
        return counts

    def subset(self, split: str | None = None,
               categories: set[SourceCategory] | None = None) -> "Manifest":
        recs = [
            r for r in self.records
            if (split is None or r.split == split)
            and (categories is None or r.category in categories)
        ]
        return Manifest(records=recs, root=self.root)

    def save(self, path: str | Path) -> None:
        lines = []
        for r in self.records:
            lines.append("\t".join([
                r.image_path,
                r.mask_mani_path or "-",
                r.mask_ai_path or "-",
                str(r.cls_label),
                r.category.value,
                r.split,
            ]))
        Path(path).write_text("\n".join(lines) + ("\n" if lines else ""), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, root: str | Path | None = None) -> "Manifest":
        """Parse and validate a manifest file.

        Every referenced file must exist and each record's cls label must match
        the label table for its category; violations name the offending line.
        """
        path = Path(path)
        root = Path(root) if root is not None else path.parent
        records = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 6:
                raise ManifestError(f"{path}:{lineno}: expected 6 tab-separated fields, got {len(fields)}")
            img, mani, ai, cls_s, cat_s, split = fields
            try:
                category = SourceCategory(cat_s)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: unknown category '{cat_s}'") from None
            if split not in _SPLITS:
                raise ManifestError(f"{path}:{lineno}: unknown split '{split}'")
            try:
                cls_label = int(cls_s)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: cls label '{cls_s}' is not an integer") from None
            if cls_label != assign_labels(category).cls:
                raise ManifestError(
                    f"{path}:{lineno}: cls label {cls_label} contradicts category "
                    f"'{cat_s}' (expected {assign_labels(category).cls})"
                )
            record = SampleRecord(
                image_path=img,
                mask_mani_path=None if mani == "-" else mani,
                mask_ai_path=None if ai == "-" else ai,
                cls_label=cls_label,
                category=category,
                split=split,
            )
            for p in (record.image_path, record.mask_mani_path, record.mask_ai_path):
                if p is not None and not (root / p).exists():
                    raise ManifestError(f"{path}:{lineno}: referenced file missing: {p}")
            records.append(record)
        return cls(records=records, root=root)


def load_sample(record: SampleRecord, root: str | Path) -> Sample:
    root = Path(root)
    with Image.open(root / record.image_path) as im:
        image = np.asarray(im.convert("RGB"))
    h, w = image.shape[:2]

    def read(path):
        if path is None:
            return np.zeros((h, w), dtype=np.uint8)
        mask = load_mask(root / path)
        if mask.shape != (h, w):
            raise ManifestError(
                f"mask {path} shape {mask.shape} disagrees with image {(h, w)}"
            )
        return mask

    return Sample(
        image=image,
        mask_mani=read(record.mask_mani_path),
        mask_ai=read(record.mask_ai_path),
        cls_label=record.cls_label,
        category=record.category,
    )


def epoch_subsample(manifest: Manifest, fraction: float, seed: int) -> Manifest:
    """Draw ceil(fraction * N) records without replacement, seeded.

    Large corpora are trained on a freshly drawn subset each epoch; pass a
    per-epoch seed (see `derive_seed`) so different epochs draw independently.
    """
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    n = len(manifest.records)
    if n == 0:
        raise ManifestError("cannot subsample an empty manifest")
    k = math.ceil(fraction * n)
    order = np.random.default_rng(seed).permutation(n)[:k]
    return Manifest(records=[manifest.records[i] for i in order], root=manifest.root)


def derive_seed(base: int, *keys: int) -> int:
    """Stable sub-seed for (base, keys), independent across key tuples."""
    return int(np.random.SeedSequence([int(base), *map(int, keys)]).generate_state(1)[0])


def with_val_holdout(manifest: Manifest, fraction: float = 0.05, seed: int = 0) -> Manifest:
    """Reassign a per-category fraction of train records to the val split."""
    by_cat: dict[SourceCategory, list[int]] = {}
    for i, r in enumerate(manifest.records):
        if r.split == "train":
            by_cat.setdefault(r.category, []).append(i)
    val_idx = set()
    for cat, idxs in sorted(by_cat.items(), key=lambda kv: kv[0].value):
        k = math.ceil(fraction * len(idxs))
        rng = np.random.default_rng(derive_seed(seed, hash(cat.value) & 0x7FFFFFFF))
        val_idx.update(idxs[i] for i in rng.permutation(len(idxs))[:k])
    records = [
        replace(r, split="val") if i in val_idx else r
        for i, r in enumerate(manifest.records)
    ]
    return Manifest(records=records, root=manifest.root)


def _resize(sample: Sample, new_h: int, new_w: int) -> Sample:
    # Bilinear for the image, nearest for masks so they stay binary.
    image = np.asarray(Image.fromarray(sample.image).resize((new_w, new_h), Image.BILINEAR))
    masks = [
        np.asarray(Image.fromarray(m * 255).resize((new_w, new_h), Image.NEAREST)) // 255
        for m in (sample.mask_mani, sample.mask_ai)
    ]
    return replace(sample, image=image, mask_mani=masks[0].astype(np.uint8),
                   mask_ai=masks[1].astype(np.uint8))


def _ensure_min_side(sample: Sample, size: int) -> Sample:
    h, w = sample.image.shape[:2]
    if min(h, w) >= size:
        return sample
    if h <= w:
        return _resize(sample, size, math.ceil(w * size / h))
    return _resize(sample, math.ceil(h * size / w), size)


def _pad_and_crop(sample: Sample, size: int, pad: int, top: int, left: int) -> Sample:
    image = np.pad(sample.image, ((pad, pad), (pad, pad), (0, 0)))
    mani = np.pad(sample.mask_mani, pad)
    ai = np.pad(sample.mask_ai, pad)
    return replace(
        sample,
        image=image[top : top + size, left : left + size],
        mask_mani=mani[top : top + size, left : left + size],
        mask_ai=ai[top : top + size, left : left + size],
    )


def random_crop(sample: Sample, size: int = 512, pad: int = 1, seed: int = 0) -> Sample:
    """Zero-pad each border by `pad`, then cut a random size x size window.

    The identical window is applied to the image and both masks. Inputs whose
    shorter side is below `size` are first resized so the window always fits.
    """
    sample = _ensure_min_side(sample, size)
    h, w = sample.image.shape[:2]
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h + 2 * pad - size + 1))
    left = int(rng.integers(0, w + 2 * pad - size + 1))
    return _pad_and_crop(sample, size, pad, top, left)


def center_crop(sample: Sample, size: int = 512, pad: int = 1) -> Sample:
    """Deterministic centered counterpart of `random_crop` for evaluation.

    Images smaller than the target are resized so the shorter side equals
    `size` before cropping, which avoids windows dominated by padding.
    """
    sample = _ensure_min_side(sample, size)
    h, w = sample.image.shape[:2]
    top = (h + 2 * pad - size) // 2
    left = (w + 2 * pad - size) // 2
    return _pad_and_crop(sample, size, pad, top, left)


@dataclass
class AugmentPolicy:
    """Per-op probabilities and ranges for label-preserving augmentation.

    The four families are gaussian blur, color jitter, horizontal flip, and
    JPEG recompression. Only the flip is geometric and also touches the masks.
    """

    flip_prob: float = 0.5
    blur_prob: float = 0.5
    blur_sigma: tuple[float, float] = (0.0, 2.0)
    jitter_prob: float = 0.3
    jitter_strength: float = 0.2
    jpeg_prob: float = 0.3
    jpeg_quality: tuple[int, int] = (60, 100)


def augment(sample: Sample, policy: AugmentPolicy, seed: int = 0) -> Sample:
    """Apply the augmentation policy; labels and mask geometry stay consistent."""
    rng = np.random.default_rng(seed)
    image = sample.image
    mask_mani, mask_ai = sample.mask_mani, sample.mask_ai

    if rng.random() < policy.flip_prob:
        image = image[:, ::-1].copy()
        mask_mani = mask_mani[:, ::-1].copy()
        mask_ai = mask_ai[:, ::-1].copy()

    if rng.random() < policy.blur_prob:
        sigma = rng.uniform(*policy.blur_sigma)
        if sigma > 0:
            pil = Image.fromarray(image).filter(ImageFilter.GaussianBlur(radius=sigma))
            image = np.asarray(pil)

    if rng.random() < policy.jitter_prob:
        pil = Image.fromarray(image)
        s = policy.jitter_strength
        for enhancer in (ImageEnhance.Brightness, ImageEnhance.Contrast, ImageEnhance.Color):
            pil = enhancer(pil).enhance(rng.uniform(1 - s, 1 + s))
        image = np.asarray(pil)

    if rng.random() < policy.jpeg_prob:
        quality = int(rng.integers(policy.jpeg_quality[0], policy.jpeg_quality[1] + 1))
        image = decode_jpeg(jpeg_align(image, quality))

    return replace(sample, image=image, mask_mani=mask_mani, mask_ai=mask_ai)
