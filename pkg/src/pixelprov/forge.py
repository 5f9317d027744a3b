"""Forged-sample synthesis: JPEG format alignment, inpaint blending, copy-move,
splicing, and the label table mapping each source category to its training targets.

All operations are pure functions of their inputs (plus an explicit seed where
randomness is involved), so the batch driver can run them from any number of
workers.
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image


class FormatError(ValueError):
    """Raised when an image violates the expected raster format."""


class SourceCategory(Enum):
    REAL = "real"
    INPAINT = "inpaint"
    INPAINT_BLENDED = "inpaint_blended"
    COPY_MOVE = "copy_move"
    SPLICING = "splicing"


@dataclass(frozen=True)
class LabelConfig:
    """Image-level label plus background/foreground values for the two masks."""

    cls: int
    mani_bg: int
    mani_fg: int
    ai_bg: int
    ai_fg: int


# One row per source category: (cls, mani bg, mani fg, ai bg, ai fg).
# Copy-move and splicing rearrange real pixels, so they count as authentic at
# the image level and contribute nothing to the AI mask.
_LABEL_TABLE = {
    SourceCategory.REAL: LabelConfig(0, 0, 0, 0, 0),
    SourceCategory.INPAINT: LabelConfig(1, 0, 1, 1, 1),
    SourceCategory.INPAINT_BLENDED: LabelConfig(1, 0, 1, 0, 1),
    SourceCategory.COPY_MOVE: LabelConfig(0, 0, 1, 0, 0),
    SourceCategory.SPLICING: LabelConfig(0, 0, 1, 0, 0),
}


def assign_labels(category: SourceCategory) -> LabelConfig:
    """Return the label row for a source category."""
    return _LABEL_TABLE[category]


@dataclass
class MaskPair:
    """Ground-truth masks for one sample: any-manipulation and AI-synthesized.

    Both are uint8 maps over the image plane with values in {0, 1}.
    """

    mask_mani: np.ndarray
    mask_ai: np.ndarray

    def __post_init__(self):
        if self.mask_mani.shape != self.mask_ai.shape:
            raise ValueError(
                f"mask shapes disagree: {self.mask_mani.shape} vs {self.mask_ai.shape}"
            )
        for name, m in (("mask_mani", self.mask_mani), ("mask_ai", self.mask_ai)):
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"{name} contains values outside {{0, 1}}")


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle given as (top, left, height, width)."""

    top: int
    left: int
    height: int
    width: int

    @property
    def bottom(self) -> int:
        return self.top + self.height

    @property
    def right(self) -> int:
        return self.left + self.width


def _check_rgb8(image: np.ndarray, name: str = "image") -> None:
    if not isinstance(image, np.ndarray) or image.ndim != 3 or image.shape[2] != 3:
        shape = getattr(image, "shape", None)
        raise FormatError(f"{name} must be an HxWx3 array, got shape {shape}")
    if image.dtype != np.uint8:
        raise FormatError(f"{name} must be 8-bit (uint8), got {image.dtype}")


def _check_rect(rect: Rect, height: int, width: int, name: str) -> None:
    if rect.height <= 0 or rect.width <= 0:
        raise ValueError(f"{name} has zero or negative area: {rect}")
    if rect.top < 0 or rect.left < 0 or rect.bottom > height or rect.right > width:
        raise ValueError(f"{name} {rect} exceeds image bounds {height}x{width}")


def jpeg_align(image: np.ndarray, quality: int = 96) -> bytes:
    """Encode an RGB raster as a baseline JPEG stream at the given quality.

    Generated images are re-encoded this way (default quality 96) so their
    storage format matches the JPEG statistics of authentic photos.
    """
    _check_rgb8(image)
    if not 1 <= int(quality) <= 100:
        raise ValueError(f"quality must be in [1, 100], got {quality}")
    buf = io.BytesIO()
    Image.fromarray(image).save(buf, format="JPEG", quality=int(quality))
    return buf.getvalue()


def decode_jpeg(data: bytes) -> np.ndarray:
    """Decode a JPEG byte stream to an RGB uint8 raster."""
    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"))


def blend_inpaint(
    original: np.ndarray, inpainted: np.ndarray, mask: np.ndarray
) -> np.ndarray:
    """Paste the original's unmasked pixels back over an inpainted image.

    Hard per-pixel selection: output = inpainted where mask == 1, original
    elsewhere. No feathering, so unmasked pixels stay bit-identical to the
    original.
    """
    _check_rgb8(original, "original")
    if inpainted.shape != original.shape:
        raise ValueError(
            f"inpainted shape {inpainted.shape} disagrees with original {original.shape}"
        )
    if mask.shape != original.shape[:2]:
        raise ValueError(
            f"mask shape {mask.shape} disagrees with original plane {original.shape[:2]}"
        )
    keep = mask.astype(bool)
    return np.where(keep[..., None], inpainted, original)


def copy_move(
    image: np.ndarray, src_rect: Rect, dst_origin: tuple[int, int]
) -> tuple[np.ndarray, MaskPair]:
    """Duplicate a rectangle of the image at a new position.

    The manipulation mask marks the full destination rectangle, whether or not
    the pasted pixels happen to equal what they overwrote; the AI mask is zero
    because no pixel is synthesized.
    """
    _check_rgb8(image)
    h, w = image.shape[:2]
    _check_rect(src_rect, h, w, "src_rect")
    dst_rect = Rect(dst_origin[0], dst_origin[1], src_rect.height, src_rect.width)
    _check_rect(dst_rect, h, w, "destination rect")

    forged = image.copy()
    patch = image[src_rect.top : src_rect.bottom, src_rect.left : src_rect.right]
    forged[dst_rect.top : dst_rect.bottom, dst_rect.left : dst_rect.right] = patch

    mask_mani = np.zeros((h, w), dtype=np.uint8)
    mask_mani[dst_rect.top : dst_rect.bottom, dst_rect.left : dst_rect.right] = 1
    return forged, MaskPair(mask_mani, np.zeros((h, w), dtype=np.uint8))


def splice(
    base: np.ndarray,
    donor: np.ndarray,
    donor_rect: Rect,
    dst_origin: tuple[int, int],
) -> tuple[np.ndarray, MaskPair]:
    """Paste a rectangle from a donor image into the base image."""
    _check_rgb8(base, "base")
    _check_rgb8(donor, "donor")
    _check_rect(donor_rect, donor.shape[0], donor.shape[1], "donor_rect")
    h, w = base.shape[:2]
    dst_rect = Rect(dst_origin[0], dst_origin[1], donor_rect.height, donor_rect.width)
    _check_rect(dst_rect, h, w, "destination rect")

    forged = base.copy()
    patch = donor[donor_rect.top : donor_rect.bottom, donor_rect.left : donor_rect.right]
    forged[dst_rect.top : dst_rect.bottom, dst_rect.left : dst_rect.right] = patch

    mask_mani = np.zeros((h, w), dtype=np.uint8)
    mask_mani[dst_rect.top : dst_rect.bottom, dst_rect.left : dst_rect.right] = 1
    return forged, MaskPair(mask_mani, np.zeros((h, w), dtype=np.uint8))


def synth_inpaint_stub(
    image: np.ndarray,
    mask: np.ndarray,
    seed: int,
    outside_jitter: int = 2,
    block: int = 8,
) -> np.ndarray:
    """Deterministic stand-in for a diffusion inpainter.

    Masked pixels are replaced with seeded structured noise (coarse blocks plus
    fine grain); unmasked pixels get a small +/- jitter, mimicking the subtle
    whole-image changes a generative round trip introduces. Mean absolute
    perturbation outside the mask stays <= `outside_jitter` levels.
    """
    _check_rgb8(image)
    if mask.shape != image.shape[:2]:
        raise ValueError(
            f"mask shape {mask.shape} disagrees with image plane {image.shape[:2]}"
        )
    h, w = image.shape[:2]
    rng = np.random.default_rng(seed)

    coarse = rng.integers(0, 256, size=((h + block - 1) // block, (w + block - 1) // block, 3))
    coarse = np.repeat(np.repeat(coarse, block, axis=0), block, axis=1)[:h, :w]
    grain = rng.normal(0.0, 24.0, size=(h, w, 3))
    filled = np.clip(0.6 * coarse + 0.4 * 128.0 + grain, 0, 255).astype(np.uint8)

    jitter = rng.integers(-outside_jitter, outside_jitter + 1, size=(h, w, 3))
    outside = np.clip(image.astype(np.int16) + jitter, 0, 255).astype(np.uint8)

    inside = mask.astype(bool)
    return np.where(inside[..., None], filled, outside)


def target_masks(category: SourceCategory, region: np.ndarray) -> MaskPair:
    """Build the ground-truth mask pair from a manipulated-region map.

    `region` marks the operated-on pixels; the label table decides what each
    mask's background and foreground get. In particular the AI mask for plain
    inpainting is all ones, since the whole image passes through the generator.
    """
    row = assign_labels(category)
    region = region.astype(bool)
    mani = np.where(region, row.mani_fg, row.mani_bg).astype(np.uint8)
    ai = np.where(region, row.ai_fg, row.ai_bg).astype(np.uint8)
    return MaskPair(mani, ai)


def save_mask(path: str | Path, mask: np.ndarray) -> None:
    """Write a {0,1} mask as a single-channel PNG with values {0, 255}."""
    if not np.isin(mask, (0, 1)).all():
        raise ValueError("mask contains values outside {0, 1}")
    Image.fromarray((mask.astype(np.uint8) * 255)).save(path, format="PNG")


def load_mask(path: str | Path) -> np.ndarray:
    """Read a {0,255} PNG mask back to a {0,1} uint8 map."""
    with Image.open(path) as im:
        raw = np.asarray(im.convert("L"))
    if not np.isin(raw, (0, 255)).all():
        raise FormatError(f"mask file {path} contains values outside {{0, 255}}")
    return (raw == 255).astype(np.uint8)


def _random_rect(rng: np.random.Generator, h: int, w: int,
                 min_frac: float = 0.15, max_frac: float = 0.45) -> Rect:
    rh = int(rng.integers(max(2, int(h * min_frac)), max(3, int(h * max_frac)) + 1))
    rw = int(rng.integers(max(2, int(w * min_frac)), max(3, int(w * max_frac)) + 1))
    rh, rw = min(rh, h), min(rw, w)
    top = int(rng.integers(0, h - rh + 1))
    left = int(rng.integers(0, w - rw + 1))
    return Rect(top, left, rh, rw)


def _random_region(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    # Union of one or two rectangles; polygonal masks are a config extension point.
    region = np.zeros((h, w), dtype=np.uint8)
    for _ in range(int(rng.integers(1, 3))):
        r = _random_rect(rng, h, w)
        region[r.top : r.bottom, r.left : r.right] = 1
    return region


_FORGE_OPS = ("copymove", "splice", "blend", "inpaint")

_OP_CATEGORY = {
    "copymove": SourceCategory.COPY_MOVE,
    "splice": SourceCategory.SPLICING,
    "blend": SourceCategory.INPAINT_BLENDED,
    "inpaint": SourceCategory.INPAINT,
}


def list_images(input_dir: str | Path) -> list[Path]:
    """All JPEG/PNG files directly under a directory, sorted by name."""
    input_dir = Path(input_dir)
    exts = {".jpg", ".jpeg", ".png"}
    return sorted(p for p in input_dir.iterdir() if p.suffix.lower() in exts)


def forge_dataset(
    input_dir: str | Path,
    output_dir: str | Path,
    ops: tuple[str, ...] = _FORGE_OPS,
    n: int | None = None,
    jpeg_quality: int = 96,
    seed: int = 0,
    include_real: bool = False,
    split: str = "train",
):
    """Forge a dataset from an authentic-image corpus and write it to disk.

    Produces `n` forged samples cycling through the requested ops (default one
    pass over the corpus per op), re-encodes every output image as JPEG at
    `jpeg_quality`, writes masks as {0,255} PNGs, and returns the manifest.
    With `include_real`, an aligned copy of each source image is added as an
    authentic sample. Fully deterministic per (corpus, ops, n, seed).
    """
    from . import datapipe  # deferred: datapipe imports our types

    ops = tuple(ops)
    for op in ops:
        if op not in _FORGE_OPS:
            raise ValueError(f"unknown forge op '{op}', expected one of {_FORGE_OPS}")
    if not ops:
        raise ValueError("at least one forge op is required")

    sources = list_images(input_dir)
    if not sources:
        raise FileNotFoundError(f"no JPEG/PNG images under {input_dir}")
    if n is None:
        n = len(sources) * len(ops)

    output_dir = Path(output_dir)
    (output_dir / "images").mkdir(parents=True, exist_ok=True)
    (output_dir / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(sources))
    records = []

    def write_sample(idx, image, pair: MaskPair | None, category: SourceCategory):
        stem = f"{idx:05d}_{category.value}"
        img_rel = f"images/{stem}.jpg"
        (output_dir / img_rel).write_bytes(jpeg_align(image, jpeg_quality))
        mani_rel = ai_rel = None
        if pair is not None and pair.mask_mani.any():
            mani_rel = f"masks/{stem}_mani.png"
            save_mask(output_dir / mani_rel, pair.mask_mani)
        if pair is not None and pair.mask_ai.any():
            ai_rel = f"masks/{stem}_ai.png"
            save_mask(output_dir / ai_rel, pair.mask_ai)
        records.append(
            datapipe.SampleRecord(
                image_path=img_rel,
                mask_mani_path=mani_rel,
                mask_ai_path=ai_rel,
                cls_label=assign_labels(category).cls,
                category=category,
                split=split,
            )
        )

    for i in range(n):
        op = ops[i % len(ops)]
        src_path = sources[order[i % len(sources)]]
        image = np.asarray(Image.open(src_path).convert("RGB"))
        h, w = image.shape[:2]
        category = _OP_CATEGORY[op]
        sample_seed = int(rng.integers(0, 2**31 - 1))

        if op == "copymove":
            r = _random_rect(rng, h, w)
            dst = (int(rng.integers(0, h - r.height + 1)), int(rng.integers(0, w - r.width + 1)))
            forged, pair = copy_move(image, r, dst)
        elif op == "splice":
            donor_path = sources[order[(i + 1) % len(sources)]]
            donor = np.asarray(Image.open(donor_path).convert("RGB"))
            dh, dw = donor.shape[:2]
            r = _random_rect(rng, min(h, dh), min(w, dw))
            dst = (int(rng.integers(0, h - r.height + 1)), int(rng.integers(0, w - r.width + 1)))
            forged, pair = splice(image, donor, r, dst)
        else:
            region = _random_region(rng, h, w)
            stub = synth_inpaint_stub(image, region, sample_seed)
            forged = blend_inpaint(image, stub, region) if op == "blend" else stub
            pair = target_masks(category, region)

        write_sample(i, forged, pair, category)

    if include_real:
        for j, src_path in enumerate(sources):
            image = np.asarray(Image.open(src_path).convert("RGB"))
            write_sample(n + j, image, None, SourceCategory.REAL)

    manifest = datapipe.Manifest(records=records, root=output_dir)
    manifest.save(output_dir / "manifest.tsv")
    return manifest
