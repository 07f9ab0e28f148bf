"""Regional dropout (self-mix, cutout, cutmix), light augmentation and label smoothing.

All functions are pure: they take a batch and a ``numpy.random.Generator``
and return a new batch, leaving the input untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import NamedTuple, Optional

import numpy as np

from .errors import InvalidArgumentError, UnsatisfiablePlacementError


class PatchRegion(NamedTuple):
    """Axis-aligned rectangle; ``x`` indexes columns and ``y`` rows."""

    x: int
    y: int
    w: int
    h: int

    @property
    def area(self) -> int:
        return self.w * self.h

    def slices(self):
        return slice(self.y, self.y + self.h), slice(self.x, self.x + self.w)

    def valid_in(self, height: int, width: int) -> bool:
        return (self.w >= 0 and self.h >= 0 and 0 <= self.x and self.x + self.w <= width
                and 0 <= self.y and self.y + self.h <= height)


@dataclass
class ImageBatch:
    """Images ``[N, C, H, W]`` in [0, 1] with integer labels.

    ``mix_labels``/``mix_lambda`` are set by cutmix: image ``i`` carries
    weight ``1 - mix_lambda[i]`` on ``labels[i]`` and ``mix_lambda[i]`` on
    ``mix_labels[i]``.
    """

    pixels: np.ndarray
    labels: np.ndarray
    mix_labels: Optional[np.ndarray] = None
    mix_lambda: Optional[np.ndarray] = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.pixels.ndim != 4 or len(self.labels) != len(self.pixels):
            raise InvalidArgumentError("pixels must be [N,C,H,W] with one label per image")
        if self.pixels.size and (self.pixels.min() < 0.0 or self.pixels.max() > 1.0):
            raise InvalidArgumentError("pixels must lie in [0, 1]")
        if self.mix_lambda is not None and np.any((self.mix_lambda < 0) | (self.mix_lambda > 1)):
            raise InvalidArgumentError("mix lambda must lie in [0, 1]")

    def __len__(self):
        return len(self.labels)

    def label_rows(self, num_classes: int, smoothing: float = 0.0) -> np.ndarray:
        """Per-image label distributions: one-hot, cutmix-mixed, then smoothed."""
        rows = np.zeros((len(self), num_classes), dtype=np.float64)
        idx = np.arange(len(self))
        if self.mix_lambda is None:
            rows[idx, self.labels] = 1.0
        else:
            rows[idx, self.labels] += 1.0 - self.mix_lambda
            rows[idx, self.mix_labels] += self.mix_lambda
        if smoothing:
            rows = label_smooth(rows, smoothing)
        return rows


def label_smooth(onehot: np.ndarray, eps: float = 0.1) -> np.ndarray:
    if not 0.0 <= eps < 1.0:
        raise InvalidArgumentError("smoothing epsilon must lie in [0, 1)")
    k = onehot.shape[-1]
    return (1.0 - eps) * onehot + eps / k


def _clipped_span(center: int, length: int, limit: int):
    lo = center - length // 2
    return max(lo, 0), min(lo + length, limit)


def sample_destination(rng: np.random.Generator, height: int, width: int,
                       len_h: int, len_w: int) -> PatchRegion:
    """Uniform patch center, then clip the patch to the image."""
    if not (0 < len_h <= height and 0 < len_w <= width):
        raise InvalidArgumentError(f"patch {len_h}x{len_w} does not fit image {height}x{width}")
    cx = int(rng.integers(0, width))
    cy = int(rng.integers(0, height))
    x1, x2 = _clipped_span(cx, len_w, width)
    y1, y2 = _clipped_span(cy, len_h, height)
    return PatchRegion(x1, y1, x2 - x1, y2 - y1)


def sample_self_mix_regions(rng: np.random.Generator, height: int, width: int,
                            len_h: int, len_w: int):
    """Sample ``(src, dst)`` regions for one self-mix application.

    The destination may shrink at the image border; the source takes the
    clipped size, lies fully inside the image and is redrawn until its
    top-left corner differs from the destination's.
    """
    dst = sample_destination(rng, height, width, len_h, len_w)
    free_x, free_y = width - dst.w, height - dst.h
    if free_x == 0 and free_y == 0:
        raise UnsatisfiablePlacementError(
            f"a {dst.h}x{dst.w} patch fills the {height}x{width} image; no distinct source exists")
    while True:
        sx = int(rng.integers(0, free_x + 1))
        sy = int(rng.integers(0, free_y + 1))
        if sx != dst.x or sy != dst.y:
            return PatchRegion(sx, sy, dst.w, dst.h), dst


def apply_patch_swap(img: np.ndarray, dst: PatchRegion, src: PatchRegion) -> np.ndarray:
    """Copy the ``src`` patch of ``img`` onto ``dst``, reading from the original."""
    if (dst.w, dst.h) != (src.w, src.h):
        raise InvalidArgumentError(f"region sizes differ: {dst} vs {src}")
    _, height, width = img.shape
    if not (dst.valid_in(height, width) and src.valid_in(height, width)):
        raise InvalidArgumentError("region outside image")
    out = img.copy()
    out[(slice(None),) + dst.slices()] = img[(slice(None),) + src.slices()]
    return out


def _patch_lengths(height: int, width: int, patch_frac: float):
    if not 0.0 < patch_frac <= 1.0:
        raise InvalidArgumentError("patch_frac must lie in (0, 1]")
    return max(1, int(round(patch_frac * height))), max(1, int(round(patch_frac * width)))


def _applies(rng, prob):
    return prob >= 1.0 or rng.random() < prob


def self_mix(batch: ImageBatch, rng: np.random.Generator, patch_frac: float = 0.5,
             prob: float = 1.0) -> ImageBatch:
    """Replace one patch of every image with another patch of the same image."""
    _, _, height, width = batch.pixels.shape
    len_h, len_w = _patch_lengths(height, width, patch_frac)
    out = batch.pixels.copy()
    for i in range(len(batch)):
        if not _applies(rng, prob):
            continue
        src, dst = sample_self_mix_regions(rng, height, width, len_h, len_w)
        out[i] = apply_patch_swap(batch.pixels[i], dst, src)
    return replace(batch, pixels=out)


def cutout(batch: ImageBatch, rng: np.random.Generator, patch_frac: float = 0.5,
           prob: float = 1.0) -> ImageBatch:
    _, _, height, width = batch.pixels.shape
    len_h, len_w = _patch_lengths(height, width, patch_frac)
    out = batch.pixels.copy()
    for i in range(len(batch)):
        if not _applies(rng, prob):
            continue
        region = sample_destination(rng, height, width, len_h, len_w)
        out[(i, slice(None)) + region.slices()] = 0.0
    return replace(batch, pixels=out)


def paste_regions(batch: ImageBatch, partners: np.ndarray, regions) -> ImageBatch:
    """Cutmix core: image ``i`` receives ``regions[i]`` of image ``partners[i]``."""
    _, _, height, width = batch.pixels.shape
    out = batch.pixels.copy()
    lam = np.zeros(len(batch), dtype=np.float64)
    for i, (j, region) in enumerate(zip(partners, regions)):
        out[(i, slice(None)) + region.slices()] = batch.pixels[(j, slice(None)) + region.slices()]
        lam[i] = region.area / (height * width)
    return ImageBatch(out, batch.labels.copy(), batch.labels[partners].copy(), lam)


def cutmix(batch: ImageBatch, rng: np.random.Generator, patch_frac: float = 0.5,
           prob: float = 1.0) -> ImageBatch:
    """Paste a region from a shuffled partner image; lambda is the pasted area fraction."""
    if len(batch) < 2:
        raise InvalidArgumentError("cutmix needs a batch of at least 2 images")
    _, _, height, width = batch.pixels.shape
    len_h, len_w = _patch_lengths(height, width, patch_frac)
    partners = rng.permutation(len(batch))
    regions = []
    for _ in range(len(batch)):
        if _applies(rng, prob):
            regions.append(sample_destination(rng, height, width, len_h, len_w))
        else:
            regions.append(PatchRegion(0, 0, 0, 0))
    return paste_regions(batch, partners, regions)


def light_augment(batch: ImageBatch, rng: np.random.Generator, crop_pad: int = 4,
                  jitter: float = 0.2, hflip_prob: float = 0.5) -> ImageBatch:
    """Random horizontal flip, zero-pad-and-crop, and per-channel affine color jitter."""
    if crop_pad < 0:
        raise InvalidArgumentError("crop_pad must be >= 0")
    n, c, height, width = batch.pixels.shape
    out = np.empty_like(batch.pixels)
    for i in range(n):
        img = batch.pixels[i]
        if rng.random() < hflip_prob:
            img = img[:, :, ::-1]
        if crop_pad:
            padded = np.pad(img, ((0, 0), (crop_pad, crop_pad), (crop_pad, crop_pad)))
            oy, ox = rng.integers(0, 2 * crop_pad + 1, size=2)
            img = padded[:, oy:oy + height, ox:ox + width]
        if jitter:
            a = rng.uniform(1.0 - jitter, 1.0 + jitter, size=(c, 1, 1))
            b = rng.uniform(-jitter, jitter, size=(c, 1, 1))
            img = np.clip(a * img + b, 0.0, 1.0)
        out[i] = img
    return replace(batch, pixels=out)


REGIONAL_DROPOUTS = {
    "none": None,
    "selfmix": self_mix,
    "cutout": cutout,
    "cutmix": cutmix,
}


def regional_dropout(batch: ImageBatch, mode: str, rng: np.random.Generator,
                     patch_frac: float = 0.5, prob: float = 1.0) -> ImageBatch:
    if mode not in REGIONAL_DROPOUTS:
        raise InvalidArgumentError(f"unknown regional dropout {mode!r}")
    fn = REGIONAL_DROPOUTS[mode]
    if fn is None:
        return batch
    return fn(batch, rng, patch_frac=patch_frac, prob=prob)
