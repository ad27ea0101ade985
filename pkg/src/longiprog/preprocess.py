"""Automated fundus preprocessing.

Cropping to the illuminated field, intensity rescaling, bilinear resizing
and laterality flipping, plus the eligibility filter applied to visit
sequences before anything is trained on them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .manifest import ADVANCED, EYES, VisitSequence


class PreprocessError(ValueError):
    pass


@dataclass(frozen=True)
class RawImage:
    pixels: np.ndarray  # H x W x 3, uint8
    laterality: str = "left"
    # crops of a valid image may be smaller than the source minimum
    min_side: int = field(default=16, repr=False, compare=False)

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise PreprocessError(f"raw image must be HxWx3, got {px.shape}")
        if px.dtype != np.uint8:
            raise PreprocessError(f"raw image must be uint8, got {px.dtype}")
        if min(px.shape[:2]) < self.min_side:
            raise PreprocessError(f"raw image too small: {px.shape[:2]}")
        if self.laterality not in EYES:
            raise PreprocessError(f"laterality must be one of {EYES}, got {self.laterality!r}")


@dataclass(frozen=True)
class PreprocessConfig:
    crop_offset: float = 0.04
    target_size: int = 64
    background_estimator: str = "corner-median"

    def __post_init__(self):
        if not 0 < self.crop_offset < 1:
            raise PreprocessError(f"crop_offset must be in (0, 1), got {self.crop_offset}")
        if self.target_size < 16:
            raise PreprocessError(f"target_size must be >= 16, got {self.target_size}")
        if self.background_estimator != "corner-median":
            raise PreprocessError(f"unknown background estimator {self.background_estimator!r}")


def estimate_background(image: RawImage, patch: int = 4) -> np.ndarray:
    """Per-channel median over the four ``patch`` x ``patch`` corner patches."""
    px = image.pixels.astype(np.float64)
    corners = np.concatenate(
        [
            px[:patch, :patch].reshape(-1, 3),
            px[:patch, -patch:].reshape(-1, 3),
            px[-patch:, :patch].reshape(-1, 3),
            px[-patch:, -patch:].reshape(-1, 3),
        ]
    )
    return np.median(corners, axis=0)


def content_box(image: RawImage, config: PreprocessConfig = PreprocessConfig()) -> tuple[int, int, int, int]:
    """Tight (row0, row1, col0, col1) box, half-open, around non-background pixels."""
    bg = estimate_background(image)
    diff = np.abs(image.pixels.astype(np.float64) - bg).max(axis=2) / 255.0
    mask = diff > config.crop_offset
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise PreprocessError("image is background-only: nothing exceeds background + offset")
    return int(rows[0]), int(rows[-1]) + 1, int(cols[0]), int(cols[-1]) + 1


def crop_to_content(image: RawImage, config: PreprocessConfig = PreprocessConfig()) -> RawImage:
    r0, r1, c0, c1 = content_box(image, config)
    return RawImage(image.pixels[r0:r1, c0:c1].copy(), image.laterality, min_side=1)


def rescale_intensity(image: RawImage) -> np.ndarray:
    return image.pixels.astype(np.float64) / 255.0


def _axis_weights(n_in: int, n_out: int):
    # half-pixel centres: src = (dst + 0.5) * n_in / n_out - 0.5, clamped to the edge
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize(image: np.ndarray, target: int | tuple[int, int]) -> np.ndarray:
    """Bilinear resize of an HxW or HxWxC float image."""
    img = np.asarray(image, dtype=np.float64)
    if img.shape[0] < 2 or img.shape[1] < 2:
        raise PreprocessError(f"cannot resize an image smaller than 2x2: {img.shape[:2]}")
    th, tw = (target, target) if isinstance(target, int) else target
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    lo, hi, fr = _axis_weights(img.shape[0], th)
    rows = img[lo] * (1 - fr)[:, None, None] + img[hi] * fr[:, None, None]
    lo, hi, fr = _axis_weights(img.shape[1], tw)
    out = rows[:, lo] * (1 - fr)[None, :, None] + rows[:, hi] * fr[None, :, None]
    return out[:, :, 0] if squeeze else out


def flip_if_right(image: np.ndarray, laterality: str | None) -> np.ndarray:
    if laterality not in EYES:
        raise PreprocessError(f"laterality must be one of {EYES}, got {laterality!r}")
    if laterality == "right":
        return image[:, ::-1].copy()
    return image


def preprocess(image: RawImage, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Full chain: crop, rescale to [0, 1], resize, mirror right eyes."""
    cropped = crop_to_content(image, config)
    scaled = rescale_intensity(cropped)
    return flip_if_right(resize(scaled, config.target_size), image.laterality)


def preprocess_mask(
    mask: np.ndarray, image: RawImage, config: PreprocessConfig = PreprocessConfig()
) -> np.ndarray:
    """Carry a boolean mask drawn on ``image`` through the same geometry."""
    r0, r1, c0, c1 = content_box(image, config)
    m = resize(mask[r0:r1, c0:c1].astype(np.float64), config.target_size) >= 0.5
    return flip_if_right(m, image.laterality)


@dataclass(frozen=True)
class Exclusion:
    eye_id: str
    reason: str


def filter_eligible(records, observed_visits: int = 3):
    """Split records into (eligible, exclusions).

    An eye is kept when it has exactly ``observed_visits`` observed visits,
    a labelled prediction visit, and no advanced diagnosis before the
    prediction visit.
    """
    kept: list[VisitSequence] = []
    log: list[Exclusion] = []
    for rec in records:
        if len(rec.visits) < observed_visits:
            log.append(Exclusion(rec.eye_id, "insufficient visits"))
        elif len(rec.visits) > observed_visits:
            log.append(Exclusion(rec.eye_id, "too many visits"))
        elif any(v.stage == ADVANCED for v in rec.visits):
            log.append(Exclusion(rec.eye_id, "already progressed"))
        elif rec.label not in (0, 1):
            log.append(Exclusion(rec.eye_id, "missing label"))
        else:
            kept.append(rec)
    return kept, log
