"""Shared value types: images, masks, probability maps, and dataset samples.

All pixel containers wrap numpy arrays that are frozen (non-writeable) after
construction, so instances can be shared freely across workers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import RangeViolation, ShapeMismatch

MIN_IMAGE_DIM = 16


def _frozen(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr)
    if out is arr and arr.flags.writeable:
        out = arr.copy()
    out.setflags(write=False)
    return out


class DomainTag(enum.Enum):
    """Which side of the domain gap a sample belongs to."""

    LABELED_SOURCE = "labeled_source"
    UNLABELED_TARGET = "unlabeled_target"


@dataclass(frozen=True)
class RasterImage:
    """H x W x C image with unit-interval float pixels (C is 1 or 3)."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or px.shape[2] not in (1, 3):
            raise ShapeMismatch(f"image must be HxWxC with C in {{1,3}}, got {px.shape}")
        if px.shape[0] < MIN_IMAGE_DIM or px.shape[1] < MIN_IMAGE_DIM:
            raise ShapeMismatch(f"image dims must be >= {MIN_IMAGE_DIM}, got {px.shape[:2]}")
        if px.min() < 0.0 or px.max() > 1.0:
            raise RangeViolation("image values must lie in [0, 1]")
        object.__setattr__(self, "pixels", _frozen(px))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return self.pixels.shape[2]

    @staticmethod
    def from_uint8(raw: np.ndarray) -> "RasterImage":
        """Build from 8-bit pixel data, scaling by 255."""
        return RasterImage(np.asarray(raw, dtype=np.float64) / 255.0)


@dataclass(frozen=True)
class BinaryMask:
    """H x W mask over {0, 1}; 1 marks vessel foreground."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 2:
            raise ShapeMismatch(f"mask must be HxW, got shape {px.shape}")
        vals = np.unique(px)
        if not np.all(np.isin(vals, (0, 1))):
            raise RangeViolation("mask values must be exactly 0 or 1")
        object.__setattr__(self, "pixels", _frozen(px.astype(np.uint8)))

    @property
    def shape(self) -> tuple:
        return self.pixels.shape

    def foreground_fraction(self) -> float:
        return float(self.pixels.mean())


@dataclass(frozen=True)
class ProbMap:
    """H x W map of foreground probabilities in [0, 1]."""

    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 2:
            raise ShapeMismatch(f"probability map must be HxW, got shape {p.shape}")
        if not np.all(np.isfinite(p)) or p.min() < 0.0 or p.max() > 1.0:
            raise RangeViolation("probabilities must be finite and in [0, 1]")
        object.__setattr__(self, "probs", _frozen(p))

    @property
    def shape(self) -> tuple:
        return self.probs.shape


@dataclass(frozen=True)
class LabeledSample:
    """Image with its ground-truth vessel mask."""

    image: RasterImage
    mask: BinaryMask
    id: str
    domain: DomainTag = DomainTag.LABELED_SOURCE


@dataclass(frozen=True)
class UnlabeledSample:
    """Image without annotation; carries only its domain tag."""

    image: RasterImage
    id: str
    domain: DomainTag = DomainTag.UNLABELED_TARGET


def binarize(p: ProbMap, threshold: float = 0.5) -> BinaryMask:
    """Threshold a probability map: foreground iff prob strictly exceeds threshold."""
    if not 0.0 < threshold < 1.0:
        raise RangeViolation(f"threshold must lie in (0, 1), got {threshold}")
    return BinaryMask((p.probs > threshold).astype(np.uint8))


def validate_sample(sample) -> None:
    """Raise ShapeMismatch/RangeViolation unless the sample's invariants hold.

    Construction already enforces per-array invariants; this checks the
    cross-field ones (image/mask shape agreement).
    """
    if isinstance(sample, LabeledSample):
        img, mask = sample.image, sample.mask
        if (img.height, img.width) != mask.shape:
            raise ShapeMismatch(
                f"mask shape {mask.shape} does not match image {(img.height, img.width)}"
            )
    elif isinstance(sample, UnlabeledSample):
        if getattr(sample, "mask", None) is not None:
            raise RangeViolation("unlabeled sample must not carry a mask")
    else:
        raise TypeError(f"not a sample: {type(sample)!r}")
