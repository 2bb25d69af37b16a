"""Dataset indexing, patch extraction/stitching, and paired augmentation.

Geometric ("standard") augmentation moves pixels and is applied identically
to image and mask; "soft" augmentation is strictly photometric so teacher
predictions on softly-augmented copies stay aligned per pixel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib.colors as mcolors
import numpy as np
import torch
from scipy import ndimage

from .errors import EmptyDataset, GridMismatch, PatchTooLarge, ShapeMismatch
from .types import ProbMap


@dataclass(frozen=True)
class PatchGrid:
    """Row-major patch origins covering an H x W source."""

    patch_size: int
    stride: int
    origins: tuple
    source_shape: tuple

    def __len__(self) -> int:
        return len(self.origins)


def make_grid(height: int, width: int, patch_size: int, stride: int | None = None) -> PatchGrid:
    """Tile (height, width) with patches; trailing origins are clamped in-bounds
    so edge patches overlap instead of falling off."""
    stride = patch_size if stride is None else stride
    if patch_size > min(height, width):
        raise PatchTooLarge(f"patch {patch_size} exceeds source {height}x{width}")

    def starts(dim: int) -> list:
        s = list(range(0, dim - patch_size + 1, stride))
        if s[-1] != dim - patch_size:
            s.append(dim - patch_size)
        return s

    origins = tuple((r, c) for r in starts(height) for c in starts(width))
    return PatchGrid(patch_size, stride, origins, (height, width))


def _pixels(arr):
    if hasattr(arr, "pixels"):
        return arr.pixels
    if hasattr(arr, "probs"):
        return arr.probs
    return np.asarray(arr)


def extract_patches(img, grid: PatchGrid) -> list:
    """One patch (copy) per grid origin."""
    a = _pixels(img)
    if a.shape[:2] != grid.source_shape:
        raise GridMismatch(f"grid built for {grid.source_shape}, got array {a.shape[:2]}")
    p = grid.patch_size
    return [np.array(a[r : r + p, c : c + p]) for (r, c) in grid.origins]


def stitch_patches(preds, grid: PatchGrid) -> ProbMap:
    """Reassemble per-patch predictions; overlapping regions are averaged."""
    if len(preds) != len(grid.origins):
        raise GridMismatch(f"{len(preds)} predictions for {len(grid.origins)} origins")
    h, w = grid.source_shape
    acc = np.zeros((h, w), dtype=np.float64)
    cnt = np.zeros((h, w), dtype=np.float64)
    p = grid.patch_size
    for pred, (r, c) in zip(preds, grid.origins):
        a = _pixels(pred)
        if a.shape != (p, p):
            raise GridMismatch(f"prediction shape {a.shape} != patch {p}x{p}")
        acc[r : r + p, c : c + p] += a
        cnt[r : r + p, c : c + p] += 1.0
    if np.any(cnt == 0):
        raise GridMismatch("grid does not cover the full source")
    return ProbMap(acc / cnt)


@dataclass(frozen=True)
class StandardAugment:
    """Geometric transforms shared by image and mask."""

    crop_prob: float = 0.5
    crop_scale: tuple = (0.75, 1.0)
    hflip_prob: float = 0.5
    vflip_prob: float = 0.5
    rotation_prob: float = 0.5
    rotation_degrees: float = 30.0


@dataclass(frozen=True)
class SoftAugment:
    """Photometric-only jitter (never moves pixels)."""

    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2
    hue: float = 0.05
    grayscale_prob: float = 0.2


@dataclass(frozen=True)
class AugmentationSpec:
    standard: StandardAugment = field(default_factory=StandardAugment)
    soft: SoftAugment = field(default_factory=SoftAugment)


def _resize(arr: np.ndarray, out_hw: tuple, mode: str) -> np.ndarray:
    t = torch.from_numpy(np.ascontiguousarray(arr, dtype=np.float32))
    t = t[None, None] if t.ndim == 2 else t.permute(2, 0, 1)[None]
    kwargs = {} if mode == "nearest" else {"align_corners": False}
    out = torch.nn.functional.interpolate(t, size=out_hw, mode=mode, **kwargs)
    out = out[0, 0] if arr.ndim == 2 else out[0].permute(1, 2, 0)
    return out.numpy().astype(np.float64)


def rotate_pair(img: np.ndarray, mask: np.ndarray | None, angle_degrees: float):
    """Rotate image (bilinear) and mask (nearest, re-binarized) about the
    center without reshaping."""
    img = ndimage.rotate(img, angle_degrees, axes=(1, 0), reshape=False, order=1, mode="nearest")
    img = np.clip(img, 0.0, 1.0)
    if mask is not None:
        rot = ndimage.rotate(
            mask.astype(np.float64), angle_degrees, axes=(1, 0), reshape=False, order=0,
            mode="constant", cval=0.0,
        )
        mask = (rot > 0.5).astype(np.uint8)
    return img, mask


def augment_standard(img: np.ndarray, mask: np.ndarray | None, spec: StandardAugment, rng: np.random.Generator):
    """Apply one random geometric transform draw to img (H,W,C) and mask (H,W).

    The mask is re-binarized after any resampling step.
    """
    if mask is not None and mask.shape != img.shape[:2]:
        raise ShapeMismatch(f"mask {mask.shape} does not match image {img.shape[:2]}")
    img = np.array(img, dtype=np.float64)
    mask = None if mask is None else np.array(mask)
    h, w = img.shape[:2]

    if spec.crop_prob > 0 and rng.random() < spec.crop_prob:
        scale = rng.uniform(*spec.crop_scale)
        ch, cw = max(8, int(round(h * scale))), max(8, int(round(w * scale)))
        r0 = int(rng.integers(0, h - ch + 1))
        c0 = int(rng.integers(0, w - cw + 1))
        img = _resize(img[r0 : r0 + ch, c0 : c0 + cw], (h, w), "bilinear")
        img = np.clip(img, 0.0, 1.0)
        if mask is not None:
            mask = _resize(mask[r0 : r0 + ch, c0 : c0 + cw].astype(np.float64), (h, w), "nearest")
            mask = (mask > 0.5).astype(np.uint8)
    if spec.hflip_prob > 0 and rng.random() < spec.hflip_prob:
        img = img[:, ::-1].copy()
        mask = None if mask is None else mask[:, ::-1].copy()
    if spec.vflip_prob > 0 and rng.random() < spec.vflip_prob:
        img = img[::-1].copy()
        mask = None if mask is None else mask[::-1].copy()
    if spec.rotation_prob > 0 and spec.rotation_degrees > 0 and rng.random() < spec.rotation_prob:
        angle = rng.uniform(-spec.rotation_degrees, spec.rotation_degrees)
        img, mask = rotate_pair(img, mask, angle)
    return (img, mask) if mask is not None else (img, None)


def _to_gray(img: np.ndarray) -> np.ndarray:
    return img @ np.array([0.299, 0.587, 0.114])


def augment_soft(img: np.ndarray, spec: SoftAugment, rng: np.random.Generator) -> np.ndarray:
    """Color jitter plus random grayscale; output stays aligned with input."""
    img = np.array(img, dtype=np.float64)
    ops = []
    if spec.brightness > 0:
        ops.append("brightness")
    if spec.contrast > 0:
        ops.append("contrast")
    if spec.saturation > 0 and img.shape[2] == 3:
        ops.append("saturation")
    if spec.hue > 0 and img.shape[2] == 3:
        ops.append("hue")
    for op in rng.permutation(ops):
        if op == "brightness":
            img = img + rng.uniform(-spec.brightness, spec.brightness)
        elif op == "contrast":
            factor = rng.uniform(max(0.0, 1.0 - spec.contrast), 1.0 + spec.contrast)
            pivot = _to_gray(np.clip(img, 0.0, 1.0)).mean() if img.shape[2] == 3 else img.mean()
            img = pivot + (img - pivot) * factor
        elif op == "saturation":
            factor = rng.uniform(max(0.0, 1.0 - spec.saturation), 1.0 + spec.saturation)
            gray = _to_gray(np.clip(img, 0.0, 1.0))[:, :, None]
            img = gray + (img - gray) * factor
        elif op == "hue":
            shift = rng.uniform(-spec.hue, spec.hue)
            hsv = mcolors.rgb_to_hsv(np.clip(img, 0.0, 1.0))
            hsv[:, :, 0] = (hsv[:, :, 0] + shift) % 1.0
            img = mcolors.hsv_to_rgb(hsv)
        img = np.clip(img, 0.0, 1.0)
    if spec.grayscale_prob > 0 and rng.random() < spec.grayscale_prob and img.shape[2] == 3:
        img = np.repeat(_to_gray(img)[:, :, None], 3, axis=2)
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class PatchRef:
    """One drawable training unit: a sample plus a patch origin."""

    sample_idx: int
    origin: tuple


@dataclass
class Batch:
    """Paired labeled/unlabeled patch lists for one optimization step."""

    labeled: list  # (image HxWxC, mask HxW) pairs
    unlabeled: list  # image HxWxC


def index_patches(samples, patch_size: int, stride: int | None = None) -> list:
    refs = []
    for i, s in enumerate(samples):
        a = _pixels(s.image if hasattr(s, "image") else s)
        grid = make_grid(a.shape[0], a.shape[1], patch_size, stride)
        refs.extend(PatchRef(i, o) for o in grid.origins)
    return refs


def _cycled_order(n: int, total: int, rng: np.random.Generator) -> np.ndarray:
    perm = rng.permutation(n)
    reps = math.ceil(total / n)
    return np.tile(perm, reps)[:total]


def make_batches(
    labeled_samples,
    unlabeled_samples,
    batch_labeled: int,
    batch_unlabeled: int,
    patch_size: int,
    rng: np.random.Generator,
    augment: StandardAugment | None = None,
    stride: int | None = None,
):
    """Yield one epoch of Batches.

    Both streams are shuffled independently; the epoch length follows the
    larger stream and the smaller one cycles (wrapping) to keep every batch
    full. One stream may be empty, in which case batches carry only the other.
    """
    lab_refs = index_patches(labeled_samples, patch_size, stride) if labeled_samples else []
    unl_refs = index_patches(unlabeled_samples, patch_size, stride) if unlabeled_samples else []
    if not lab_refs and not unl_refs:
        raise EmptyDataset("no samples in either stream")
    n_lab_batches = math.ceil(len(lab_refs) / batch_labeled) if lab_refs and batch_labeled else 0
    n_unl_batches = math.ceil(len(unl_refs) / batch_unlabeled) if unl_refs and batch_unlabeled else 0
    n_batches = max(n_lab_batches, n_unl_batches)
    lab_order = _cycled_order(len(lab_refs), n_batches * batch_labeled, rng) if lab_refs else np.array([], dtype=int)
    unl_order = _cycled_order(len(unl_refs), n_batches * batch_unlabeled, rng) if unl_refs else np.array([], dtype=int)

    def materialize(refs, samples, order_slice, with_mask):
        out = []
        for k in order_slice:
            ref = refs[int(k)]
            s = samples[ref.sample_idx]
            r, c = ref.origin
            p = patch_size
            img = np.array(_pixels(s.image)[r : r + p, c : c + p])
            mask = np.array(_pixels(s.mask)[r : r + p, c : c + p]) if with_mask else None
            if augment is not None:
                img, mask = augment_standard(img, mask, augment, rng)
            out.append((img, mask) if with_mask else img)
        return out

    for b in range(n_batches):
        lab = materialize(lab_refs, labeled_samples, lab_order[b * batch_labeled : (b + 1) * batch_labeled], True) if lab_refs else []
        unl = materialize(unl_refs, unlabeled_samples, unl_order[b * batch_unlabeled : (b + 1) * batch_unlabeled], False) if unl_refs else []
        yield Batch(labeled=lab, unlabeled=unl)


def load_split(root, split: str, with_masks: bool):
    """Read one corpus split (see synth.gen_corpus layout) into memory."""
    from .synth import load_image_png, load_mask_png
    from .types import BinaryMask, DomainTag, LabeledSample, RasterImage, UnlabeledSample

    img_dir = Path(root) / split / "images"
    if not img_dir.is_dir():
        raise EmptyDataset(f"missing split directory {img_dir}")
    samples = []
    domain = DomainTag.LABELED_SOURCE if split in ("labeled", "test_source") else DomainTag.UNLABELED_TARGET
    for img_path in sorted(img_dir.glob("*.png")):
        sid = img_path.stem
        image = load_image_png(img_path)
        if with_masks:
            mask = load_mask_png(Path(root) / split / "masks" / f"{sid}.png")
            samples.append(LabeledSample(image=image, mask=mask, id=sid, domain=domain))
        else:
            samples.append(UnlabeledSample(image=image, id=sid, domain=domain))
    if not samples:
        raise EmptyDataset(f"no images under {img_dir}")
    return samples
