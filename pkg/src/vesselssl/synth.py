"""Synthetic two-domain vessel corpus generation.

Renders branching vessel trees as anti-aliased polylines over a textured
fundus-like background, with exact binary ground truth, then derives a
shifted "target" domain (blur, tint, reduced contrast, thinner vessels) so
that source-trained models visibly degrade on it.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw
from PIL.PngImagePlugin import PngInfo
from scipy import ndimage
from skimage.morphology import skeletonize

from . import rng as rngmod
from .errors import DegenerateGeometry, IoFailure
from .types import BinaryMask, RasterImage

SUPERSAMPLE = 4
MAX_RENDER_RETRIES = 6
FG_FRACTION_BOUNDS = (0.01, 0.25)

# Fundus-ish palette: warm background, darker reddish vessels, bright disc.
_BASE_COLOR = np.array([0.62, 0.35, 0.18])
_DISC_TINT = np.array([0.24, 0.20, 0.10])
_VESSEL_DARKEN = 0.45


@dataclass(frozen=True)
class SynthConfig:
    """Geometry and texture knobs for one rendered image."""

    image_size: int = 128
    n_trees: int = 3
    branch_depth: int = 4
    vessel_width_px: tuple = (1.5, 3.5)
    background_texture_amplitude: float = 0.12
    turn_sigma: float = 0.22
    branch_prob: float = 0.28
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 64:
            raise ValueError(f"image_size must be >= 64, got {self.image_size}")
        lo, hi = self.vessel_width_px
        if lo <= 0 or hi <= 0 or hi < lo:
            raise ValueError(f"vessel_width_px range must be positive, got {self.vessel_width_px}")


@dataclass(frozen=True)
class DomainShiftSpec:
    """Photometric and morphological transform defining the target domain."""

    tint: tuple = (0.0, 0.0, 0.0)
    blur_sigma: float = 0.0
    width_scale: float = 1.0
    contrast_scale: float = 1.0
    vignette_strength: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.width_scale <= 1.0:
            raise ValueError("width_scale must lie in (0, 1]")
        if not 0.0 < self.contrast_scale <= 1.0:
            raise ValueError("contrast_scale must lie in (0, 1]")

    @staticmethod
    def identity() -> "DomainShiftSpec":
        return DomainShiftSpec()

    @staticmethod
    def default_target() -> "DomainShiftSpec":
        # Strong enough that source-only training visibly degrades, while the
        # vessels stay learnable.
        return DomainShiftSpec(
            tint=(0.08, 0.04, 0.02),
            blur_sigma=1.4,
            width_scale=0.55,
            contrast_scale=0.55,
            vignette_strength=0.5,
        )


def _value_noise(size: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """Low-frequency value noise in [-amplitude, amplitude]."""
    cells = 8
    cell = max(size // cells, 1)
    coarse = rng.uniform(-1.0, 1.0, (cells + 2, cells + 2))
    fine = np.kron(coarse, np.ones((cell, cell)))[:size, :size]
    fine = ndimage.gaussian_filter(fine, sigma=cell * 0.75, mode="nearest")
    return amplitude * fine


def _grow_branch(rng, pts_out, pos, heading, length, width, depth, cfg: SynthConfig):
    step = max(2.0, cfg.image_size * 0.03)
    n_steps = max(3, int(length / step))
    pts = [tuple(pos)]
    children = []
    for i in range(n_steps):
        heading = heading + rng.normal(0.0, cfg.turn_sigma)
        pos = pos + step * np.array([math.cos(heading), math.sin(heading)])
        pts.append(tuple(pos))
        if depth < cfg.branch_depth and i > 0 and rng.random() < cfg.branch_prob:
            children.append((pos.copy(), heading))
    pts_out.append((pts, width))
    for child_pos, child_heading in children[:2]:
        side = 1.0 if rng.random() < 0.5 else -1.0
        _grow_branch(
            rng,
            pts_out,
            child_pos,
            child_heading + side * rng.uniform(0.35, 0.85),
            length * 0.65,
            max(width * 0.72, 0.8),
            depth + 1,
            cfg,
        )


def _rasterize_strokes(polylines, size: int) -> np.ndarray:
    """Draw polylines supersampled, return per-pixel coverage in [0, 1]."""
    ss = SUPERSAMPLE
    canvas = Image.new("L", (size * ss, size * ss), 0)
    draw = ImageDraw.Draw(canvas)
    for pts, width in polylines:
        scaled = [(x * ss, y * ss) for (y, x) in pts]
        w = max(int(round(width * ss)), 1)
        draw.line(scaled, fill=255, width=w, joint="curve")
        r = w / 2.0
        for (x, y) in (scaled[0], scaled[-1]):
            draw.ellipse((x - r, y - r, x + r, y + r), fill=255)
    hi = np.asarray(canvas, dtype=np.float64) / 255.0
    return hi.reshape(size, ss, size, ss).mean(axis=(1, 3))


def render_vessel_tree(cfg: SynthConfig, rng: np.random.Generator):
    """Render one (image, mask) pair; retries until the foreground fraction
    lands in FG_FRACTION_BOUNDS, else raises DegenerateGeometry."""
    if cfg.n_trees <= 0:
        raise DegenerateGeometry("n_trees must be positive to produce any foreground")
    size = cfg.image_size
    lo, hi = FG_FRACTION_BOUNDS
    for _ in range(MAX_RENDER_RETRIES):
        anchor = np.array(
            [rng.uniform(0.25, 0.75) * size, rng.uniform(0.2, 0.8) * size]
        )
        polylines = []
        base_heading = rng.uniform(0.0, 2.0 * math.pi)
        for t in range(cfg.n_trees):
            heading = base_heading + 2.0 * math.pi * t / cfg.n_trees + rng.normal(0.0, 0.3)
            root_w = rng.uniform(*cfg.vessel_width_px)
            length = size * rng.uniform(0.45, 0.8)
            _grow_branch(rng, polylines, anchor.copy(), heading, length, root_w, 1, cfg)
        coverage = _rasterize_strokes(polylines, size)
        mask = coverage > 0.5
        frac = mask.mean()
        if lo <= frac <= hi:
            break
    else:
        raise DegenerateGeometry(
            f"foreground fraction outside {FG_FRACTION_BOUNDS} after {MAX_RENDER_RETRIES} attempts"
        )

    base = _BASE_COLOR * rng.uniform(0.9, 1.1, 3)
    texture = _value_noise(size, cfg.background_texture_amplitude, rng)
    bg = np.clip(base[None, None, :] * (1.0 + texture[:, :, None]), 0.0, 1.0)

    # Bright optic-disc blob at the anchor the trees fan out from.
    yy, xx = np.mgrid[0:size, 0:size]
    disc_sigma = size * 0.045
    bump = np.exp(-(((yy - anchor[0]) ** 2 + (xx - anchor[1]) ** 2) / (2.0 * disc_sigma**2)))
    bg = np.clip(bg + bump[:, :, None] * _DISC_TINT[None, None, :], 0.0, 1.0)

    vessel_color = bg * _VESSEL_DARKEN
    img = bg * (1.0 - coverage[:, :, None]) + vessel_color * coverage[:, :, None]
    return RasterImage(np.clip(img, 0.0, 1.0)), BinaryMask(mask.astype(np.uint8))


def _thin_mask(mask: np.ndarray, width_scale: float) -> np.ndarray:
    """Shrink stroke widths by width_scale while keeping each stroke connected.

    Pixels survive when their depth into the stroke exceeds (1 - s) of the
    local half-width; the skeleton is always kept so thinning never splits a
    component.
    """
    if width_scale >= 1.0 or not mask.any():
        return mask.copy()
    dist = ndimage.distance_transform_edt(mask)
    win = 2 * int(math.ceil(dist.max())) + 1
    local_radius = ndimage.maximum_filter(dist, size=win)
    keep = dist > (1.0 - width_scale) * local_radius
    keep |= skeletonize(mask.astype(bool))
    return (mask.astype(bool) & keep).astype(np.uint8)


def apply_domain_shift(
    img: RasterImage,
    mask: BinaryMask,
    spec: DomainShiftSpec,
    rng: np.random.Generator | None = None,
):
    """Photometric shift of the image plus morphological thinning of the mask.

    An identity spec returns the inputs bit-for-bit.
    """
    px = np.array(img.pixels)
    tint = np.asarray(spec.tint, dtype=np.float64)
    if np.any(tint != 0.0):
        px = np.clip(px + tint[None, None, :], 0.0, 1.0)
    if spec.blur_sigma > 0.0:
        for c in range(px.shape[2]):
            px[:, :, c] = ndimage.gaussian_filter(px[:, :, c], sigma=spec.blur_sigma, mode="nearest")
    if spec.contrast_scale != 1.0:
        px = np.clip(0.5 + (px - 0.5) * spec.contrast_scale, 0.0, 1.0)
    if spec.vignette_strength > 0.0:
        h, w = px.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        r2 = ((yy - (h - 1) / 2.0) / (h / 2.0)) ** 2 + ((xx - (w - 1) / 2.0) / (w / 2.0)) ** 2
        falloff = np.clip(1.0 - spec.vignette_strength * r2 / 2.0, 0.0, 1.0)
        px = px * falloff[:, :, None]
    thinned = _thin_mask(np.array(mask.pixels), spec.width_scale)
    return RasterImage(px), BinaryMask(thinned)


def _save_png(path: Path, arr8: np.ndarray, mode: str, meta: dict) -> None:
    info = PngInfo()
    for k, v in meta.items():
        info.add_text(k, str(v))
    try:
        Image.fromarray(arr8, mode=mode).save(path, pnginfo=info)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def save_image_png(path, img: RasterImage, meta: dict | None = None) -> None:
    arr8 = np.rint(img.pixels * 255.0).astype(np.uint8)
    if arr8.shape[2] == 1:
        arr8 = arr8[:, :, 0]
        _save_png(Path(path), arr8, "L", meta or {})
    else:
        _save_png(Path(path), arr8, "RGB", meta or {})


def save_mask_png(path, mask: BinaryMask, meta: dict | None = None) -> None:
    _save_png(Path(path), (mask.pixels * 255).astype(np.uint8), "L", meta or {})


def load_image_png(path) -> RasterImage:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float64)
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return RasterImage(arr / 255.0)


def load_mask_png(path) -> BinaryMask:
    try:
        with Image.open(path) as im:
            arr = np.asarray(im.convert("L"))
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return BinaryMask((arr > 127).astype(np.uint8))


_SPLIT_DIRS = {
    "labeled": ("labeled", True),
    "unlabeled": ("unlabeled", False),
    "test_source": ("test_source", True),
    "test_target": ("test_target", True),
}


def gen_corpus(
    cfg: SynthConfig,
    n_labeled: int,
    n_unlabeled: int,
    n_test: int,
    shift: DomainShiftSpec,
    out_dir,
    provenance: dict | None = None,
) -> dict:
    """Write a two-domain corpus to out_dir and return its manifest.

    labeled/ and test_source/ come from the source domain; unlabeled/ and
    test_target/ get the domain shift applied (test_target keeps its masks
    for evaluation only).
    """
    if min(n_labeled, n_unlabeled, n_test) < 0:
        raise ValueError("sample counts must be >= 0")
    root = Path(out_dir)
    plan = [
        ("labeled", "lab", n_labeled, False),
        ("unlabeled", "unl", n_unlabeled, True),
        ("test_source", "tsrc", n_test, False),
        ("test_target", "ttgt", n_test, True),
    ]
    meta = dict(provenance or {})
    meta.setdefault("seed", cfg.seed)
    splits: dict = {}
    try:
        for split_idx, (split, prefix, count, shifted) in enumerate(plan):
            dirname, with_masks = _SPLIT_DIRS[split]
            img_dir = root / dirname / "images"
            img_dir.mkdir(parents=True, exist_ok=True)
            if with_masks:
                (root / dirname / "masks").mkdir(parents=True, exist_ok=True)
            ids = []
            for i in range(count):
                stream = rngmod.numpy_stream(cfg.seed, "synth", split_idx, i)
                img, mask = render_vessel_tree(cfg, stream)
                if shifted:
                    img, mask = apply_domain_shift(img, mask, shift, stream)
                sample_id = f"{prefix}_{i:03d}"
                save_image_png(img_dir / f"{sample_id}.png", img, meta)
                if with_masks:
                    save_mask_png(root / dirname / "masks" / f"{sample_id}.png", mask, meta)
                ids.append(sample_id)
            splits[split] = ids
    except OSError as exc:
        raise IoFailure(f"cannot write corpus under {root}: {exc}") from exc

    manifest = {
        "schema": "vesselssl-corpus@1",
        "seed": cfg.seed,
        "config": asdict(cfg),
        "shift": asdict(shift),
        "splits": splits,
        "domains": {
            "labeled": "labeled_source",
            "unlabeled": "unlabeled_target",
            "test_source": "labeled_source",
            "test_target": "unlabeled_target",
        },
        **meta,
    }
    try:
        with open(root / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise IoFailure(f"cannot write manifest under {root}: {exc}") from exc
    return manifest
