"""Uncertainty-driven vessel unveiling.

K stochastic teacher passes (dropout + per-pass photometric augmentation)
produce a mean prediction and a per-pixel uncertainty map; the normalized
uncertainty reweights the mean prediction to emphasize faint, disputed
vessel pixels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ShapeMismatch
from .networks import collate_images
from .pipeline import SoftAugment, augment_soft

LN2 = math.log(2.0)

# How the bundle's uncertainty map is built from the K samples:
#   predictive: entropy of the mean prediction.
#   mean_sample: mean of per-sample entropies.
#   disagreement: entropy of the mean minus mean per-sample entropy (the
#     mutual-information split of the two above).
# All modes estimate uncertainty from the sample set, so pixels where the K
# samples coincide bitwise carry zero uncertainty; with no stochastic sources
# (dropout off, augmentation off) the whole map degenerates to zero.
ENTROPY_MODES = ("predictive", "mean_sample", "disagreement")

# How the uncertainty map is squashed into [0, 1]:
#   normalized: divide by ln 2 (the maximum binary entropy).
#   spatial_softmax: literal softmax over all pixels (weights ~ 1/(H*W)).
NORMALIZATION_MODES = ("normalized", "spatial_softmax")


@dataclass
class UnveilBundle:
    """Everything the consistency loss needs from the teacher's MC sampling."""

    samples: torch.Tensor  # (K, N, 1, H, W)
    mean: torch.Tensor  # (N, 1, H, W)
    entropy: torch.Tensor  # (N, 1, H, W), nats
    i_vessel: torch.Tensor  # (N, 1, H, W), unit interval
    unveiled: torch.Tensor  # (N, 1, H, W)


def vessel_entropy(p: torch.Tensor) -> torch.Tensor:
    """Per-pixel binary entropy -p ln p - (1-p) ln(1-p), with 0 ln 0 := 0."""
    p = torch.as_tensor(p)
    one = torch.ones((), dtype=p.dtype)
    h = -p * torch.log(torch.where(p > 0, p, one)) - (1 - p) * torch.log(
        torch.where(p < 1, 1 - p, one)
    )
    return h


def unveil(mean: torch.Tensor, entropy: torch.Tensor, normalization: str = "normalized"):
    """Return (i_vessel, unveiled): uncertainty squashed to [0,1], then
    multiplied elementwise into the mean prediction."""
    if mean.shape != entropy.shape:
        raise ShapeMismatch(f"mean {tuple(mean.shape)} vs entropy {tuple(entropy.shape)}")
    if normalization == "normalized":
        i_vessel = (entropy / LN2).clamp(0.0, 1.0)
    elif normalization == "spatial_softmax":
        flat = entropy.reshape(*entropy.shape[:-2], -1)
        i_vessel = torch.softmax(flat, dim=-1).reshape(entropy.shape)
    else:
        raise ValueError(f"unknown normalization {normalization!r}")
    return i_vessel, i_vessel * mean


def bundle_from_samples(
    samples: torch.Tensor,
    entropy_mode: str = "predictive",
    normalization: str = "normalized",
) -> UnveilBundle:
    """Reduce K stacked prediction maps into an UnveilBundle."""
    if entropy_mode not in ENTROPY_MODES:
        raise ValueError(f"unknown entropy mode {entropy_mode!r}")
    mean = samples.mean(dim=0)
    if entropy_mode == "predictive":
        h = vessel_entropy(mean)
    elif entropy_mode == "mean_sample":
        h = vessel_entropy(samples).mean(dim=0)
    else:
        h = (vessel_entropy(mean) - vessel_entropy(samples).mean(dim=0)).clamp_min(0.0)
    if samples.shape[0] > 1:
        # zero sampled dispersion means zero estimated uncertainty
        dispersed = (samples.amax(dim=0) != samples.amin(dim=0)).to(h.dtype)
        h = h * dispersed
    i_vessel, unveiled = unveil(mean, h, normalization)
    return UnveilBundle(samples=samples, mean=mean, entropy=h, i_vessel=i_vessel, unveiled=unveiled)


def mc_sample(
    teacher,
    images: list,
    k: int,
    mc_gen: torch.Generator | None,
    soft: SoftAugment | None = None,
    aug_rng: np.random.Generator | None = None,
) -> torch.Tensor:
    """K stochastic teacher passes over independently soft-augmented copies.

    images: list of HxWxC float arrays (one unlabeled batch). Returns the
    stacked samples (K, N, 1, H, W). Gradients never flow to the teacher.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    outs = []
    with torch.no_grad():
        for _ in range(k):
            if soft is not None and aug_rng is not None:
                batch = [augment_soft(im, soft, aug_rng) for im in images]
            else:
                batch = images
            x = collate_images(batch)
            _, p = teacher(x, stochastic=True, gen=mc_gen)
            outs.append(p)
    return torch.stack(outs, dim=0)


def mc_bundle(
    teacher,
    images: list,
    k: int,
    mc_gen: torch.Generator | None,
    soft: SoftAugment | None = None,
    aug_rng: np.random.Generator | None = None,
    entropy_mode: str = "predictive",
    normalization: str = "normalized",
) -> UnveilBundle:
    """mc_sample followed by bundle_from_samples."""
    samples = mc_sample(teacher, images, k, mc_gen, soft, aug_rng)
    return bundle_from_samples(samples, entropy_mode, normalization)
