"""Loss terms: supervised (BCE + Dice over three decoders), unveiling
consistency (MSE + uncertainty-weighted distance), and the adversarial
pair (student vs. discriminator objectives)."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from .errors import NonFiniteLoss, ShapeMismatch

BCE_EPS = 1e-7
DICE_SMOOTH = 1.0


def _check_shapes(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ShapeMismatch(f"shape {tuple(a.shape)} vs {tuple(b.shape)}")


def bce(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """Mean binary cross-entropy; predictions clamped to [eps, 1-eps]."""
    _check_shapes(pred, target)
    p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(target * torch.log(p) + (1.0 - target) * torch.log(1.0 - p)).mean()


def _bce_const(pred: torch.Tensor, value: float) -> torch.Tensor:
    p = pred.clamp(BCE_EPS, 1.0 - BCE_EPS)
    return -(torch.log(p) if value == 1.0 else torch.log(1.0 - p)).mean()


def dice_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    """1 - Dice overlap with +1 smoothing (safe for empty masks)."""
    _check_shapes(pred, target)
    inter = (pred * target).sum()
    return 1.0 - (2.0 * inter + DICE_SMOOTH) / (pred.sum() + target.sum() + DICE_SMOOTH)


def supervised_loss(y_main, y_noise, y_drop, target) -> torch.Tensor:
    """Mean of BCE + Dice across the three decoder outputs."""
    total = 0.0
    for y in (y_main, y_noise, y_drop):
        total = total + bce(y, target) + dice_loss(y, target)
    return total / 3.0


def consistency_loss(
    student_pred: torch.Tensor,
    teacher_pred: torch.Tensor,
    unveiled: torch.Tensor,
    i_vessel: torch.Tensor,
    alpha_balance: float = 0.5,
    mse_target: str = "teacher",
):
    """Returns (l_cons, l_cons_mse, l_cons_dist).

    l_cons_mse aligns the student with the teacher's prediction; l_cons_dist
    pulls toward the unveiled prediction, down-weighted where uncertainty is
    high. Teacher-side tensors never receive gradients. mse_target="unveiled"
    keeps the written-out form of the published MSE term instead of the named
    operands.
    """
    teacher_pred = teacher_pred.detach()
    unveiled = unveiled.detach()
    i_vessel = i_vessel.detach()
    _check_shapes(student_pred, teacher_pred)
    _check_shapes(student_pred, unveiled)
    _check_shapes(student_pred, i_vessel)
    mse_ref = unveiled if mse_target == "unveiled" else teacher_pred
    l_mse = ((student_pred - mse_ref) ** 2).mean()
    l_dist = (((student_pred - unveiled) ** 2) * (1.0 - i_vessel)).mean()
    return alpha_balance * l_mse + l_dist, l_mse, l_dist


def adversarial_pair_losses(d_lab: torch.Tensor, d_unlab: torch.Tensor):
    """Returns (l_adv, l_disc) from the discriminator's two patch maps.

    The discriminator learns to call labeled-domain maps 1 and
    unlabeled-domain maps 0; the student's adversarial term scores both
    against 1. Callers control gradient routing (detach features for the
    discriminator step, freeze discriminator params for the student step).
    """
    l_disc = (_bce_const(d_lab, 1.0) + _bce_const(d_unlab, 0.0)) / 2.0
    l_adv = (_bce_const(d_lab, 1.0) + _bce_const(d_unlab, 1.0)) / 2.0
    return l_adv, l_disc


@dataclass(frozen=True)
class LossBreakdown:
    """Per-step loss record; total = l_sup + lambda_cons * l_cons + l_adv."""

    l_sup: float
    l_cons_mse: float
    l_cons_dist: float
    l_cons: float
    l_adv: float
    l_disc: float
    total: float
    lambda_cons: float
    alpha_balance: float

    def as_dict(self) -> dict:
        return {
            "l_sup": self.l_sup,
            "l_cons_mse": self.l_cons_mse,
            "l_cons_dist": self.l_cons_dist,
            "l_cons": self.l_cons,
            "l_adv": self.l_adv,
            "l_disc": self.l_disc,
            "total": self.total,
            "lambda_cons": self.lambda_cons,
        }


def total_loss(
    l_sup: float,
    l_cons_mse: float,
    l_cons_dist: float,
    l_adv: float,
    l_disc: float,
    lambda_cons: float,
    alpha_balance: float,
) -> LossBreakdown:
    """Compose the full objective and freeze the breakdown for logging."""
    parts = (l_sup, l_cons_mse, l_cons_dist, l_adv, l_disc)
    vals = [float(v) for v in parts]
    if not all(math.isfinite(v) for v in vals):
        raise NonFiniteLoss(f"non-finite loss components: {vals}")
    l_sup, l_cons_mse, l_cons_dist, l_adv, l_disc = vals
    l_cons = alpha_balance * l_cons_mse + l_cons_dist
    total = l_sup + lambda_cons * l_cons + l_adv
    return LossBreakdown(
        l_sup=l_sup,
        l_cons_mse=l_cons_mse,
        l_cons_dist=l_cons_dist,
        l_cons=l_cons,
        l_adv=l_adv,
        l_disc=l_disc,
        total=total,
        lambda_cons=lambda_cons,
        alpha_balance=alpha_balance,
    )
