"""The five segmentation indicators (IoU, DSC, Acc, VOI, ARI) computed from
exact pixel contingency counts, plus per-dataset aggregation.

IoU here is foreground IoU averaged over images: published aggregate
(DSC, mIoU) pairs satisfy IoU = DSC / (2 - DSC), which identifies the
convention. A two-class mean variant is available via two_class_mean.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateInput, ShapeMismatch
from .types import BinaryMask


@dataclass(frozen=True)
class ContingencyTable:
    """Pixel counts: n11 pred&gt foreground, n10 pred only, n01 gt only, n00 neither."""

    n11: int
    n10: int
    n01: int
    n00: int

    @property
    def total(self) -> int:
        return self.n11 + self.n10 + self.n01 + self.n00


def contingency(pred: BinaryMask, gt: BinaryMask) -> ContingencyTable:
    p = pred.pixels if hasattr(pred, "pixels") else np.asarray(pred)
    g = gt.pixels if hasattr(gt, "pixels") else np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeMismatch(f"pred {p.shape} vs gt {g.shape}")
    p = p.astype(bool)
    g = g.astype(bool)
    return ContingencyTable(
        n11=int(np.count_nonzero(p & g)),
        n10=int(np.count_nonzero(p & ~g)),
        n01=int(np.count_nonzero(~p & g)),
        n00=int(np.count_nonzero(~p & ~g)),
    )


def iou_dsc_acc(t: ContingencyTable, two_class_mean: bool = False):
    """Returns (iou, dsc, acc). Empty-union/empty-mask cases score 1."""
    union = t.n11 + t.n10 + t.n01
    iou_fg = t.n11 / union if union else 1.0
    if two_class_mean:
        union_bg = t.n00 + t.n10 + t.n01
        iou_bg = t.n00 / union_bg if union_bg else 1.0
        iou = (iou_fg + iou_bg) / 2.0
    else:
        iou = iou_fg
    denom = 2 * t.n11 + t.n10 + t.n01
    dsc = 2 * t.n11 / denom if denom else 1.0
    acc = (t.n11 + t.n00) / t.total if t.total else 1.0
    return iou, dsc, acc


def _entropy(counts) -> float:
    n = sum(counts)
    return -sum(c / n * math.log(c / n) for c in counts if c > 0)


def voi(t: ContingencyTable):
    """Returns (voi_nats, voi_normalized).

    VOI = H(pred) + H(gt) - 2 I(pred; gt); the normalized form divides by the
    joint entropy (0 when the joint entropy is 0).
    """
    n = t.total
    if n == 0:
        return 0.0, 0.0
    h_pred = _entropy((t.n11 + t.n10, t.n01 + t.n00))
    h_gt = _entropy((t.n11 + t.n01, t.n10 + t.n00))
    h_joint = _entropy((t.n11, t.n10, t.n01, t.n00))
    mutual = h_pred + h_gt - h_joint
    v = h_pred + h_gt - 2.0 * mutual
    v = max(v, 0.0)
    return v, (v / h_joint if h_joint > 0 else 0.0)


def ari(t: ContingencyTable) -> float:
    """Adjusted Rand index (pair counting with expected-index correction)."""
    n = t.total
    if n < 2:
        raise DegenerateInput("ARI needs at least 2 pixels")

    def comb2(x: int) -> int:
        return x * (x - 1) // 2

    sum_cells = sum(comb2(c) for c in (t.n11, t.n10, t.n01, t.n00))
    sum_pred = comb2(t.n11 + t.n10) + comb2(t.n01 + t.n00)
    sum_gt = comb2(t.n11 + t.n01) + comb2(t.n10 + t.n00)
    expected = sum_pred * sum_gt / comb2(n)
    max_index = (sum_pred + sum_gt) / 2.0
    if max_index == expected:
        return 1.0
    return (sum_cells - expected) / (max_index - expected)


@dataclass
class ImageMetrics:
    id: str
    iou: float
    dsc: float
    acc: float
    voi: float
    voi_normalized: float
    ari: float

    def as_dict(self) -> dict:
        return {
            "id": self.id,
            "iou": self.iou,
            "dsc": self.dsc,
            "acc": self.acc,
            "voi": self.voi,
            "voi_normalized": self.voi_normalized,
            "ari": self.ari,
        }


@dataclass
class MetricsRecord:
    """Per-image metrics plus unweighted means (reported x100 in reports)."""

    per_image: list = field(default_factory=list)
    aggregates: dict = field(default_factory=dict)

    @staticmethod
    def from_images(per_image: list) -> "MetricsRecord":
        rec = MetricsRecord(per_image=sorted(per_image, key=lambda m: m.id))
        keys = ("iou", "dsc", "acc", "voi", "voi_normalized", "ari")
        rec.aggregates = {
            k: float(np.mean([getattr(m, k) for m in rec.per_image])) for k in keys
        }
        return rec

    def scaled_aggregates(self) -> dict:
        """Aggregates x100, rounded to 2 decimals (table formatting)."""
        return {k: round(v * 100.0, 2) for k, v in self.aggregates.items()}


def image_metrics(image_id: str, pred: BinaryMask, gt: BinaryMask, two_class_mean: bool = False) -> ImageMetrics:
    t = contingency(pred, gt)
    i, d, a = iou_dsc_acc(t, two_class_mean)
    v, vn = voi(t)
    return ImageMetrics(id=image_id, iou=i, dsc=d, acc=a, voi=v, voi_normalized=vn, ari=ari(t))
