"""Downstream 4-stage classification from fundus image, vessel map, or both.

Includes a synthetic staged corpus whose class label tracks vessel
tortuosity and coverage, a small convolutional backbone (one per input
stream), and the fusion head: concatenated stream features pass through
dropout ("contamination") and two fully connected layers.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import rng as rngmod
from .errors import EmptyDataset, IoFailure, ModeMismatch
from .networks import _group_norm
from .synth import SynthConfig, render_vessel_tree, save_image_png, save_mask_png
from .trainer import extract_mask

STAGE_NAMES = ("no_rop", "stage1", "stage2", "stage3")
MODES = ("image", "mask", "fusion")

# Per-stage geometry: later stages get more, wigglier, deeper but thinner
# trees, so foreground stays inside the renderer's bounds at small sizes.
_STAGE_GEOMETRY = (
    dict(n_trees=2, turn_sigma=0.10, branch_depth=3, branch_prob=0.18, vessel_width_px=(2.0, 3.5)),
    dict(n_trees=3, turn_sigma=0.22, branch_depth=4, branch_prob=0.24, vessel_width_px=(1.8, 3.0)),
    dict(n_trees=4, turn_sigma=0.34, branch_depth=4, branch_prob=0.30, vessel_width_px=(1.5, 2.5)),
    dict(n_trees=5, turn_sigma=0.48, branch_depth=5, branch_prob=0.36, vessel_width_px=(1.2, 2.0)),
)


@dataclass(frozen=True)
class FusionSpec:
    """Backbone and fusion-head hyperparameters (same backbone per stream)."""

    backbone_base: int = 16
    backbone_depth: int = 3
    contamination_rate: float = 0.2
    n_classes: int = 4

    @property
    def feature_len(self) -> int:
        return self.backbone_base * 2 ** (self.backbone_depth - 1)


@dataclass(frozen=True)
class ClassifierConfig:
    seed: int = 0
    epochs: int = 15
    lr: float = 1e-3
    batch_size: int = 16
    test_fraction: float = 0.25
    spec: FusionSpec = field(default_factory=FusionSpec)


class ConvBackbone(nn.Module):
    """Conv stages with pooling, then global average pool to a feature vector."""

    def __init__(self, in_channels: int, base: int, depth: int):
        super().__init__()
        layers = []
        ch = in_channels
        out = base
        for _ in range(depth):
            layers += [
                nn.Conv2d(ch, out, 3, padding=1),
                _group_norm(out),
                nn.ReLU(inplace=True),
                nn.MaxPool2d(2),
            ]
            ch = out
            out = min(out * 2, base * 2 ** (depth - 1))
        self.net = nn.Sequential(*layers)
        self.feature_len = ch

    def forward(self, x):
        return self.net(x).mean(dim=(2, 3))


class StageClassifier(nn.Module):
    """Single-stream (image or mask) or dual-stream fusion classifier."""

    def __init__(self, mode: str, spec: FusionSpec):
        super().__init__()
        if mode not in MODES:
            raise ModeMismatch(f"mode must be one of {MODES}, got {mode!r}")
        self.mode = mode
        self.spec = spec
        f = spec.feature_len
        if mode in ("image", "fusion"):
            self.image_backbone = ConvBackbone(3, spec.backbone_base, spec.backbone_depth)
        if mode in ("mask", "fusion"):
            self.mask_backbone = ConvBackbone(1, spec.backbone_base, spec.backbone_depth)
        if mode == "fusion":
            self.contamination = nn.Dropout(spec.contamination_rate)
            self.head = nn.Sequential(nn.Linear(2 * f, f), nn.ReLU(inplace=True), nn.Linear(f, spec.n_classes))
        else:
            self.head = nn.Linear(f, spec.n_classes)

    def features(self, image: torch.Tensor | None, mask: torch.Tensor | None) -> torch.Tensor:
        if self.mode == "image":
            if image is None or mask is not None:
                raise ModeMismatch("image mode takes exactly {image}")
            return self.image_backbone(image)
        if self.mode == "mask":
            if mask is None or image is not None:
                raise ModeMismatch("mask mode takes exactly {mask}")
            return self.mask_backbone(mask)
        if image is None or mask is None:
            raise ModeMismatch("fusion mode takes {image, mask}")
        fused = torch.cat([self.image_backbone(image), self.mask_backbone(mask)], dim=1)
        return self.contamination(fused)

    def forward(self, image=None, mask=None):
        return self.head(self.features(image, mask))

    def classify(self, image=None, mask=None) -> torch.Tensor:
        """Class probabilities (rows sum to 1)."""
        with torch.no_grad():
            return torch.softmax(self.forward(image, mask), dim=1)


def gen_staged_corpus(
    out_dir,
    n_per_class: int,
    image_size: int = 96,
    seed: int = 0,
    provenance: dict | None = None,
) -> dict:
    """Write a 4-class corpus: class_{0..3}/images plus a masks/ mirror holding
    the rendered ground-truth vessel maps."""
    root = Path(out_dir)
    meta = dict(provenance or {})
    meta.setdefault("seed", seed)
    counts = {}
    try:
        for cls, geom in enumerate(_STAGE_GEOMETRY):
            cfg = SynthConfig(image_size=image_size, seed=seed, **geom)
            img_dir = root / f"class_{cls}" / "images"
            mask_dir = root / f"class_{cls}" / "masks"
            img_dir.mkdir(parents=True, exist_ok=True)
            mask_dir.mkdir(parents=True, exist_ok=True)
            for i in range(n_per_class):
                stream = rngmod.numpy_stream(seed, "fusion", cls, i)
                img, mask = render_vessel_tree(cfg, stream)
                save_image_png(img_dir / f"img_{i:03d}.png", img, meta)
                save_mask_png(mask_dir / f"img_{i:03d}.png", mask, meta)
            counts[f"class_{cls}"] = n_per_class
    except OSError as exc:
        raise IoFailure(f"cannot write staged corpus under {root}: {exc}") from exc
    manifest = {
        "schema": "vesselssl-staged@1",
        "classes": list(STAGE_NAMES),
        "counts": counts,
        "image_size": image_size,
        **meta,
    }
    with open(root / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def _load_staged(dataset_dir, need_masks: bool):
    from .synth import load_image_png, load_mask_png
    from PIL import Image

    root = Path(dataset_dir)
    items = []
    for cls in range(len(STAGE_NAMES)):
        img_dir = root / f"class_{cls}" / "images"
        if not img_dir.is_dir():
            continue
        for p in sorted(img_dir.glob("*.png")):
            mask = None
            if need_masks:
                mp = root / f"class_{cls}" / "masks" / p.name
                if not mp.exists():
                    raise EmptyDataset(f"mask mirror missing for {p}")
                with Image.open(mp) as im:
                    mask = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            items.append((cls, load_image_png(p).pixels, mask))
    if not items:
        raise EmptyDataset(f"no class_*/images under {root}")
    return items


def populate_masks(dataset_dir, checkpoint_path) -> int:
    """Fill each class's masks/ mirror with probability maps extracted from a
    segmentation checkpoint; returns the number written."""
    from .synth import load_image_png
    from .types import RasterImage

    root = Path(dataset_dir)
    n = 0
    for cls in range(len(STAGE_NAMES)):
        img_dir = root / f"class_{cls}" / "images"
        if not img_dir.is_dir():
            continue
        mask_dir = root / f"class_{cls}" / "masks"
        mask_dir.mkdir(parents=True, exist_ok=True)
        for p in sorted(img_dir.glob("*.png")):
            pm, _ = extract_mask(checkpoint_path, load_image_png(p))
            save_image_png(mask_dir / p.name, RasterImage(pm.probs[:, :, None]))
            n += 1
    return n


def confusion_matrix(true_labels, pred_labels, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    for t, p in zip(true_labels, pred_labels):
        cm[int(t), int(p)] += 1
    return cm


def macro_metrics(cm: np.ndarray) -> dict:
    """Accuracy plus macro precision/recall/F1 from a confusion matrix
    (rows = true class, columns = predicted class).

    Classes absent from both truth and predictions are excluded from the
    macro averages and flagged as degenerate.
    """
    n = cm.sum()
    accuracy = float(np.trace(cm) / n) if n else 0.0
    precisions, recalls, f1s = [], [], []
    degenerate = False
    for c in range(cm.shape[0]):
        tp = cm[c, c]
        pred_c = cm[:, c].sum()
        true_c = cm[c, :].sum()
        if pred_c == 0 and true_c == 0:
            degenerate = True
            continue
        p = tp / pred_c if pred_c else 0.0
        r = tp / true_c if true_c else 0.0
        precisions.append(p)
        recalls.append(r)
        f1s.append(2 * p * r / (p + r) if (p + r) else 0.0)
    return {
        "accuracy": accuracy,
        "precision": float(np.mean(precisions)) if precisions else 0.0,
        "recall": float(np.mean(recalls)) if recalls else 0.0,
        "f1": float(np.mean(f1s)) if f1s else 0.0,
        "degenerate": degenerate,
    }


def _split_indices(items, test_fraction: float, rng: np.random.Generator):
    by_class: dict = {}
    for i, (cls, _, _) in enumerate(items):
        by_class.setdefault(cls, []).append(i)
    train_idx, test_idx = [], []
    for cls in sorted(by_class):
        idx = np.array(by_class[cls])
        rng.shuffle(idx)
        n_test = max(1, int(round(test_fraction * len(idx)))) if len(idx) > 1 else 0
        test_idx.extend(idx[:n_test].tolist())
        train_idx.extend(idx[n_test:].tolist())
    return sorted(train_idx), sorted(test_idx)


def _batch_tensors(items, indices, mode: str):
    imgs = None
    masks = None
    labels = torch.tensor([items[i][0] for i in indices], dtype=torch.long)
    if mode in ("image", "fusion"):
        arr = np.stack([items[i][1] for i in indices]).astype(np.float32)
        imgs = torch.from_numpy(arr).permute(0, 3, 1, 2).contiguous()
    if mode in ("mask", "fusion"):
        arr = np.stack([items[i][2] for i in indices]).astype(np.float32)
        masks = torch.from_numpy(arr).unsqueeze(1).contiguous()
    return imgs, masks, labels


def train_eval_classifier(mode: str, dataset_dir, config: ClassifierConfig) -> dict:
    """Train the selected input mode on the staged corpus and report accuracy
    plus macro precision/recall/F1 on the held-out split."""
    if mode not in MODES:
        raise ModeMismatch(f"mode must be one of {MODES}, got {mode!r}")
    items = _load_staged(dataset_dir, need_masks=mode in ("mask", "fusion"))
    rng = rngmod.numpy_stream(config.seed, "fusion", 101)
    train_idx, test_idx = _split_indices(items, config.test_fraction, rng)
    if not train_idx or not test_idx:
        raise EmptyDataset("staged corpus too small to split")

    torch.manual_seed(int(rngmod.seed_sequence(config.seed, "fusion", 7).generate_state(1, np.uint64)[0]))
    model = StageClassifier(mode, config.spec)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    ce = nn.CrossEntropyLoss()

    order_rng = rngmod.numpy_stream(config.seed, "fusion", 11)
    model.train()
    for _ in range(config.epochs):
        order = order_rng.permutation(len(train_idx))
        for s in range(0, len(order), config.batch_size):
            sel = [train_idx[j] for j in order[s : s + config.batch_size]]
            imgs, masks, labels = _batch_tensors(items, sel, mode)
            logits = model(imgs, masks)
            loss = ce(logits, labels)
            opt.zero_grad()
            loss.backward()
            opt.step()

    model.eval()
    imgs, masks, labels = _batch_tensors(items, test_idx, mode)
    with torch.no_grad():
        pred = model(imgs, masks).argmax(dim=1)
    cm = confusion_matrix(labels.numpy(), pred.numpy(), config.spec.n_classes)
    report = macro_metrics(cm)
    report.update(
        {
            "mode": mode,
            "n_train": len(train_idx),
            "n_test": len(test_idx),
            "confusion_matrix": cm.tolist(),
            "seed": config.seed,
        }
    )
    return report
