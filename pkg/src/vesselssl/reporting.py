"""Report emission: JSON records, delimited CSV, and matplotlib figures.

Every artifact embeds the run's config hash, seed, and code version, and
contains no wall-clock values, so reruns with equal hashes are
byte-comparable.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .metrics import MetricsRecord

_METRIC_KEYS = ("iou", "dsc", "acc", "voi", "voi_normalized", "ari")


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_metrics_report(
    out_dir,
    record: MetricsRecord,
    provenance: dict,
    config_echo: dict | None = None,
    examples: list | None = None,
    stem: str = "report",
) -> dict:
    """Write report.json, report.csv, and figures for one evaluated dataset.

    examples: optional [(id, image HxWxC, gt HxW, prob HxW, pred HxW)] rows
    rendered into a qualitative panel.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {
        "schema": "vesselssl-metrics@1",
        **provenance,
        "config": config_echo or {},
        "per_image": [m.as_dict() for m in record.per_image],
        "aggregates_x100": record.scaled_aggregates(),
        "aggregates": record.aggregates,
    }
    _write_json(out / f"{stem}.json", payload)

    with open(out / f"{stem}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["id", *(f"{k}_x100" for k in _METRIC_KEYS)])
        for m in record.per_image:
            w.writerow([m.id, *(round(getattr(m, k) * 100.0, 2) for k in _METRIC_KEYS)])
        w.writerow(["aggregate", *(record.scaled_aggregates()[k] for k in _METRIC_KEYS)])

    _metrics_figure(out / f"{stem}_per_image.png", record)
    if examples:
        _examples_figure(out / f"{stem}_examples.png", examples)
    return payload


def _metrics_figure(path: Path, record: MetricsRecord) -> None:
    ids = [m.id for m in record.per_image]
    shown = ("dsc", "iou", "ari")
    x = np.arange(len(ids))
    width = 0.8 / len(shown)
    fig, ax = plt.subplots(figsize=(max(6, 0.6 * len(ids) + 2), 4))
    for j, key in enumerate(shown):
        vals = [getattr(m, key) * 100.0 for m in record.per_image]
        ax.bar(x + (j - 1) * width, vals, width, label=key.upper())
    ax.set_xticks(x)
    ax.set_xticklabels(ids, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("score x100")
    ax.set_ylim(0, 100)
    ax.legend()
    ax.set_title("per-image segmentation scores")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def _examples_figure(path: Path, examples: list) -> None:
    n = len(examples)
    fig, axes = plt.subplots(n, 4, figsize=(10, 2.6 * n), squeeze=False)
    for row, (sid, image, gt, prob, pred) in enumerate(examples):
        panels = [
            (image, None, f"{sid}: image"),
            (gt, "gray", "ground truth"),
            (prob, "magma", "probability"),
            (pred, "gray", "prediction"),
        ]
        for col, (arr, cmap, title) in enumerate(panels):
            ax = axes[row][col]
            ax.imshow(np.asarray(arr), cmap=cmap, vmin=0, vmax=1)
            ax.set_title(title, fontsize=8)
            ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def write_training_report(out_dir, log_path, provenance: dict) -> None:
    """Render loss curves from the JSONL step log and write a CSV mirror."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = [json.loads(line) for line in open(log_path)]
    if not records:
        return
    keys = ("l_sup", "l_cons", "l_adv", "l_disc", "total")
    steps = [r["step"] for r in records]

    with open(out / "train_log.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        cols = list(records[0].keys())
        w.writerow(cols)
        for r in records:
            w.writerow([r[c] for c in cols])

    fig, ax = plt.subplots(figsize=(7, 4))
    for k in keys:
        ax.plot(steps, [r[k] for r in records], label=k, linewidth=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.legend(fontsize=8)
    ax.set_title(f"training losses (seed {provenance.get('seed')})")
    fig.tight_layout()
    fig.savefig(out / "loss_curves.png", dpi=120)
    plt.close(fig)


def write_classification_report(out_dir, reports: dict, provenance: dict) -> dict:
    """Write classification.json/.csv plus a confusion-matrix figure per mode.

    reports: mode name -> report dict from train_eval_classifier.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"schema": "vesselssl-classification@1", **provenance, "reports": reports}
    _write_json(out / "classification.json", payload)

    cols = ("accuracy", "precision", "recall", "f1")
    with open(out / "classification.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["inputs", *cols])
        for mode, rep in reports.items():
            w.writerow([mode, *(round(rep[c], 4) for c in cols)])

    for mode, rep in reports.items():
        cm = np.asarray(rep["confusion_matrix"])
        fig, ax = plt.subplots(figsize=(4.4, 4))
        im = ax.imshow(cm, cmap="Blues")
        for i in range(cm.shape[0]):
            for j in range(cm.shape[1]):
                ax.text(j, i, str(cm[i, j]), ha="center", va="center", fontsize=9)
        ax.set_xlabel("predicted")
        ax.set_ylabel("true")
        ax.set_title(f"confusion ({mode})")
        fig.colorbar(im, fraction=0.046)
        fig.tight_layout()
        fig.savefig(out / f"confusion_{mode}.png", dpi=120)
        plt.close(fig)
    return payload
