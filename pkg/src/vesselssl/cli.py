"""Command-line entry points: synth, train, eval, predict, classify.

Configuration comes from an optional TOML file, VESSELSSL_* environment
overrides, repeated --set section.key=value flags, and a few common shortcut
flags. Every artifact written embeds {config hash, seed, code version}.
Exit codes: 0 success, 1 runtime failure, 2 usage/config error.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, load_run_config, provenance
from .errors import ConfigError, VesselSslError
from .fusion import MODES, gen_staged_corpus, populate_masks, train_eval_classifier
from .reporting import write_classification_report, write_metrics_report, write_training_report
from .synth import gen_corpus, load_image_png, save_image_png, save_mask_png
from .trainer import (
    AblationLevel,
    evaluate_dataset,
    extract_mask,
    fit,
    load_checkpoint,
    predict_probmap,
    eval_model,
)
from .types import RasterImage, binarize


def _common_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="TOML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )


def _load(args, require_seed: bool = True) -> RunConfig:
    defaults: dict = {}
    if args.seed is not None:
        defaults["seed"] = args.seed
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.config is None and "seed" not in defaults:
        if require_seed:
            raise ConfigError("set --seed or provide a --config with one")
        defaults["seed"] = 0
    return load_run_config(args.config, overrides, defaults=defaults)


def cmd_synth(args) -> int:
    run = _load(args)
    data = run.data
    n_labeled = data.n_labeled if args.n_labeled is None else args.n_labeled
    n_unlabeled = data.n_unlabeled if args.n_unlabeled is None else args.n_unlabeled
    n_test = data.n_test if args.n_test is None else args.n_test
    manifest = gen_corpus(
        replace(data.synth, seed=run.seed),
        n_labeled,
        n_unlabeled,
        n_test,
        data.shift,
        args.out,
        provenance=provenance(run.raw),
    )
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote corpus to {args.out} ({counts})")
    return 0


def cmd_train(args) -> int:
    run = _load(args)
    tcfg = run.trainer
    if args.ablation is not None:
        tcfg = replace(tcfg, ablation=AblationLevel(args.ablation))
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    if args.max_steps is not None:
        tcfg = replace(tcfg, max_steps=args.max_steps)
    prov = provenance(run.raw)

    every = max(1, args.log_every)

    def progress(rec):
        if rec["step"] % every == 0:
            print(
                f"step {rec['step']:>6} epoch {rec['epoch']:>4} "
                f"total {rec['total']:.4f} sup {rec['l_sup']:.4f} "
                f"cons {rec['l_cons']:.4f} adv {rec['l_adv']:.4f}",
                file=sys.stderr,
            )

    result = fit(
        tcfg,
        args.data,
        args.out,
        resume=args.resume,
        provenance=prov,
        log_fn=progress,
        signal_stop=True,
    )
    write_training_report(args.out, result.log_path, prov)
    print(f"checkpoint: {result.checkpoint_path}")
    if result.best_checkpoint_path:
        print(f"best (val DSC {result.best_val_dsc:.4f}): {result.best_checkpoint_path}")
    print(f"train DSC {result.final_train_dsc:.4f} after {result.steps} steps")
    return 0


def cmd_eval(args) -> int:
    run = _load(args, require_seed=False)
    threshold = run.metrics.threshold if args.threshold is None else args.threshold
    split_dir = Path(args.data) / (run.metrics.split if args.split is None else args.split)
    record = evaluate_dataset(args.checkpoint, split_dir, threshold, run.metrics.model)

    examples = []
    state, _ = load_checkpoint(args.checkpoint)
    from .pipeline import load_split

    samples = load_split(split_dir.parent, split_dir.name, True)[: args.n_examples]
    for s in samples:
        pm = predict_probmap(
            eval_model(state),
            s.image,
            state.config.patch_size,
            state.config.patch_stride,
            state.config.student.unet.depth,
        )
        examples.append((s.id, s.image.pixels, s.mask.pixels, pm.probs, binarize(pm, threshold).pixels))

    payload = write_metrics_report(
        args.out, record, provenance(run.raw), config_echo=run.raw, examples=examples
    )
    print(json.dumps(payload["aggregates_x100"], indent=2, sort_keys=True))
    print(f"report written under {args.out}")
    return 0


def cmd_predict(args) -> int:
    run = _load(args, require_seed=False)
    threshold = run.metrics.threshold if args.threshold is None else args.threshold
    out_dir = Path(args.out) if args.out else None
    meta = provenance(run.raw)
    for input_path in args.inputs:
        image = load_image_png(input_path)
        pm, mask = extract_mask(args.checkpoint, image, threshold)
        stem = Path(input_path).stem
        target = out_dir if out_dir else Path(input_path).parent
        target.mkdir(parents=True, exist_ok=True)
        save_image_png(target / f"{stem}_prob.png", RasterImage(pm.probs[:, :, None]), meta)
        save_mask_png(target / f"{stem}_mask.png", mask, meta)
        print(f"{input_path} -> {target / (stem + '_prob.png')}, {target / (stem + '_mask.png')}")
    return 0


def cmd_classify(args) -> int:
    run = _load(args)
    data_dir = Path(args.data)
    if args.make_corpus:
        gen_staged_corpus(
            data_dir,
            run.downstream_n_per_class,
            image_size=run.downstream_image_size,
            seed=run.seed,
            provenance=provenance(run.raw),
        )
        print(f"staged corpus written to {data_dir}")
    if args.checkpoint is not None:
        n = populate_masks(data_dir, args.checkpoint)
        print(f"extracted {n} vessel maps from {args.checkpoint}")
    modes = list(MODES) if args.mode == "all" else [args.mode]
    reports = {}
    for mode in modes:
        rep = train_eval_classifier(mode, data_dir, run.downstream)
        reports[mode] = rep
        print(
            f"{mode:>7}: acc {rep['accuracy']:.4f} precision {rep['precision']:.4f} "
            f"recall {rep['recall']:.4f} f1 {rep['f1']:.4f}"
        )
    write_classification_report(args.out, reports, provenance(run.raw))
    print(f"classification report written under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vesselssl",
        description="Semi-supervised vessel segmentation: corpus synthesis, training, evaluation, prediction, and downstream staging.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a two-domain synthetic corpus")
    _common_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-labeled", type=int, default=None)
    p.add_argument("--n-unlabeled", type=int, default=None)
    p.add_argument("--n-test", type=int, default=None)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train on a corpus directory")
    _common_flags(p)
    p.add_argument("--data", type=Path, required=True, help="corpus root")
    p.add_argument("--out", type=Path, required=True, help="run output directory")
    p.add_argument("--ablation", choices=[l.value for l in AblationLevel], default=None)
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--max-steps", type=int, default=None)
    p.add_argument("--resume", type=Path, default=None, help="checkpoint to resume from")
    p.add_argument("--log-every", type=int, default=20)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    _common_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True, help="corpus root")
    p.add_argument("--split", default=None, help="split name (default from config)")
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--n-examples", type=int, default=4)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write probability + mask images for inputs")
    _common_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", dest="inputs", action="append", required=True, metavar="IMAGE")
    p.add_argument("--out", type=Path, default=None, help="output directory (default: beside input)")
    p.add_argument("--threshold", type=float, default=None)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("classify", help="train/evaluate the downstream stage classifier")
    _common_flags(p)
    p.add_argument("--data", type=Path, required=True, help="staged corpus root")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--mode", choices=[*MODES, "all"], default="all")
    p.add_argument("--make-corpus", action="store_true", help="generate the staged corpus first")
    p.add_argument("--checkpoint", type=Path, default=None, help="segmentation checkpoint for mask extraction")
    p.set_defaults(func=cmd_classify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except VesselSslError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
