"""Run configuration: TOML file + environment + CLI overrides, strict key
validation, and the config hash embedded into every artifact."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import __version__
from .errors import ConfigError
from .fusion import ClassifierConfig, FusionSpec
from .networks import DiscriminatorSpec, StudentSpec, TeacherSpec, UNetSpec
from .pipeline import AugmentationSpec, SoftAugment, StandardAugment
from .synth import DomainShiftSpec, SynthConfig
from .trainer import AblationLevel, TrainerConfig

ENV_PREFIX = "VESSELSSL_"

_TRAINER_SCALARS = {
    "profile",
    "ablation",
    "epochs",
    "max_steps",
    "lr",
    "adam_beta1",
    "batch_labeled",
    "batch_unlabeled",
    "k_passes",
    "patch_size",
    "patch_stride",
    "ema_cap",
    "lambda_ramp_epochs",
    "lambda_max",
    "alpha_balance",
    "adv_unlabeled_via_student",
    "soft_student_unlabeled",
    "entropy_mode",
    "normalization",
    "mse_target",
    "threshold",
    "val_fraction",
    "eval_every",
}

_SCHEMA = {
    "": {"seed"},
    "data": {
        "image_size",
        "n_trees",
        "branch_depth",
        "vessel_width",
        "background_texture_amplitude",
        "turn_sigma",
        "branch_prob",
        "n_labeled",
        "n_unlabeled",
        "n_test",
    },
    "data.shift": {"tint", "blur_sigma", "width_scale", "contrast_scale", "vignette_strength"},
    "trainer": _TRAINER_SCALARS,
    "trainer.unet": {"depth", "base_filters"},
    "trainer.student": {"noise_sigma", "dropout_gamma", "perturb_skip_connections"},
    "trainer.teacher": {"mc_dropout_rate", "mc_dropout_placement", "mc_dropout_layers"},
    "trainer.discriminator": {"base_filters", "conv_layers", "leaky_slope"},
    "trainer.soft": {"brightness", "contrast", "saturation", "hue", "grayscale_prob"},
    "trainer.standard": {
        "crop_prob",
        "crop_scale",
        "hflip_prob",
        "vflip_prob",
        "rotation_prob",
        "rotation_degrees",
    },
    "metrics": {"threshold", "two_class_mean", "model", "split"},
    "downstream": {
        "epochs",
        "lr",
        "batch_size",
        "test_fraction",
        "n_per_class",
        "image_size",
    },
    "downstream.spec": {"backbone_base", "backbone_depth", "contamination_rate"},
}


def load_toml(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc


def validate_keys(cfg: dict, prefix: str = "") -> None:
    """Reject keys that are not in the schema."""
    allowed = _SCHEMA.get(prefix)
    if allowed is None:
        raise ConfigError(f"unknown config section [{prefix}]")
    for key, value in cfg.items():
        if isinstance(value, dict):
            validate_keys(value, f"{prefix}.{key}".lstrip("."))
        elif key not in allowed:
            where = f"[{prefix}] " if prefix else ""
            raise ConfigError(f"unknown config key {where}{key!r}")


def _parse_literal(text: str):
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def apply_env_overrides(cfg: dict, environ=None) -> dict:
    """VESSELSSL_TRAINER_EPOCHS=30 sets cfg['trainer']['epochs']=30.

    The variable name after the prefix is matched greedily against schema
    sections (longest section wins), the remainder is the key.
    """
    environ = os.environ if environ is None else environ
    sections = sorted((s for s in _SCHEMA if s), key=lambda s: -len(s))
    for name, raw in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        dotted = name[len(ENV_PREFIX) :].lower().replace("_", ".")
        target, key = None, None
        for s in sections:
            prefix = s.replace(".", ".") + "."
            if dotted.startswith(prefix):
                rest = dotted[len(prefix) :].replace(".", "_")
                if rest in _SCHEMA[s]:
                    target, key = s, rest
                    break
        if target is None:
            if dotted.replace(".", "_") in _SCHEMA[""]:
                cfg[dotted.replace(".", "_")] = _parse_literal(raw)
                continue
            raise ConfigError(f"unrecognized environment override {name}")
        node = cfg
        for part in target.split("."):
            node = node.setdefault(part, {})
        node[key] = _parse_literal(raw)
    return cfg


def apply_set_overrides(cfg: dict, assignments) -> dict:
    """Apply --set section.key=value pairs (values parsed as TOML literals)."""
    for item in assignments or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        path, raw = item.split("=", 1)
        parts = path.strip().split(".")
        node = cfg
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into {path!r}")
        node[parts[-1]] = _parse_literal(raw.strip())
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


def provenance(cfg: dict) -> dict:
    return {"config_hash": config_hash(cfg), "seed": cfg.get("seed"), "version": __version__}


@dataclass(frozen=True)
class DataSection:
    synth: SynthConfig
    shift: DomainShiftSpec
    n_labeled: int = 5
    n_unlabeled: int = 13
    n_test: int = 5


@dataclass(frozen=True)
class MetricsSection:
    threshold: float = 0.5
    two_class_mean: bool = False
    model: str = "auto"
    split: str = "test_target"


@dataclass(frozen=True)
class RunConfig:
    seed: int
    raw: dict
    data: DataSection
    trainer: TrainerConfig
    metrics: MetricsSection
    downstream: ClassifierConfig
    downstream_n_per_class: int = 24
    downstream_image_size: int = 96


def _take(d: dict, keys) -> dict:
    return {k: d[k] for k in keys if k in d}


def _tupled(v):
    return tuple(v) if isinstance(v, list) else v


def resolve(cfg: dict) -> RunConfig:
    """Validate the merged config dict and build typed configs from it."""
    validate_keys(cfg)
    if "seed" not in cfg:
        raise ConfigError("config must set a top-level seed")
    seed = int(cfg["seed"])

    data = dict(cfg.get("data", {}))
    shift_d = data.pop("shift", None)
    if "vessel_width" in data:
        data["vessel_width_px"] = _tupled(data.pop("vessel_width"))
    counts = {k: int(data.pop(k)) for k in ("n_labeled", "n_unlabeled", "n_test") if k in data}
    synth = SynthConfig(seed=seed, **data)
    shift = DomainShiftSpec.default_target() if shift_d is None else DomainShiftSpec(
        **{k: _tupled(v) for k, v in shift_d.items()}
    )
    data_section = DataSection(synth=synth, shift=shift, **counts)

    tr = dict(cfg.get("trainer", {}))
    profile = tr.pop("profile", "desk")
    unet_d = tr.pop("unet", None)
    student_d = tr.pop("student", {})
    teacher_d = tr.pop("teacher", {})
    disc_d = tr.pop("discriminator", {})
    soft_d = tr.pop("soft", {})
    standard_d = tr.pop("standard", {})
    if "ablation" in tr:
        tr["ablation"] = AblationLevel(tr["ablation"])
    makers = {"desk": TrainerConfig.desk, "tiny": TrainerConfig.tiny, "full": TrainerConfig}
    if profile not in makers:
        raise ConfigError(f"unknown trainer profile {profile!r}")
    base = makers[profile](seed=seed)
    trainer = replace(base, **tr) if tr else base
    unet = trainer.student.unet if unet_d is None else replace(trainer.student.unet, **unet_d)
    student = replace(
        trainer.student,
        unet=unet,
        **{k: _tupled(v) for k, v in student_d.items()},
    )
    teacher = replace(trainer.teacher, unet=unet, **teacher_d)
    disc = replace(trainer.discriminator, **disc_d)
    augment = AugmentationSpec(
        standard=replace(trainer.augment.standard, **{k: _tupled(v) for k, v in standard_d.items()}),
        soft=replace(trainer.augment.soft, **soft_d),
    )
    trainer = replace(trainer, student=student, teacher=teacher, discriminator=disc, augment=augment)

    met = MetricsSection(**_take(cfg.get("metrics", {}), _SCHEMA["metrics"]))

    ds = dict(cfg.get("downstream", {}))
    spec_d = ds.pop("spec", {})
    n_per_class = int(ds.pop("n_per_class", 24))
    ds_image_size = int(ds.pop("image_size", 96))
    downstream = ClassifierConfig(seed=seed, spec=FusionSpec(**spec_d), **ds)

    return RunConfig(
        seed=seed,
        raw=cfg,
        data=data_section,
        trainer=trainer,
        metrics=met,
        downstream=downstream,
        downstream_n_per_class=n_per_class,
        downstream_image_size=ds_image_size,
    )


def load_run_config(path=None, set_overrides=None, environ=None, defaults=None) -> RunConfig:
    """File -> env -> --set, then resolve to typed configs."""
    cfg = dict(defaults or {})
    if path is not None:
        file_cfg = load_toml(path)
        for k, v in file_cfg.items():
            if isinstance(v, dict) and isinstance(cfg.get(k), dict):
                merged = dict(cfg[k])
                merged.update(v)
                cfg[k] = merged
            else:
                cfg[k] = v
    apply_env_overrides(cfg, environ)
    apply_set_overrides(cfg, set_overrides)
    return resolve(cfg)
