"""Training loop: alternating student/discriminator updates, EMA teacher
maintenance, consistency scheduling, ablation levels, and checkpointing.

Per step: (a) supervised loss on labeled patches, (b) teacher sampling on
unlabeled patches, (c) student consistency on unlabeled patches, (d) student
update including the adversarial term, (e) one discriminator update on
detached inputs, (f) EMA update of the teacher.
"""

from __future__ import annotations

import enum
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import BadCheckpoint, EmptyDataset, IoFailure, NonFiniteLoss, ShapeMismatch
from .losses import (
    LossBreakdown,
    adversarial_pair_losses,
    bce,
    consistency_loss,
    dice_loss,
    supervised_loss,
    total_loss,
)
from .metrics import MetricsRecord, image_metrics
from .networks import (
    Discriminator,
    DiscriminatorSpec,
    FeatureMap,
    StudentNet,
    StudentSpec,
    TeacherNet,
    TeacherSpec,
    UNetSpec,
    collate_images,
    collate_masks,
)
from .pipeline import (
    AugmentationSpec,
    augment_soft,
    extract_patches,
    load_split,
    make_batches,
    make_grid,
    stitch_patches,
)
from .rng import RngHub
from .types import BinaryMask, DomainTag, ProbMap, binarize
from .unveiling import mc_bundle

CHECKPOINT_FORMAT_VERSION = 1


class AblationLevel(str, enum.Enum):
    """Ladder of module toggles; each level extends the previous one.

    SUPERVISED is the labeled-only baseline (no discriminator, no teacher).
    I: plain student + mask real/fake discriminator. II: + tri-decoder.
    III: + EMA teacher and consistency. IV: discriminator moves to feature
    alignment. V: + vessel unveiling.
    """

    SUPERVISED = "supervised"
    I = "I"
    II = "II"
    III = "III"
    IV = "IV"
    V = "V"

    @property
    def uses_discriminator(self) -> bool:
        return self is not AblationLevel.SUPERVISED

    @property
    def uses_tri_decoder(self) -> bool:
        return self in (AblationLevel.II, AblationLevel.III, AblationLevel.IV, AblationLevel.V)

    @property
    def uses_teacher(self) -> bool:
        return self in (AblationLevel.III, AblationLevel.IV, AblationLevel.V)

    @property
    def disc_on_features(self) -> bool:
        return self in (AblationLevel.IV, AblationLevel.V)

    @property
    def uses_unveiling(self) -> bool:
        return self is AblationLevel.V


@dataclass(frozen=True)
class TrainerConfig:
    """Defaults follow the published full-scale protocol; desk()/tiny() build
    profiles sized for CPU runs."""

    seed: int = 0
    ablation: AblationLevel = AblationLevel.V
    epochs: int = 250
    max_steps: int | None = None
    lr: float = 1e-4
    adam_beta1: float = 0.9
    batch_labeled: int = 10
    batch_unlabeled: int = 10
    k_passes: int = 8
    patch_size: int = 400
    patch_stride: int | None = None
    ema_cap: float = 0.95
    lambda_ramp_epochs: int = 30
    lambda_max: float = 1.0
    alpha_balance: float = 0.5
    adv_unlabeled_via_student: bool = True
    soft_student_unlabeled: bool = True
    entropy_mode: str = "predictive"
    normalization: str = "normalized"
    mse_target: str = "teacher"
    threshold: float = 0.5
    val_fraction: float = 0.1
    eval_every: int = 10
    student: StudentSpec = field(default_factory=StudentSpec)
    teacher: TeacherSpec = field(default_factory=TeacherSpec)
    discriminator: DiscriminatorSpec = field(default_factory=DiscriminatorSpec)
    augment: AugmentationSpec = field(default_factory=AugmentationSpec)

    @staticmethod
    def full(seed: int = 0, ablation: AblationLevel = AblationLevel.V, **overrides) -> "TrainerConfig":
        """Full-scale profile: 400px patches, 64 base filters, 250 epochs."""
        unet = UNetSpec(depth=4, base_filters=64)
        cfg = TrainerConfig(
            seed=seed,
            ablation=ablation,
            student=StudentSpec(unet=unet),
            teacher=TeacherSpec(unet=unet),
        )
        return replace(cfg, **overrides) if overrides else cfg

    @staticmethod
    def desk(seed: int = 0, ablation: AblationLevel = AblationLevel.V, **overrides) -> "TrainerConfig":
        """Desk-scale profile: 128px full-image patches, small filter counts."""
        unet = UNetSpec(depth=4, base_filters=16)
        cfg = TrainerConfig(
            seed=seed,
            ablation=ablation,
            epochs=60,
            batch_labeled=5,
            batch_unlabeled=5,
            k_passes=4,
            patch_size=128,
            lambda_ramp_epochs=10,
            eval_every=10,
            student=StudentSpec(unet=unet),
            teacher=TeacherSpec(unet=unet),
            discriminator=DiscriminatorSpec(base_filters=32),
        )
        return replace(cfg, **overrides) if overrides else cfg

    @staticmethod
    def tiny(seed: int = 0, ablation: AblationLevel = AblationLevel.V, **overrides) -> "TrainerConfig":
        """Smallest runnable profile for fast tests: 64px, depth 3."""
        unet = UNetSpec(depth=3, base_filters=8)
        cfg = TrainerConfig(
            seed=seed,
            ablation=ablation,
            epochs=2,
            batch_labeled=2,
            batch_unlabeled=2,
            k_passes=2,
            patch_size=64,
            lambda_ramp_epochs=1,
            eval_every=100,
            val_fraction=0.0,
            student=StudentSpec(unet=unet),
            teacher=TeacherSpec(unet=unet),
            discriminator=DiscriminatorSpec(base_filters=16),
        )
        return replace(cfg, **overrides) if overrides else cfg


def ema_decay(epoch: int, cap: float = 0.95) -> float:
    """min(1 - 1/(epoch+1), cap); 0 at epoch 0 so the teacher starts as a copy."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return min(1.0 - 1.0 / (epoch + 1), cap)


def _ema_pairs(teacher: TeacherNet, student: StudentNet):
    return ((teacher.encoder, student.encoder), (teacher.decoder, student.decoder_main))


@torch.no_grad()
def ema_update(teacher: TeacherNet, student: StudentNet, decay: float) -> None:
    """theta_teacher <- decay * theta_teacher + (1 - decay) * theta_student."""
    for t_mod, s_mod in _ema_pairs(teacher, student):
        for tp, sp in zip(t_mod.parameters(), s_mod.parameters()):
            if tp.shape != sp.shape:
                raise ShapeMismatch(f"teacher {tuple(tp.shape)} vs student {tuple(sp.shape)}")
            tp.mul_(decay).add_(sp, alpha=1.0 - decay)


def lambda_schedule(epoch: int, ramp_epochs: int, lam_max: float = 1.0) -> float:
    """Gaussian ramp-up exp(-5 (1 - e/E)^2) toward lam_max, 1 after E epochs."""
    if ramp_epochs <= 0:
        return lam_max
    frac = min(epoch / ramp_epochs, 1.0)
    return lam_max * math.exp(-5.0 * (1.0 - frac) ** 2)


@dataclass
class TrainerState:
    config: TrainerConfig
    student: StudentNet
    teacher: TeacherNet | None
    discriminator: Discriminator | None
    opt_student: torch.optim.Optimizer
    opt_disc: torch.optim.Optimizer | None
    rng: RngHub
    epoch: int = 0
    step: int = 0
    best_val_dsc: float = -1.0
    best_epoch: int = -1
    stop_requested: bool = False


def init_state(config: TrainerConfig) -> TrainerState:
    """Build models, optimizers, and rng streams from the config seed."""
    rng = RngHub(config.seed)
    torch.manual_seed(int(np.random.SeedSequence(entropy=config.seed, spawn_key=(0xFEED,)).generate_state(1, np.uint64)[0]))
    student = StudentNet(config.student)
    teacher = None
    if config.ablation.uses_teacher:
        teacher = TeacherNet(config.teacher)
        teacher.encoder.load_state_dict(student.encoder.state_dict())
        teacher.decoder.load_state_dict(student.decoder_main.state_dict())
        for p in teacher.parameters():
            p.requires_grad_(False)
    disc = None
    opt_disc = None
    if config.ablation.uses_discriminator:
        in_ch = config.student.unet.bottleneck_channels if config.ablation.disc_on_features else 1
        disc = Discriminator(in_ch, config.discriminator)
        opt_disc = torch.optim.Adam(disc.parameters(), lr=config.lr, betas=(config.adam_beta1, 0.999))
    opt_student = torch.optim.Adam(student.parameters(), lr=config.lr, betas=(config.adam_beta1, 0.999))
    return TrainerState(
        config=config,
        student=student,
        teacher=teacher,
        discriminator=disc,
        opt_student=opt_student,
        opt_disc=opt_disc,
        rng=rng,
    )


def _zero_losses():
    z = torch.zeros(())
    return z, z, z


def train_step(batch, state: TrainerState) -> LossBreakdown:
    """One optimization step; returns the loss breakdown for logging."""
    cfg = state.config
    level = cfg.ablation
    lam = lambda_schedule(state.epoch, cfg.lambda_ramp_epochs, cfg.lambda_max)

    x_lab = collate_images([im for im, _ in batch.labeled])
    y_lab = collate_masks([m for _, m in batch.labeled])

    # (a) supervised forward on labeled patches
    if level.uses_tri_decoder:
        z_lab, y_m, y_n, y_d = state.student(
            x_lab, noise_gen=state.rng.noise, dropout_gen=state.rng.dropout
        )
        l_sup_t = supervised_loss(y_m, y_n, y_d, y_lab)
    else:
        z_lab, y_m, _, _ = state.student(x_lab, aux=False)
        l_sup_t = bce(y_m, y_lab) + dice_loss(y_m, y_lab)

    l_cons_t, l_mse_t, l_dist_t = _zero_losses()
    y_unl_student = None
    z_unl_student = None
    z_unl_teacher = None

    if batch.unlabeled and (level.uses_teacher or level.uses_discriminator):
        # (c) student main-decoder forward on (softly augmented) unlabeled patches
        if cfg.soft_student_unlabeled:
            student_view = [augment_soft(im, cfg.augment.soft, state.rng.augment) for im in batch.unlabeled]
        else:
            student_view = batch.unlabeled
        x_unl = collate_images(student_view)
        z_unl_student, y_unl_student, _, _ = state.student(x_unl, aux=False)

    if state.teacher is not None and batch.unlabeled:
        # (b) teacher targets on unlabeled patches
        with torch.no_grad():
            z_unl_teacher, teacher_det = state.teacher(collate_images(batch.unlabeled), stochastic=False)
        if level.uses_unveiling:
            bundle = mc_bundle(
                state.teacher,
                batch.unlabeled,
                cfg.k_passes,
                state.rng.mc,
                soft=cfg.augment.soft,
                aug_rng=state.rng.mc_augment,
                entropy_mode=cfg.entropy_mode,
                normalization=cfg.normalization,
            )
            # MSE aligns with the teacher's (deterministic) output; the MC
            # bundle contributes only the unveiled target and its weighting.
            l_cons_t, l_mse_t, l_dist_t = consistency_loss(
                y_unl_student,
                teacher_det,
                bundle.unveiled,
                bundle.i_vessel,
                cfg.alpha_balance,
                cfg.mse_target,
            )
        else:
            l_mse_t = ((y_unl_student - teacher_det.detach()) ** 2).mean()
            l_dist_t = torch.zeros(())
            l_cons_t = cfg.alpha_balance * l_mse_t

    # (d) adversarial term and student update. Both domains pass through the
    # discriminator in one batch: its BatchNorm uses batch statistics, and
    # per-domain forwards would normalize away the very shift it must detect.
    def disc_pair(a: torch.Tensor, b: torch.Tensor):
        joint = state.discriminator(torch.cat([a, b], dim=0))
        return joint[: a.shape[0]], joint[a.shape[0] :]

    l_adv_t = torch.zeros(())
    had_adv = False
    if state.discriminator is not None and batch.unlabeled:
        if level.disc_on_features:
            f_lab = FeatureMap(z_lab, "student_encoder", DomainTag.LABELED_SOURCE)
            if cfg.adv_unlabeled_via_student:
                f_unl = FeatureMap(z_unl_student, "student_encoder", DomainTag.UNLABELED_TARGET)
            else:
                f_unl = FeatureMap(z_unl_teacher, "teacher_encoder", DomainTag.UNLABELED_TARGET)
            d_lab, d_unl = disc_pair(f_lab.values, f_unl.values)
        else:
            d_lab, d_unl = disc_pair(y_lab, y_unl_student)
        l_adv_t, _ = adversarial_pair_losses(d_lab, d_unl)
        had_adv = True

    student_objective = l_sup_t + lam * l_cons_t + l_adv_t
    state.opt_student.zero_grad()
    if state.discriminator is not None:
        state.opt_disc.zero_grad()
    student_objective.backward()
    state.opt_student.step()

    # (e) discriminator update on detached inputs
    l_disc_t = torch.zeros(())
    if state.discriminator is not None and batch.unlabeled:
        if level.disc_on_features:
            disc_lab = z_lab.detach()
            disc_unl = (z_unl_teacher if state.teacher is not None else z_unl_student).detach()
        else:
            disc_lab = y_lab
            disc_unl = y_unl_student.detach()
        _, l_disc_t = adversarial_pair_losses(*disc_pair(disc_lab, disc_unl))
        state.opt_disc.zero_grad()
        l_disc_t.backward()
        state.opt_disc.step()

    # (f) EMA teacher update
    if state.teacher is not None:
        ema_update(state.teacher, state.student, ema_decay(state.epoch, cfg.ema_cap))

    state.step += 1
    return total_loss(
        l_sup=float(l_sup_t.detach()),
        l_cons_mse=float(l_mse_t.detach()),
        l_cons_dist=float(l_dist_t.detach()),
        l_adv=float(l_adv_t.detach()) if had_adv else 0.0,
        l_disc=float(l_disc_t.detach()),
        lambda_cons=lam,
        alpha_balance=cfg.alpha_balance,
    )


def eval_model(state: TrainerState):
    """The model predictions are scored with: teacher when present, else student."""
    if state.teacher is not None:
        return lambda x: state.teacher(x, stochastic=False)[1]
    return lambda x: state.student(x, aux=False)[1]


def predict_probmap(forward_fn, image, patch_size: int, stride: int | None = None, depth: int = 4) -> ProbMap:
    """Full-image probability map via tiled patches and averaged stitching."""
    px = image.pixels if hasattr(image, "pixels") else np.asarray(image)
    h, w = px.shape[:2]
    div = 2**depth
    p_eff = min(patch_size, h, w)
    p_eff -= p_eff % div
    if p_eff < div:
        raise ShapeMismatch(f"image {h}x{w} too small for depth {depth}")
    grid = make_grid(h, w, p_eff, stride if stride is not None else p_eff)
    patches = extract_patches(px, grid)
    preds = []
    with torch.no_grad():
        for chunk_start in range(0, len(patches), 8):
            chunk = patches[chunk_start : chunk_start + 8]
            out = forward_fn(collate_images(chunk))
            preds.extend(out[i, 0].numpy().astype(np.float64) for i in range(out.shape[0]))
    return stitch_patches([np.clip(p, 0.0, 1.0) for p in preds], grid)


def _dsc_on_samples(forward_fn, samples, patch_size: int, depth: int, threshold: float) -> float:
    scores = []
    for s in samples:
        pm = predict_probmap(forward_fn, s.image, patch_size, depth=depth)
        m = image_metrics(s.id, binarize(pm, threshold), s.mask)
        scores.append(m.dsc)
    return float(np.mean(scores))


def save_checkpoint(path, state: TrainerState, extra: dict | None = None) -> None:
    """Atomic checkpoint write (temp file + rename)."""
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "version": __version__,
        "config": _config_to_jsonable(state.config),
        "epoch": state.epoch,
        "step": state.step,
        "student": state.student.state_dict(),
        "teacher": None if state.teacher is None else state.teacher.state_dict(),
        "discriminator": None if state.discriminator is None else state.discriminator.state_dict(),
        "opt_student": state.opt_student.state_dict(),
        "opt_disc": None if state.opt_disc is None else state.opt_disc.state_dict(),
        "rng": state.rng.state_dict(),
        "torch_rng": torch.get_rng_state(),
        "best_val_dsc": state.best_val_dsc,
        "best_epoch": state.best_epoch,
    }
    if extra:
        payload.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            torch.save(payload, fh)
        os.replace(tmp, path)
    except OSError as exc:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise IoFailure(f"cannot write checkpoint {path}: {exc}") from exc


def _config_to_jsonable(cfg: TrainerConfig) -> dict:
    d = asdict(cfg)
    d["ablation"] = cfg.ablation.value
    return d


def config_from_jsonable(d: dict) -> TrainerConfig:
    d = dict(d)
    d["ablation"] = AblationLevel(d["ablation"])
    d["student"] = StudentSpec(
        unet=UNetSpec(**d["student"].pop("unet")), **{k: tuple(v) if isinstance(v, list) else v for k, v in d["student"].items()}
    )
    d["teacher"] = TeacherSpec(unet=UNetSpec(**d["teacher"].pop("unet")), **d["teacher"])
    d["discriminator"] = DiscriminatorSpec(**d["discriminator"])
    aug = d["augment"]
    from .pipeline import SoftAugment, StandardAugment

    d["augment"] = AugmentationSpec(
        standard=StandardAugment(**{k: tuple(v) if isinstance(v, list) else v for k, v in aug["standard"].items()}),
        soft=SoftAugment(**aug["soft"]),
    )
    d["max_steps"] = d.get("max_steps")
    d["patch_stride"] = d.get("patch_stride")
    return TrainerConfig(**d)


def load_checkpoint(path) -> tuple:
    """Returns (state, payload). Restores models, optimizers, and rng streams."""
    import pickle
    import zipfile

    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, ValueError, EOFError, pickle.UnpicklingError, zipfile.BadZipFile) as exc:
        raise BadCheckpoint(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise BadCheckpoint(f"unsupported checkpoint format in {path}")
    config = config_from_jsonable(payload["config"])
    state = init_state(config)
    state.student.load_state_dict(payload["student"])
    if payload["teacher"] is not None:
        state.teacher.load_state_dict(payload["teacher"])
    if payload["discriminator"] is not None:
        state.discriminator.load_state_dict(payload["discriminator"])
    state.opt_student.load_state_dict(payload["opt_student"])
    if payload["opt_disc"] is not None:
        state.opt_disc.load_state_dict(payload["opt_disc"])
    state.rng.load_state_dict(payload["rng"])
    torch.set_rng_state(payload["torch_rng"])
    state.epoch = payload["epoch"]
    state.step = payload["step"]
    state.best_val_dsc = payload["best_val_dsc"]
    state.best_epoch = payload["best_epoch"]
    return state, payload


@dataclass
class FitResult:
    checkpoint_path: Path
    best_checkpoint_path: Path | None
    log_path: Path
    final_train_dsc: float | None
    best_val_dsc: float
    steps: int


def fit(
    config: TrainerConfig,
    data_root,
    out_dir,
    resume=None,
    provenance: dict | None = None,
    log_fn=None,
    signal_stop: bool = False,
) -> FitResult:
    """Run the training protocol on a corpus directory; writes the JSONL step
    log plus final (and best-by-validation) checkpoints under out_dir.

    signal_stop=True makes SIGINT/SIGTERM request a checkpoint-and-exit at the
    next step boundary (handlers restored on return).
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    level = config.ablation

    labeled = load_split(data_root, "labeled", True)
    unlabeled = []
    if level.uses_discriminator or level.uses_teacher:
        unlabeled = load_split(data_root, "unlabeled", False)
        if not unlabeled:
            raise EmptyDataset(f"ablation {level.value} needs unlabeled data")
    if not labeled:
        raise EmptyDataset("no labeled samples")

    n_val = int(round(config.val_fraction * len(labeled)))
    val_samples = labeled[:n_val]
    train_labeled = labeled[n_val:] if n_val else labeled
    if not train_labeled:
        raise EmptyDataset("validation split consumed every labeled sample")

    if resume is not None:
        state, _ = load_checkpoint(resume)
    else:
        state = init_state(config)

    depth = config.student.unet.depth
    log_path = out / "train_log.jsonl"
    log_mode = "a" if resume is not None else "w"
    best_path = out / "checkpoint_best.pt"
    wrote_best = False

    restore_handlers = []
    if signal_stop:
        import signal

        def _request_stop(signum, frame):
            state.stop_requested = True

        for sig in (signal.SIGINT, signal.SIGTERM):
            restore_handlers.append((sig, signal.signal(sig, _request_stop)))

    with open(log_path, log_mode) as log:
        done = False
        for epoch in range(state.epoch, config.epochs):
            state.epoch = epoch
            batches = make_batches(
                train_labeled,
                unlabeled,
                config.batch_labeled,
                config.batch_unlabeled,
                config.patch_size,
                state.rng.data,
                augment=config.augment.standard,
                stride=config.patch_stride,
            )
            for batch in batches:
                try:
                    breakdown = train_step(batch, state)
                except NonFiniteLoss:
                    save_checkpoint(out / "checkpoint_diverged.pt", state)
                    raise
                record = {"step": state.step, "epoch": epoch, **breakdown.as_dict(),
                          "ema_decay": ema_decay(epoch, config.ema_cap)}
                log.write(json.dumps(record) + "\n")
                if log_fn is not None:
                    log_fn(record)
                if config.max_steps is not None and state.step >= config.max_steps:
                    done = True
                if state.stop_requested:
                    done = True
                if done:
                    break
            if val_samples and (epoch % config.eval_every == 0 or epoch == config.epochs - 1 or done):
                dsc = _dsc_on_samples(eval_model(state), val_samples, config.patch_size, depth, config.threshold)
                if dsc > state.best_val_dsc:
                    state.best_val_dsc = dsc
                    state.best_epoch = epoch
                    save_checkpoint(best_path, state, extra=provenance)
                    wrote_best = True
            if done:
                break
            state.epoch = epoch + 1

    if restore_handlers:
        import signal

        for sig, old in restore_handlers:
            signal.signal(sig, old)

    final_path = out / "checkpoint_final.pt"
    save_checkpoint(final_path, state, extra=provenance)
    train_dsc = None
    if train_labeled:
        train_dsc = _dsc_on_samples(eval_model(state), train_labeled, config.patch_size, depth, config.threshold)
    summary = {
        "version": __version__,
        "seed": config.seed,
        "ablation": level.value,
        "steps": state.step,
        "epochs_run": min(state.epoch + 1, config.epochs),
        "final_train_dsc": train_dsc,
        "best_val_dsc": state.best_val_dsc,
        "best_epoch": state.best_epoch,
    }
    if provenance:
        summary.update(provenance)
    with open(out / "run_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return FitResult(
        checkpoint_path=final_path,
        best_checkpoint_path=best_path if wrote_best else None,
        log_path=log_path,
        final_train_dsc=train_dsc,
        best_val_dsc=state.best_val_dsc,
        steps=state.step,
    )


def evaluate_dataset(checkpoint_path, test_dir, threshold: float = 0.5, model: str = "auto") -> MetricsRecord:
    """Score every image of a test split (images/ + masks/) at the threshold."""
    state, _ = load_checkpoint(checkpoint_path)
    return evaluate_state(state, test_dir, threshold, model)


def evaluate_state(state: TrainerState, test_dir, threshold: float = 0.5, model: str = "auto") -> MetricsRecord:
    test_dir = Path(test_dir)
    split = test_dir.name
    root = test_dir.parent
    samples = load_split(root, split, True)
    if model == "student" or (model == "auto" and state.teacher is None):
        fn = lambda x: state.student(x, aux=False)[1]
    else:
        fn = lambda x: state.teacher(x, stochastic=False)[1]
    cfg = state.config
    per_image = []
    for s in samples:
        pm = predict_probmap(fn, s.image, cfg.patch_size, cfg.patch_stride, cfg.student.unet.depth)
        per_image.append(image_metrics(s.id, binarize(pm, threshold), s.mask))
    return MetricsRecord.from_images(per_image)


def extract_mask(checkpoint_path, image, threshold: float | None = None):
    """Full-image vessel probability map (teacher, deterministic) from a
    checkpoint; returns (ProbMap, BinaryMask or None if no threshold)."""
    state, _ = load_checkpoint(checkpoint_path)
    cfg = state.config
    pm = predict_probmap(
        eval_model(state), image, cfg.patch_size, cfg.patch_stride, cfg.student.unet.depth
    )
    return pm, (binarize(pm, threshold) if threshold is not None else None)
