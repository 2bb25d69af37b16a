import json
import math

import numpy as np
import pytest
import torch

from vesselssl.errors import BadCheckpoint, EmptyDataset
from vesselssl.networks import StudentNet, StudentSpec, TeacherNet, TeacherSpec, UNetSpec
from vesselssl.pipeline import make_batches
from vesselssl.trainer import (
    AblationLevel,
    TrainerConfig,
    ema_decay,
    ema_update,
    evaluate_dataset,
    extract_mask,
    fit,
    init_state,
    lambda_schedule,
    load_checkpoint,
    predict_probmap,
    save_checkpoint,
    train_step,
)
from vesselssl.synth import load_image_png


def _params(module):
    return [p.detach().clone() for p in module.parameters()]


def _tiny_batch(state, corpus_samples):
    cfg = state.config
    return next(
        iter(
            make_batches(
                corpus_samples["labeled"],
                corpus_samples["unlabeled"],
                cfg.batch_labeled,
                cfg.batch_unlabeled,
                cfg.patch_size,
                state.rng.data,
                augment=cfg.augment.standard,
            )
        )
    )


class TestEmaDecay:
    @pytest.mark.parametrize("epoch,expected", [(0, 0.0), (4, 0.8), (19, 0.95), (100, 0.95)])
    def test_examples(self, epoch, expected):
        assert ema_decay(epoch) == pytest.approx(expected, abs=1e-15)

    def test_closed_form_sweep(self):
        for e in range(0, 10_001):
            assert ema_decay(e) == min(1.0 - 1.0 / (e + 1), 0.95)

    def test_negative_epoch(self):
        with pytest.raises(ValueError):
            ema_decay(-1)


class TestEmaUpdate:
    def _pair(self):
        torch.manual_seed(0)
        unet = UNetSpec(depth=2, base_filters=4)
        student = StudentNet(StudentSpec(unet=unet))
        teacher = TeacherNet(TeacherSpec(unet=unet))
        return teacher, student

    def test_decay_zero_copies_student(self):
        teacher, student = self._pair()
        ema_update(teacher, student, 0.0)
        for tp, sp in zip(teacher.encoder.parameters(), student.encoder.parameters()):
            assert torch.equal(tp, sp)
        for tp, sp in zip(teacher.decoder.parameters(), student.decoder_main.parameters()):
            assert torch.equal(tp, sp)

    def test_decay_one_freezes_teacher(self):
        teacher, student = self._pair()
        before = _params(teacher)
        ema_update(teacher, student, 1.0)
        for b, a in zip(before, teacher.parameters()):
            assert torch.equal(b, a)

    def test_scalar_arithmetic(self):
        teacher, student = self._pair()
        with torch.no_grad():
            for p in teacher.parameters():
                p.zero_()
            for p in student.parameters():
                p.fill_(1.0)
        ema_update(teacher, student, 0.95)
        for tp in teacher.encoder.parameters():
            assert torch.allclose(tp, torch.full_like(tp, 0.05))


class TestLambdaSchedule:
    def test_ramp_endpoints(self):
        assert lambda_schedule(0, 30) == pytest.approx(math.exp(-5.0))
        assert lambda_schedule(30, 30) == 1.0
        assert lambda_schedule(60, 30) == 1.0

    def test_monotone(self):
        vals = [lambda_schedule(e, 30) for e in range(31)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))

    def test_disabled_ramp(self):
        assert lambda_schedule(0, 0, 0.7) == 0.7


class TestTrainStep:
    def test_breakdown_invariants(self, tiny_corpus_samples):
        cfg = TrainerConfig.tiny(seed=5)
        state = init_state(cfg)
        for _ in range(3):
            b = train_step(_tiny_batch(state, tiny_corpus_samples), state)
            assert b.total == pytest.approx(b.l_sup + b.lambda_cons * b.l_cons + b.l_adv, abs=1e-6)
            assert b.l_cons == pytest.approx(
                cfg.alpha_balance * b.l_cons_mse + b.l_cons_dist, abs=1e-6
            )

    def test_level_one_has_no_teacher(self, tiny_corpus_samples):
        cfg = TrainerConfig.tiny(seed=5, ablation=AblationLevel.I)
        state = init_state(cfg)
        assert state.teacher is None
        b = train_step(_tiny_batch(state, tiny_corpus_samples), state)
        assert b.l_cons == 0.0 and b.l_cons_mse == 0.0 and b.l_cons_dist == 0.0
        assert b.l_adv > 0.0

    def test_supervised_has_no_discriminator(self, tiny_corpus_samples):
        cfg = TrainerConfig.tiny(seed=5, ablation=AblationLevel.SUPERVISED)
        state = init_state(cfg)
        assert state.discriminator is None and state.teacher is None
        b = train_step(_tiny_batch(state, tiny_corpus_samples), state)
        assert b.l_adv == 0.0 and b.l_disc == 0.0

    def test_teacher_only_moved_by_ema(self, tiny_corpus_samples):
        cfg = TrainerConfig.tiny(seed=6)
        state = init_state(cfg)
        state.epoch = 3  # nonzero decay so the check is nontrivial
        assert all(not p.requires_grad for p in state.teacher.parameters())
        teacher_before = _params(state.teacher.encoder) + _params(state.teacher.decoder)
        train_step(_tiny_batch(state, tiny_corpus_samples), state)
        student_after = _params(state.student.encoder) + _params(state.student.decoder_main)
        decay = ema_decay(3, cfg.ema_cap)
        for tb, ta, sa in zip(
            teacher_before,
            _params(state.teacher.encoder) + _params(state.teacher.decoder),
            student_after,
        ):
            assert torch.equal(ta, tb * decay + sa * (1.0 - decay))

    def test_epoch_zero_update_copies_student(self, tiny_corpus_samples):
        cfg = TrainerConfig.tiny(seed=7)
        state = init_state(cfg)
        train_step(_tiny_batch(state, tiny_corpus_samples), state)
        for tp, sp in zip(state.teacher.encoder.parameters(), state.student.encoder.parameters()):
            assert torch.equal(tp, sp)
        for tp, sp in zip(state.teacher.decoder.parameters(), state.student.decoder_main.parameters()):
            assert torch.equal(tp, sp)

    def test_discriminator_step_leaves_segmenters_alone(self, tiny_corpus_samples):
        # run two steps; between steps hash student+teacher params, then
        # verify the discriminator's own params did change (it trains) while
        # the EMA identity above pins teacher movement to ema_update alone
        cfg = TrainerConfig.tiny(seed=8)
        state = init_state(cfg)
        train_step(_tiny_batch(state, tiny_corpus_samples), state)
        disc_before = _params(state.discriminator)
        train_step(_tiny_batch(state, tiny_corpus_samples), state)
        assert any(not torch.equal(a, b) for a, b in zip(disc_before, _params(state.discriminator)))


class TestFitAndCheckpoints:
    def test_fixed_seed_logs_identical(self, tiny_corpus, tmp_path):
        cfg = TrainerConfig.tiny(seed=3)
        fit(cfg, tiny_corpus, tmp_path / "a")
        fit(cfg, tiny_corpus, tmp_path / "b")
        assert (tmp_path / "a" / "train_log.jsonl").read_bytes() == (
            tmp_path / "b" / "train_log.jsonl"
        ).read_bytes()

    def test_identical_checkpoints_across_runs(self, tiny_corpus, tmp_path):
        cfg = TrainerConfig.tiny(seed=4)
        fit(cfg, tiny_corpus, tmp_path / "a")
        fit(cfg, tiny_corpus, tmp_path / "b")
        pa = torch.load(tmp_path / "a" / "checkpoint_final.pt", weights_only=False)
        pb = torch.load(tmp_path / "b" / "checkpoint_final.pt", weights_only=False)
        for key in ("student", "teacher", "discriminator"):
            for k in pa[key]:
                assert torch.equal(pa[key][k], pb[key][k]), (key, k)

    def test_checkpoint_roundtrip_bitwise(self, tiny_run, tmp_path):
        state, payload = load_checkpoint(tiny_run["result"].checkpoint_path)
        path2 = tmp_path / "again.pt"
        save_checkpoint(path2, state)
        payload2 = torch.load(path2, weights_only=False)
        for k in payload["student"]:
            assert torch.equal(payload["student"][k], payload2["student"][k])
        assert payload["rng"]["data"] == payload2["rng"]["data"]
        assert payload["epoch"] == payload2["epoch"]

    def test_resume_continues_loss_stream(self, tiny_corpus, tmp_path):
        full_cfg = TrainerConfig.tiny(seed=9, epochs=2)
        fit(full_cfg, tiny_corpus, tmp_path / "full")
        half_cfg = TrainerConfig.tiny(seed=9, epochs=1)
        fit(half_cfg, tiny_corpus, tmp_path / "half")
        fit(full_cfg, tiny_corpus, tmp_path / "half", resume=tmp_path / "half" / "checkpoint_final.pt")
        full_log = (tmp_path / "full" / "train_log.jsonl").read_text().splitlines()
        half_log = (tmp_path / "half" / "train_log.jsonl").read_text().splitlines()
        assert half_log == full_log

    def test_missing_layout_raises(self, tmp_path):
        with pytest.raises(EmptyDataset):
            fit(TrainerConfig.tiny(seed=1), tmp_path / "nope", tmp_path / "out")

    def test_bad_checkpoint(self, tmp_path):
        p = tmp_path / "junk.pt"
        p.write_bytes(b"not a checkpoint")
        with pytest.raises(BadCheckpoint):
            load_checkpoint(p)

    def test_max_steps_cap(self, tiny_corpus, tmp_path):
        cfg = TrainerConfig.tiny(seed=2, epochs=50, max_steps=3)
        result = fit(cfg, tiny_corpus, tmp_path / "capped")
        assert result.steps == 3


class TestPredictEvaluate:
    def test_predict_constant_forward(self):
        rng = np.random.default_rng(0)
        img = rng.random((70, 90, 3))

        def forward(x):
            return torch.full((x.shape[0], 1, x.shape[2], x.shape[3]), 0.25)

        pm = predict_probmap(forward, img, patch_size=32, depth=3)
        assert pm.probs.shape == (70, 90)
        assert np.allclose(pm.probs, 0.25)

    def test_evaluate_dataset_schema(self, tiny_run):
        rec = evaluate_dataset(
            tiny_run["result"].checkpoint_path, tiny_run["corpus"] / "test_target"
        )
        assert len(rec.per_image) == 2
        for key in ("iou", "dsc", "acc", "voi", "voi_normalized", "ari"):
            assert key in rec.aggregates

    def test_extract_mask_deterministic_and_bounded(self, tiny_run):
        img_path = next((tiny_run["corpus"] / "test_target" / "images").glob("*.png"))
        image = load_image_png(img_path)
        pm1, m1 = extract_mask(tiny_run["result"].checkpoint_path, image, threshold=0.5)
        pm2, _ = extract_mask(tiny_run["result"].checkpoint_path, image, threshold=0.5)
        assert np.array_equal(pm1.probs, pm2.probs)
        assert pm1.probs.min() >= 0 and pm1.probs.max() <= 1
        assert set(np.unique(m1.pixels)) <= {0, 1}
