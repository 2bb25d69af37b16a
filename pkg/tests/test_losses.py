import math

import pytest
import torch

from vesselssl.errors import NonFiniteLoss, ShapeMismatch
from vesselssl.losses import (
    adversarial_pair_losses,
    bce,
    consistency_loss,
    dice_loss,
    supervised_loss,
    total_loss,
)

# frozen scalar-oracle values
NEG_LN_09 = 0.10536051565782628  # -ln 0.9
DISC_09 = 1.2039728043259362  # (-ln 0.9 - ln 0.1) / 2


def _gen(seed=0):
    g = torch.Generator()
    g.manual_seed(seed)
    return g


class TestBce:
    def test_perfect_prediction_near_zero(self):
        y = torch.tensor([[1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
        assert float(bce(y.clone(), y)) <= 1e-6

    def test_uniform_prediction_is_ln2(self):
        y = (torch.rand(4, 4, generator=_gen(0), dtype=torch.float64) > 0.5).double()
        val = float(bce(torch.full((4, 4), 0.5, dtype=torch.float64), y))
        assert abs(val - math.log(2)) < 1e-12

    def test_frozen_scalar_case(self):
        pred = torch.tensor([[0.9, 0.1]], dtype=torch.float64)
        target = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
        assert abs(float(bce(pred, target)) - NEG_LN_09) < 1e-9

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            bce(torch.zeros(2, 2), torch.zeros(3, 3))


class TestDice:
    def test_perfect_overlap_zero(self):
        y = torch.tensor([[1.0, 1.0], [0.0, 0.0]], dtype=torch.float64)
        assert float(dice_loss(y.clone(), y)) == 0.0

    def test_disjoint_masks(self):
        # oracle: 1 - 1/(2n+1) for disjoint masks with n foreground each
        for n in (1, 3, 8):
            pred = torch.zeros(4, 8, dtype=torch.float64)
            target = torch.zeros(4, 8, dtype=torch.float64)
            pred[0, :n] = 1.0
            target[1, :n] = 1.0
            assert float(dice_loss(pred, target)) == pytest.approx(1 - 1 / (2 * n + 1), abs=1e-12)

    def test_both_empty_zero(self):
        z = torch.zeros(4, 4, dtype=torch.float64)
        assert float(dice_loss(z, z)) == 0.0


class TestSupervised:
    def test_three_perfect_decoders(self):
        y = (torch.rand(8, 8, generator=_gen(1), dtype=torch.float64) > 0.7).double()
        assert float(supervised_loss(y, y, y, y)) <= 2e-6

    def test_identical_outputs_equal_single_term(self):
        g = _gen(2)
        pred = torch.rand(8, 8, generator=g, dtype=torch.float64)
        y = (torch.rand(8, 8, generator=g, dtype=torch.float64) > 0.6).double()
        combined = float(supervised_loss(pred, pred.clone(), pred.clone(), y))
        single = float(bce(pred, y) + dice_loss(pred, y))
        assert combined == pytest.approx(single, abs=1e-12)

    def test_matches_per_decoder_recomputation(self):
        g = _gen(3)
        outs = [torch.rand(6, 6, generator=g, dtype=torch.float64) for _ in range(3)]
        y = (torch.rand(6, 6, generator=g, dtype=torch.float64) > 0.5).double()
        expect = sum(float(bce(o, y) + dice_loss(o, y)) for o in outs) / 3.0
        assert float(supervised_loss(*outs, y)) == pytest.approx(expect, abs=1e-12)


class TestConsistency:
    def test_all_agree_zero(self):
        p = torch.rand(5, 5, generator=_gen(0), dtype=torch.float64)
        total, mse, dist = consistency_loss(p, p.clone(), p.clone(), torch.rand(5, 5, dtype=torch.float64))
        assert float(total) == 0.0 and float(mse) == 0.0 and float(dist) == 0.0

    def test_full_uncertainty_annihilates_dist(self):
        g = _gen(1)
        s = torch.rand(5, 5, generator=g, dtype=torch.float64)
        t = torch.rand(5, 5, generator=g, dtype=torch.float64)
        yw = torch.rand(5, 5, generator=g, dtype=torch.float64)
        _, _, dist = consistency_loss(s, t, yw, torch.ones(5, 5, dtype=torch.float64))
        assert float(dist) == 0.0

    def test_frozen_scalar_case(self):
        one = torch.ones(3, 3, dtype=torch.float64)
        zero = torch.zeros(3, 3, dtype=torch.float64)
        total, mse, dist = consistency_loss(one, zero, zero, zero, alpha_balance=0.5)
        assert float(mse) == 1.0 and float(dist) == 1.0
        assert float(total) == 1.5

    def test_reduces_to_scaled_mse(self):
        # I == 0 and y_w == teacher output -> (alpha + 1) * MSE
        g = _gen(2)
        s = torch.rand(6, 6, generator=g, dtype=torch.float64)
        t = torch.rand(6, 6, generator=g, dtype=torch.float64)
        total, mse, _ = consistency_loss(s, t, t.clone(), torch.zeros(6, 6, dtype=torch.float64), 0.5)
        assert float(total) == pytest.approx(1.5 * float(mse), abs=1e-12)

    def test_teacher_side_gets_no_gradient(self):
        s = torch.rand(4, 4, dtype=torch.float64, requires_grad=True)
        t = torch.rand(4, 4, dtype=torch.float64, requires_grad=True)
        yw = torch.rand(4, 4, dtype=torch.float64, requires_grad=True)
        iv = torch.rand(4, 4, dtype=torch.float64, requires_grad=True)
        total, _, _ = consistency_loss(s, t, yw, iv)
        total.backward()
        assert s.grad is not None
        assert t.grad is None and yw.grad is None and iv.grad is None

    def test_literal_mse_target_flag(self):
        g = _gen(3)
        s = torch.rand(4, 4, generator=g, dtype=torch.float64)
        t = torch.rand(4, 4, generator=g, dtype=torch.float64)
        yw = torch.rand(4, 4, generator=g, dtype=torch.float64)
        iv = torch.zeros(4, 4, dtype=torch.float64)
        _, mse_unveiled, _ = consistency_loss(s, t, yw, iv, mse_target="unveiled")
        assert float(mse_unveiled) == pytest.approx(float(((s - yw) ** 2).mean()), abs=1e-15)


class TestAdversarialPair:
    def test_perfect_discriminator(self):
        d_lab = torch.full((2, 2), 1.0 - 1e-7, dtype=torch.float64)
        d_unl = torch.full((2, 2), 1e-7, dtype=torch.float64)
        _, l_disc = adversarial_pair_losses(d_lab, d_unl)
        assert float(l_disc) <= 1e-6

    def test_uniform_half_gives_ln2(self):
        half = torch.full((3, 3), 0.5, dtype=torch.float64)
        l_adv, l_disc = adversarial_pair_losses(half, half.clone())
        assert abs(float(l_adv) - math.log(2)) < 1e-12
        assert abs(float(l_disc) - math.log(2)) < 1e-12

    def test_frozen_scalar_case(self):
        d = torch.full((2, 2), 0.9, dtype=torch.float64)
        l_adv, l_disc = adversarial_pair_losses(d, d.clone())
        assert abs(float(l_adv) - NEG_LN_09) < 1e-9
        assert abs(float(l_disc) - DISC_09) < 1e-9

    def test_minmax_tension(self):
        # objectives agree only where the unlabeled map sits at 1/2
        g = _gen(4)
        d_lab = torch.rand(3, 3, generator=g, dtype=torch.float64)
        l_adv_h, l_disc_h = adversarial_pair_losses(d_lab, torch.full((3, 3), 0.5, dtype=torch.float64))
        assert float(l_adv_h) == pytest.approx(float(l_disc_h), abs=1e-12)
        d_unl = torch.full((3, 3), 0.9, dtype=torch.float64)
        l_adv, l_disc = adversarial_pair_losses(d_lab, d_unl)
        assert float(l_adv) != pytest.approx(float(l_disc), abs=1e-6)
        # complement identity: disc objective equals adv objective on 1 - d
        l_adv_c, _ = adversarial_pair_losses(d_lab, 1.0 - d_unl)
        assert float(l_adv_c) == pytest.approx(float(l_disc), abs=1e-12)


class TestTotalLoss:
    def test_arithmetic(self):
        # l_cons = 0.5 * 4 + 0 = 2; total = 1 + 0.5 * 2 + 3 = 5
        b = total_loss(1.0, 4.0, 0.0, 3.0, 0.0, lambda_cons=0.5, alpha_balance=0.5)
        assert b.total == pytest.approx(5.0, abs=1e-12)
        assert b.l_cons == pytest.approx(2.0, abs=1e-12)

    def test_zero_weight_drops_consistency(self):
        b = total_loss(1.0, 9.0, 9.0, 2.0, 0.0, lambda_cons=0.0, alpha_balance=0.5)
        assert b.total == pytest.approx(3.0, abs=1e-12)

    def test_all_zero(self):
        b = total_loss(0.0, 0.0, 0.0, 0.0, 0.0, lambda_cons=1.0, alpha_balance=0.5)
        assert b.total == 0.0

    def test_nonfinite_rejected(self):
        with pytest.raises(NonFiniteLoss):
            total_loss(float("nan"), 0.0, 0.0, 0.0, 0.0, 1.0, 0.5)


class TestPermutationInvariance:
    def test_losses_invariant_under_pixel_shuffle(self):
        g = _gen(5)
        pred = torch.rand(6, 6, generator=g, dtype=torch.float64)
        target = (torch.rand(6, 6, generator=g, dtype=torch.float64) > 0.5).double()
        perm = torch.randperm(36, generator=g)
        p2 = pred.flatten()[perm].reshape(6, 6)
        t2 = target.flatten()[perm].reshape(6, 6)
        assert float(bce(pred, target)) == pytest.approx(float(bce(p2, t2)), abs=1e-12)
        assert float(dice_loss(pred, target)) == pytest.approx(float(dice_loss(p2, t2)), abs=1e-12)
