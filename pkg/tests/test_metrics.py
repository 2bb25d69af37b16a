import math
from fractions import Fraction
from itertools import combinations

import numpy as np
import pytest
from sklearn.metrics import adjusted_rand_score

from vesselssl.errors import DegenerateInput, ShapeMismatch
from vesselssl.metrics import (
    ContingencyTable,
    MetricsRecord,
    ari,
    contingency,
    image_metrics,
    iou_dsc_acc,
    voi,
)
from vesselssl.types import BinaryMask


def _mask(arr):
    return BinaryMask(np.asarray(arr, dtype=np.uint8))


def _rand_pair(rng, shape=(8, 8)):
    return (
        (rng.random(shape) < rng.uniform(0.2, 0.8)).astype(np.uint8),
        (rng.random(shape) < rng.uniform(0.2, 0.8)).astype(np.uint8),
    )


# --- independent oracles -------------------------------------------------


def oracle_counts(pred, gt):
    n11 = n10 = n01 = n00 = 0
    for p, g in zip(pred.flatten().tolist(), gt.flatten().tolist()):
        if p and g:
            n11 += 1
        elif p and not g:
            n10 += 1
        elif not p and g:
            n01 += 1
        else:
            n00 += 1
    return n11, n10, n01, n00


def oracle_voi(pred, gt):
    """Direct probability-table computation (separate code path)."""
    n = pred.size
    joint = {}
    for p, g in zip(pred.flatten().tolist(), gt.flatten().tolist()):
        joint[(p, g)] = joint.get((p, g), 0) + 1
    pp = {v: sum(c for (a, _), c in joint.items() if a == v) / n for v in (0, 1)}
    pg = {v: sum(c for (_, b), c in joint.items() if b == v) / n for v in (0, 1)}
    h_pred = -sum(q * math.log(q) for q in pp.values() if q > 0)
    h_gt = -sum(q * math.log(q) for q in pg.values() if q > 0)
    mi = 0.0
    for (a, b), c in joint.items():
        q = c / n
        if q > 0:
            mi += q * math.log(q / (pp[a] * pg[b]))
    return h_pred + h_gt - 2.0 * mi


def oracle_ari_pairs(pred, gt):
    """Hubert-Arabie ARI by explicit enumeration of all pixel pairs."""
    p = pred.flatten().tolist()
    g = gt.flatten().tolist()
    idx = range(len(p))
    both = pred_same = gt_same = 0
    total = 0
    for i, j in combinations(idx, 2):
        total += 1
        sp = p[i] == p[j]
        sg = g[i] == g[j]
        pred_same += sp
        gt_same += sg
        both += sp and sg
    expected = pred_same * gt_same / total
    max_index = (pred_same + gt_same) / 2.0
    if max_index == expected:
        return 1.0
    return (both - expected) / (max_index - expected)


# --- tests ---------------------------------------------------------------


class TestContingency:
    def test_all_ones(self):
        t = contingency(_mask(np.ones((2, 2))), _mask(np.ones((2, 2))))
        assert (t.n11, t.n10, t.n01, t.n00) == (4, 0, 0, 0)

    def test_complement(self):
        pred = np.array([[1, 0], [1, 0]])
        t = contingency(_mask(pred), _mask(1 - pred))
        assert t.n11 == 0 and t.n00 == 0

    def test_enumerated_2x2(self):
        t = contingency(_mask([[1, 1], [0, 0]]), _mask([[1, 0], [1, 0]]))
        assert (t.n11, t.n10, t.n01, t.n00) == (1, 1, 1, 1)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            contingency(_mask(np.zeros((2, 2))), _mask(np.zeros((3, 3))))


class TestIouDscAcc:
    def test_perfect(self):
        assert iou_dsc_acc(ContingencyTable(3, 0, 0, 1)) == (1.0, 1.0, 1.0)

    def test_balanced_table(self):
        i, d, a = iou_dsc_acc(ContingencyTable(1, 1, 1, 1))
        assert (i, d, a) == (1 / 3, 1 / 2, 1 / 2)

    def test_empty_union_convention(self):
        i, d, a = iou_dsc_acc(ContingencyTable(0, 0, 0, 9))
        assert (i, d, a) == (1.0, 1.0, 1.0)

    def test_identity_exact_rational(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            pred, gt = _rand_pair(rng)
            t = contingency(_mask(pred), _mask(gt))
            union = t.n11 + t.n10 + t.n01
            if union == 0:
                continue
            iou_frac = Fraction(t.n11, union)
            dsc_frac = Fraction(2 * t.n11, 2 * t.n11 + t.n10 + t.n01)
            assert dsc_frac / (2 - dsc_frac) == iou_frac

    def test_two_class_mean_variant(self):
        i, _, _ = iou_dsc_acc(ContingencyTable(1, 1, 1, 1), two_class_mean=True)
        assert i == pytest.approx((1 / 3 + 1 / 3) / 2)


class TestVoi:
    def test_identical_partitions(self):
        t = contingency(_mask([[1, 0], [1, 0]]), _mask([[1, 0], [1, 0]]))
        v, vn = voi(t)
        assert v == pytest.approx(0.0, abs=1e-12)
        assert vn == pytest.approx(0.0, abs=1e-12)

    def test_independent_partitions(self):
        # product-form counts: zero mutual information -> VOI = H(pred) + H(gt)
        t = ContingencyTable(4, 4, 4, 4)
        v, vn = voi(t)
        assert v == pytest.approx(2 * math.log(2), abs=1e-12)
        assert vn == pytest.approx(1.0, abs=1e-12)

    def test_balanced_table_frozen(self):
        v, vn = voi(ContingencyTable(1, 1, 1, 1))
        assert v == pytest.approx(1.3862943611198906, abs=1e-12)
        assert vn == pytest.approx(1.0, abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            pred, gt = _rand_pair(rng)
            assert voi(contingency(_mask(pred), _mask(gt)))[0] == pytest.approx(
                voi(contingency(_mask(gt), _mask(pred)))[0], abs=1e-12
            )

    def test_triangle_inequality(self):
        rng = np.random.default_rng(7)
        for _ in range(25):
            a, b = _rand_pair(rng)
            c, _ = _rand_pair(rng)
            vab = voi(contingency(_mask(a), _mask(b)))[0]
            vbc = voi(contingency(_mask(b), _mask(c)))[0]
            vac = voi(contingency(_mask(a), _mask(c)))[0]
            assert vac <= vab + vbc + 1e-9


class TestAri:
    def test_identical_mixed(self):
        pred = np.array([[1, 0], [1, 0]])
        assert ari(contingency(_mask(pred), _mask(pred))) == 1.0

    def test_complement_is_identical_partition(self):
        pred = np.array([[1, 0], [1, 0]])
        assert ari(contingency(_mask(pred), _mask(1 - pred))) == pytest.approx(1.0)

    def test_balanced_table_frozen(self):
        # frozen from the pair-enumeration oracle (and sklearn): the
        # expected-index-corrected ARI of the (1,1,1,1) table
        t = ContingencyTable(1, 1, 1, 1)
        assert ari(t) == pytest.approx(-0.5, abs=1e-12)
        pred = np.array([[1, 1], [0, 0]])
        gt = np.array([[1, 0], [1, 0]])
        assert oracle_ari_pairs(pred, gt) == pytest.approx(-0.5, abs=1e-12)
        assert adjusted_rand_score(gt.flatten(), pred.flatten()) == pytest.approx(-0.5)

    def test_complement_invariance(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            pred, gt = _rand_pair(rng)
            a = ari(contingency(_mask(pred), _mask(gt)))
            b = ari(contingency(_mask(1 - pred), _mask(1 - gt)))
            assert a == pytest.approx(b, abs=1e-12)

    def test_degenerate_input(self):
        with pytest.raises(DegenerateInput):
            ari(ContingencyTable(1, 0, 0, 0))


class TestOracleEquivalence:
    def test_all_metrics_match_bruteforce(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            pred, gt = _rand_pair(rng)
            t = contingency(_mask(pred), _mask(gt))
            assert (t.n11, t.n10, t.n01, t.n00) == oracle_counts(pred, gt)

            i, d, a = iou_dsc_acc(t)
            n11, n10, n01, n00 = oracle_counts(pred, gt)
            union = n11 + n10 + n01
            assert abs(i - (n11 / union if union else 1.0)) < 1e-10
            denom = 2 * n11 + n10 + n01
            assert abs(d - (2 * n11 / denom if denom else 1.0)) < 1e-10
            assert abs(a - (n11 + n00) / 64) < 1e-10

            assert abs(voi(t)[0] - oracle_voi(pred, gt)) < 1e-10
            assert abs(ari(t) - oracle_ari_pairs(pred, gt)) < 1e-10
            assert abs(ari(t) - adjusted_rand_score(gt.flatten(), pred.flatten())) < 1e-10


class TestRecords:
    def test_perfect_image(self):
        gt = _mask((np.random.default_rng(0).random((8, 8)) < 0.4).astype(np.uint8))
        m = image_metrics("a", gt, gt)
        assert m.iou == m.dsc == m.acc == 1.0
        assert m.voi == pytest.approx(0.0, abs=1e-12)
        assert m.ari == 1.0

    def test_aggregate_mean(self):
        rec = MetricsRecord.from_images(
            [
                image_metrics("a", _mask([[1, 1], [0, 0]]), _mask([[1, 1], [0, 0]])),
                image_metrics("b", _mask([[1, 1], [0, 0]]), _mask([[1, 0], [1, 0]])),
            ]
        )
        per = {m.id: m.dsc for m in rec.per_image}
        assert rec.aggregates["dsc"] == pytest.approx((per["a"] + per["b"]) / 2)

    def test_scaled_formatting(self):
        rec = MetricsRecord.from_images(
            [
                image_metrics("a", _mask([[1, 1], [0, 0]]), _mask([[1, 1], [0, 0]])),
            ]
        )
        assert rec.scaled_aggregates()["dsc"] == 100.0

    def test_two_image_mean_example(self):
        class FakeMetrics:
            def __init__(self, id, dsc):
                self.id = id
                self.iou = self.acc = self.voi = self.voi_normalized = self.ari = 0.0
                self.dsc = dsc

        rec = MetricsRecord.from_images([FakeMetrics("a", 0.8), FakeMetrics("b", 0.6)])
        assert rec.scaled_aggregates()["dsc"] == 70.0
