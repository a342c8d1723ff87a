import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bapm.metrics import (MetricError, all_classification_metrics, auc, binary_scores, classification_metrics,
                          mean_std, normalized_mutual_information, reconstruction_metrics, segmentation_metrics,
                          soft_dice_scores, ssim, surface_voxels)

from oracles import brute_surface_scores, pair_count_auc, surface_points


class TestClassification:
    def test_all_correct(self):
        r = classification_metrics([0.9, 0.1, 0.8, 0.3], [1, 0, 1, 0])
        assert (r.ACC, r.SEN, r.SPE, r.F1) == (100, 100, 100, 100)

    def test_all_positive(self):
        r = classification_metrics([0.9] * 4, [1, 1, 0, 0])
        assert (r.SEN, r.SPE, r.ACC) == (100, 0, 50)

    def test_hand_confusion(self):
        r = classification_metrics([0.9, 0.2, 0.7, 0.4], [1, 0, 0, 1])
        assert (r.tp, r.fn, r.fp, r.tn) == (1, 1, 1, 1)
        assert (r.ACC, r.SEN, r.SPE, r.F1) == (50, 50, 50, 50)

    def test_threshold_inclusive(self):
        assert classification_metrics([0.5], [1]).tp == 1

    def test_degenerate_flags(self):
        r = classification_metrics([0.1, 0.2], [0, 0])
        assert r.SEN == 0 and "SEN" in r.degenerate

    def test_empty(self):
        with pytest.raises(MetricError):
            classification_metrics([], [])

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.tuples(st.floats(0, 1), st.integers(0, 1)), min_size=1, max_size=30))
    def test_acc_is_weighted_sen_spe(self, pairs):
        scores, labels = zip(*pairs)
        r = classification_metrics(scores, labels)
        npos = sum(labels)
        nneg = len(labels) - npos
        assert r.ACC == pytest.approx((r.SEN * npos + r.SPE * nneg) / len(labels), abs=1e-9)


class TestAuc:
    def test_separated(self):
        assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0

    def test_ties(self):
        assert auc([0.5] * 6, [0, 1] * 3) == 0.5

    def test_hand(self):
        assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75

    def test_one_class(self):
        with pytest.raises(MetricError):
            auc([0.1, 0.2], [1, 1])
        assert math.isnan(all_classification_metrics([0.1, 0.2], [1, 1])["AUC"])

    def test_pair_count_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            n = int(rng.integers(2, 25))
            labels = rng.integers(0, 2, n)
            labels[:2] = (0, 1)
            scores = np.round(rng.uniform(0, 1, n), int(rng.integers(1, 3)))  # rounding forces ties
            assert auc(scores, labels) == pair_count_auc(scores, labels)

    def test_monotone_invariance(self, rng):
        s, y = rng.uniform(0, 1, 20), np.tile([0, 1], 10)
        assert auc(s, y) == auc(np.exp(3 * s) - 2, y)


class TestReconstruction:
    def test_identity(self, rng):
        x = rng.uniform(0, 1, (10, 10, 10))
        m = reconstruction_metrics(x, x)
        assert m["MAE"] == 0
        assert m["NMI"] == pytest.approx(1.0, abs=1e-6)
        assert m["SSIM"] == pytest.approx(1.0, abs=1e-6)

    def test_binary_flip(self, rng):
        x = rng.integers(0, 2, (6, 6, 6)).astype(float)
        m = reconstruction_metrics(x, 1 - x)
        assert m["MAE"] == pytest.approx(np.abs(1 - 2 * x).mean())
        assert m["NMI"] == pytest.approx(1.0, abs=1e-9)

    def test_nmi_independent(self, rng):
        x, y = rng.uniform(size=200_000), rng.uniform(size=200_000)
        assert normalized_mutual_information(x, y) < 0.01

    def test_nmi_hand(self):
        # 2x2 joint [[.5, 0], [.25, .25]] with 2 bins
        x = np.array([0, 0, 1, 1], float)
        y = np.array([0, 0, 0, 1], float)
        hx = math.log(2)
        hy = -(0.75 * math.log(0.75) + 0.25 * math.log(0.25))
        hxy = -(0.5 * math.log(0.5) + 2 * 0.25 * math.log(0.25))
        assert normalized_mutual_information(x, y, bins=2) == pytest.approx(2 * (hx + hy - hxy) / (hx + hy))

    def test_ssim_symmetric_and_lower(self, rng):
        x = rng.uniform(0, 1, (12, 12, 12))
        y = x + rng.normal(0, 0.1, x.shape)
        assert ssim(x, y) < 1
        assert ssim(x, y) == pytest.approx(ssim(y, x), abs=0.05)

    def test_ssim_constant(self):
        c = np.ones((5, 5, 5))
        assert ssim(c, c) == 1.0
        with pytest.raises(MetricError):
            ssim(c, c * 2)

    def test_dims_mismatch(self):
        with pytest.raises(MetricError):
            reconstruction_metrics(np.zeros((2, 2, 2)), np.zeros((2, 2, 3)))


class TestSegmentation:
    def test_identical(self, rng):
        lab = rng.integers(0, 4, (6, 6, 6))
        res = segmentation_metrics(lab, lab)
        for c in (1, 2, 3):
            assert res["per_class"][c] == {"Dice": 1.0, "ASD": 0.0, "HD": 0.0}

    def test_two_points(self):
        a = np.zeros((7, 3, 3), bool)
        b = np.zeros_like(a)
        a[1, 1, 1] = True
        b[4, 1, 1] = True
        s = binary_scores(a, b)
        assert (s.dice, s.asd, s.hd) == (0.0, 3.0, 3.0)

    def test_spacing(self):
        a = np.zeros((7, 3, 3), bool)
        b = np.zeros_like(a)
        a[1, 1, 1] = b[4, 1, 1] = True
        assert binary_scores(a, b, spacing=(2.0, 1.0, 1.0)).hd == 6.0

    def test_one_sided_empty(self):
        pred = np.zeros((4, 4, 4), int)
        truth = pred.copy()
        truth[1, 1, 1] = 2
        res = segmentation_metrics(pred, truth)
        assert res["per_class"][2]["Dice"] == 0 and res["undefined"] == [2]
        assert math.isnan(res["per_class"][2]["HD"])
        assert res["per_class"][1] == {"Dice": 1.0, "ASD": 0.0, "HD": 0.0}

    def test_surface_matches_loop(self, rng):
        mask = rng.random((6, 6, 6)) < 0.6
        assert sorted(map(tuple, surface_voxels(mask).tolist())) == sorted(surface_points(mask))

    def test_brute_force_oracle(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            dims = tuple(int(d) for d in rng.integers(2, 7, 3))
            pred, truth = rng.integers(0, 4, dims), rng.integers(0, 4, dims)
            res = segmentation_metrics(pred, truth)
            for c in (1, 2, 3):
                expected = brute_surface_scores(pred == c, truth == c)
                got = res["per_class"][c]
                assert (got["Dice"], got["ASD"], got["HD"]) == expected or (
                    math.isnan(expected[1]) and math.isnan(got["ASD"]) and got["Dice"] == expected[0])

    def test_symmetric_and_ordered(self, rng):
        a, b = rng.random((6, 6, 6)) < 0.4, rng.random((6, 6, 6)) < 0.4
        s, t = binary_scores(a, b), binary_scores(b, a)
        assert (s.dice, s.asd, s.hd) == pytest.approx((t.dice, t.asd, t.hd))
        assert s.hd >= s.asd >= 0


def test_soft_dice_perfect(rng):
    labels = rng.integers(0, 4, (2, 5, 5, 5))
    probs = np.stack([(labels == k) for k in range(4)], axis=1).astype(float)
    np.testing.assert_allclose(soft_dice_scores(probs, labels), 1.0)


def test_mean_std_sample():
    assert mean_std([1.0, 3.0]) == (2.0, math.sqrt(2.0))
    assert mean_std([5.0]) == (5.0, 0.0)
