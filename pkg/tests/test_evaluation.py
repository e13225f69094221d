import numpy as np
import pytest

from adahead import evaluation as E
from adahead.anchors import BoxN
from adahead.evaluation import (ap_interpolated, ap_rank_product,
                                confusion_matrix, evaluate, match_detections,
                                precision_recall)
from adahead.postprocess import Detection


def ap_interp_oracle(precision, recall):
    """Exhaustive scan over every grid point (independent of the envelope)."""
    precision = np.asarray(precision, float)
    recall = np.asarray(recall, float)
    total = 0.0
    for g in np.linspace(0, 1, 101):
        sel = recall >= g - 1e-12
        total += precision[sel].max() if sel.any() else 0.0
    return total / 101


def det(cx, cy, w, h, cat=0, score=0.9):
    return Detection(BoxN(cx, cy, w, h), cat, score)


class TestMatchDetections:
    def test_exact_hit(self):
        gt = [(0, BoxN(0.5, 0.5, 0.2, 0.2))]
        flags, unmatched = match_detections([det(0.5, 0.5, 0.2, 0.2)], gt, 0.5)
        assert flags.tolist() == [True] and unmatched == 0

    def test_double_detection(self):
        gt = [(0, BoxN(0.5, 0.5, 0.2, 0.2))]
        preds = [det(0.5, 0.5, 0.2, 0.2, score=0.6),
                 det(0.5, 0.5, 0.2, 0.2, score=0.9)]
        flags, unmatched = match_detections(preds, gt, 0.5)
        assert flags.tolist() == [True, False] and unmatched == 0

    def test_below_threshold_fp(self):
        # the 1/7-overlap geometry sits well under a 0.5 threshold
        gt = [(0, BoxN(1 / 4, 1 / 4, 1 / 2, 1 / 2))]
        flags, unmatched = match_detections([det(2 / 4, 2 / 4, 1 / 2, 1 / 2)], gt, 0.5)
        assert flags.tolist() == [False] and unmatched == 1

    def test_category_must_match(self):
        gt = [(1, BoxN(0.5, 0.5, 0.2, 0.2))]
        flags, unmatched = match_detections([det(0.5, 0.5, 0.2, 0.2, cat=0)], gt, 0.5)
        assert flags.tolist() == [False] and unmatched == 1


class TestPrecisionRecall:
    def test_cumulative_precision(self):
        flags = [True] * 8 + [False] * 2
        p, r = precision_recall(flags, 8)
        assert p[-1] == 0.8

    def test_two_tp(self):
        p, r = precision_recall([True, True], 2)
        assert r.tolist() == [0.5, 1.0]

    def test_mixed(self):
        p, r = precision_recall([True, False, True], 2)
        np.testing.assert_allclose(p, [1.0, 0.5, 2 / 3])
        np.testing.assert_allclose(r, [0.5, 0.5, 1.0])

    def test_zero_positives_flagged(self):
        E.eval_flags["zero_positive_categories"] = 0
        p, r = precision_recall([False], 0)
        assert r.tolist() == [0.0]
        assert E.eval_flags["zero_positive_categories"] == 1


class TestApRankProduct:
    def test_single_perfect(self):
        assert ap_rank_product([True], 1) == 1.0

    def test_two_tp(self):
        assert ap_rank_product([True, True], 2) == 0.75

    def test_mixed_exact(self):
        assert ap_rank_product([True, False, True], 2) == 0.375

    def test_missing_ranks_contribute_zero(self):
        # only one detection but two positives: r=2 term is absent
        assert ap_rank_product([True], 2) == (1.0 * 0.5) / 2

    def test_zero_positives(self):
        assert ap_rank_product([], 0) == 0.0


class TestApInterpolated:
    def test_perfect(self):
        p, r = precision_recall([True, True, True], 3)
        assert ap_interpolated(p, r) == 1.0

    def test_no_tp(self):
        p, r = precision_recall([False, False], 2)
        assert ap_interpolated(p, r) == 0.0

    def test_grid_fixture(self):
        p, r = precision_recall([True, False, True], 2)
        expected = (51 * 1.0 + 50 * (2 / 3)) / 101
        assert abs(ap_interpolated(p, r) - expected) < 1e-12

    def test_matches_exhaustive_oracle(self, rng):
        for _ in range(500):
            n = int(rng.integers(1, 21))
            flags = rng.random(n) < 0.5
            n_pos = int(flags.sum() + rng.integers(0, 4))
            if n_pos == 0:
                continue
            p, r = precision_recall(flags, n_pos)
            assert abs(ap_interpolated(p, r) - ap_interp_oracle(p, r)) < 1e-9

    def test_appending_tp_never_decreases(self, rng):
        for _ in range(100):
            n = int(rng.integers(1, 15))
            flags = list(rng.random(n) < 0.4)
            n_pos = int(sum(flags)) + 1  # room for one more hit
            before = ap_interpolated(*precision_recall(flags, n_pos))
            after = ap_interpolated(*precision_recall(flags + [True], n_pos))
            assert after >= before - 1e-12


class TestEvaluate:
    def test_single_category_map_is_ap(self):
        preds = [[det(0.5, 0.5, 0.2, 0.2)]]
        gts = [[(0, BoxN(0.5, 0.5, 0.2, 0.2))]]
        rep = evaluate(preds, gts, n_categories=1)
        assert rep.map50 == rep.ap50[0] == 1.0

    def test_map_is_mean(self):
        preds = [[det(0.2, 0.2, 0.1, 0.1, cat=0, score=0.9),
                  det(0.7, 0.7, 0.1, 0.1, cat=1, score=0.8),
                  det(0.52, 0.52, 0.1, 0.1, cat=1, score=0.7)]]
        gts = [[(0, BoxN(0.2, 0.2, 0.1, 0.1)),
                (1, BoxN(0.7, 0.7, 0.1, 0.1)),
                (1, BoxN(0.35, 0.35, 0.1, 0.1))]]
        rep = evaluate(preds, gts, n_categories=2)
        assert abs(rep.map50 - (rep.ap50[0] + rep.ap50[1]) / 2) < 1e-12

    def test_absent_category_excluded_with_note(self):
        preds = [[det(0.5, 0.5, 0.2, 0.2, cat=0)]]
        gts = [[(0, BoxN(0.5, 0.5, 0.2, 0.2))]]
        rep = evaluate(preds, gts, n_categories=3)
        assert rep.categories == [0]
        assert any("excluded" in n for n in rep.notes)
        assert rep.map50 == 1.0

    def test_rank_product_mode(self):
        preds = [[det(0.2, 0.2, 0.1, 0.1, score=0.9),
                  det(0.8, 0.8, 0.1, 0.1, score=0.8),
                  det(0.5, 0.5, 0.1, 0.1, score=0.7)]]
        gts = [[(0, BoxN(0.2, 0.2, 0.1, 0.1)), (0, BoxN(0.5, 0.5, 0.1, 0.1))]]
        rep = evaluate(preds, gts, n_categories=1, ap_mode="paper")
        assert rep.ap50[0] == 0.375  # flags are [TP, FP, TP] with n_pos 2

    def test_matching_is_per_image(self):
        # a prediction in image 0 must not consume image 1's ground truth
        preds = [[det(0.5, 0.5, 0.2, 0.2, score=0.9)], []]
        gts = [[], [(0, BoxN(0.5, 0.5, 0.2, 0.2))]]
        rep = evaluate(preds, gts, n_categories=1)
        assert rep.ap50[0] == 0.0


class TestConfusionMatrix:
    def test_perfect_diagonal(self):
        preds = [det(0.2, 0.2, 0.1, 0.1, cat=0), det(0.7, 0.7, 0.1, 0.1, cat=1)]
        gts = [(0, BoxN(0.2, 0.2, 0.1, 0.1)), (1, BoxN(0.7, 0.7, 0.1, 0.1))]
        m = confusion_matrix(preds, gts, 2)
        np.testing.assert_array_equal(m, np.diag([1, 1, 0]))

    def test_no_predictions_background_column(self):
        gts = [(0, BoxN(0.2, 0.2, 0.1, 0.1)), (1, BoxN(0.7, 0.7, 0.1, 0.1))]
        m = confusion_matrix([], gts, 2)
        expected = np.zeros((3, 3))
        expected[0, 2] = expected[1, 2] = 1
        np.testing.assert_array_equal(m, expected)

    def test_cross_category_match(self):
        # prediction of category 1 overlapping a category-0 gt at IoU ~0.74
        preds = [det(0.52, 0.5, 0.2, 0.2, cat=1)]
        gts = [(0, BoxN(0.5, 0.5, 0.2, 0.2))]
        m = confusion_matrix(preds, gts, 2)
        assert m[0, 1] == 1 and m.sum() == 1

    def test_unmatched_pred_background_row(self):
        m = confusion_matrix([det(0.5, 0.5, 0.2, 0.2, cat=1)], [], 2)
        assert m[2, 1] == 1 and m.sum() == 1

    def test_totals_reconcile_with_matching(self, rng):
        for _ in range(20):
            n_gt = int(rng.integers(1, 6))
            gts = [(int(rng.integers(0, 2)),
                    BoxN(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.2, 2)))
                   for _ in range(n_gt)]
            preds = [det(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.2, 2),
                         cat=int(rng.integers(0, 2)), score=float(rng.random()))
                     for _ in range(int(rng.integers(0, 6)))]
            m = confusion_matrix(preds, gts, 2, conf_threshold=0.0)
            # every gt lands in exactly one row entry, every pred in one column
            assert m[:2, :].sum() == len(gts)
            assert m[:, :2].sum() == len(preds)
