import math

import numpy as np
import pytest

from adahead import losses as L
from adahead import tensor as T
from adahead.anchors import Assignment
from adahead.errors import ConfigError, NumericError, ShapeError
from adahead.gradcheck import grad_check
from adahead.losses import LossConfig
from adahead.tensor import Tensor


class TestClassWeights:
    def test_uniform(self):
        np.testing.assert_array_equal(L.class_weights([1, 1]), [2.0, 2.0])

    def test_skewed(self):
        np.testing.assert_allclose(L.class_weights([3, 1]), [4 / 3, 4.0])

    def test_product_identity(self, rng):
        for _ in range(50):
            w = rng.uniform(0.1, 10, int(rng.integers(2, 8)))
            alpha = L.class_weights(w)
            products = w * alpha
            np.testing.assert_allclose(products, w.sum(), rtol=1e-12)

    def test_zero_weight_rejected(self):
        with pytest.raises(ConfigError):
            L.class_weights([1.0, 0.0])


class TestFocalTerm:
    def test_perfect_prediction_zero(self, f64):
        assert L.focal_term(Tensor([1.0]), 1.0, 2.0).data[0] == 0.0

    def test_gamma_zero_is_cross_entropy(self, f64):
        out = L.focal_term(Tensor([0.5]), 1.0, 0.0)
        assert abs(out.data[0] - math.log(2)) < 1e-15

    def test_high_precision_fixture(self, f64):
        out = L.focal_term(Tensor([0.9]), 0.25, 2.0)
        expected = 0.25 * 0.1 ** 2 * -math.log(0.9)
        assert abs(out.data[0] - expected) < 1e-12
        assert abs(out.data[0] - 2.634e-4) < 1e-6

    def test_matches_cross_entropy_everywhere(self, f64, rng):
        p = rng.uniform(1e-6, 1.0, 10_000)
        focal = L.focal_term(Tensor(p), 1.0, 0.0).data
        ce = -np.log(p)
        np.testing.assert_allclose(focal, ce, atol=1e-12)

    def test_monotone_decreasing_in_p(self, f64, rng):
        p = np.sort(rng.uniform(0.01, 1.0, 300))
        vals = L.focal_term(Tensor(p), 1.0, 2.0).data
        assert np.all(np.diff(vals) <= 0)

    def test_gamma_reduces_easy_sample_loss(self, f64, rng):
        p = rng.uniform(0.5, 1.0, 200)
        hard = L.focal_term(Tensor(p), 1.0, 2.0).data
        plain = L.focal_term(Tensor(p), 1.0, 0.0).data
        assert np.all(hard <= plain + 1e-15)

    def test_clamped_below_floor(self, f64):
        L.reset_counters()
        out = L.focal_term(Tensor([0.0]), 1.0, 0.0)
        assert np.isfinite(out.data[0])
        assert L.warning_counters["clamped_probs"] == 1
        L.reset_counters()

    def test_gradient(self, f64):
        p = Tensor([0.3, 0.7, 0.95], requires_grad=True)
        assert grad_check(lambda t: L.focal_term(t, 0.5, 2.0), [p]) <= 1e-6


class TestClsLoss:
    def cfg(self, **kw):
        return LossConfig(use_focal_cls=False, **kw)

    def test_perfect(self, f64):
        probs = Tensor([[0.0, 1.0, 0.0]])
        assert L.cls_loss(probs, [1], self.cfg()).data == 0.0

    def test_uniform_three_categories(self, f64):
        probs = Tensor([[1 / 3, 1 / 3, 1 / 3]])
        assert abs(L.cls_loss(probs, [2], self.cfg()).data - math.log(3)) < 1e-12

    def test_two_cells_average(self, f64):
        probs = Tensor([[0.5, 0.5], [0.25, 0.75]])
        out = L.cls_loss(probs, [0, 0], self.cfg())
        assert abs(out.data - (math.log(2) + math.log(4)) / 2) < 1e-12

    def test_label_out_of_range(self, f64):
        with pytest.raises(ShapeError, match="out of range"):
            L.cls_loss(Tensor([[0.5, 0.5]]), [2], self.cfg())

    def test_focal_variant_uses_alpha(self, f64):
        cfg = LossConfig(use_focal_cls=True, gamma=2.0, alpha=[2.0, 4.0])
        probs = Tensor([[0.9, 0.1]])
        out = L.cls_loss(probs, [0], cfg)
        expected = 2.0 * 0.1 ** 2 * -math.log(0.9)
        assert abs(out.data - expected) < 1e-12


class TestCoordLoss:
    def test_exact_prediction(self, f64):
        t = np.array([[0.1, -0.2, 0.3, 0.4]])
        assert L.coord_loss(Tensor(t), t).data == 0.0

    def test_unit_error(self, f64):
        pred = Tensor([[1.0, 0.0, 0.0, 0.0]])
        assert L.coord_loss(pred, np.zeros((1, 4))).data == 1.0

    def test_hand_sum(self, f64):
        pred = Tensor([[0.5, -0.5, 1.0, 2.0]])
        out = L.coord_loss(pred, np.zeros((1, 4)))
        assert abs(out.data - 5.5) < 1e-12

    def test_no_positives_flagged(self, f64):
        L.reset_counters()
        out = L.coord_loss(Tensor(np.zeros((0, 4))), np.zeros((0, 4)))
        assert out.data == 0.0
        assert L.warning_counters["empty_positives"] == 1
        L.reset_counters()


class TestNoobjLoss:
    def test_all_zero(self, f64):
        assert L.noobj_loss(Tensor([0.0, 0.0])).data == 0.0

    def test_single_half(self, f64):
        assert L.noobj_loss(Tensor([0.5])).data == 0.25

    def test_ignored_excluded(self, f64):
        asn = Assignment(
            gt_index=np.array([-1, -1, -1]), positive=np.zeros(3, bool),
            ignored=np.array([False, False, True]),
            gt_boxes=np.zeros((0, 4)), gt_categories=np.zeros(0, np.int64))
        out = L.noobj_loss(Tensor([0.1, 0.3, 0.9]), asn)
        assert abs(out.data - 0.05) < 1e-12


class TestTotalLoss:
    def test_weighted_sum_fixture(self, f64):
        cfg = LossConfig(lambda_coord=5.0, lambda_noobj=0.5)
        bd = L.total_loss(Tensor(1.0), Tensor(2.0), Tensor(4.0), cfg)
        assert bd.total == 13.0

    def test_zero_components(self, f64):
        bd = L.total_loss(Tensor(0.0), Tensor(0.0), Tensor(0.0), LossConfig())
        assert bd.total == 0.0

    def test_noobj_weight_zero_insensitive(self, f64):
        cfg = LossConfig(lambda_noobj=1e-300)  # effectively zero, still valid
        a = L.total_loss(Tensor(1.0), Tensor(1.0), Tensor(100.0), cfg).total
        b = L.total_loss(Tensor(1.0), Tensor(1.0), Tensor(0.0), cfg).total
        assert abs(a - b) < 1e-12

    def test_exact_identity_random(self, f64, rng):
        cfg = LossConfig(lambda_coord=3.7, lambda_noobj=0.21)
        for _ in range(200):
            c, d, n = rng.uniform(0, 5, 3)
            bd = L.total_loss(Tensor(c), Tensor(d), Tensor(n), cfg)
            assert abs(bd.total - (bd.cls + cfg.lambda_coord * bd.coord
                                   + cfg.lambda_noobj * bd.noobj)) <= 1e-12

    def test_nonfinite_component_aborts(self, f64):
        with pytest.raises(NumericError, match="coord"):
            L.total_loss(Tensor(1.0), Tensor(float("nan")), Tensor(0.0), LossConfig())

    def test_gradient_through_components(self, f64, rng):
        cfg = LossConfig(alpha=[1.5, 3.0], gamma=2.0)
        logits = Tensor(rng.standard_normal((4, 2)), requires_grad=True)
        pred_t = Tensor(rng.standard_normal((4, 4)) * 0.3, requires_grad=True)
        conf_logits = Tensor(rng.standard_normal(6), requires_grad=True)
        labels = np.array([0, 1, 1, 0])
        target = rng.standard_normal((4, 4)) * 0.3

        def loss_fn(lg, pt, cl):
            probs = T.softmax(lg, axis=-1)
            c = L.cls_loss(probs, labels, cfg)
            d = L.coord_loss(pt, target)
            n = L.noobj_loss(T.logistic(cl))
            return L.total_loss(c, d, n, cfg).total_tensor

        assert grad_check(loss_fn, [logits, pred_t, conf_logits]) <= 1e-4
