import numpy as np
import pytest

from adahead import attention as A
from adahead import tensor as T
from adahead.attention import (DvfParams, HeadParams, PyramidFeatures,
                               attention_stack, base_sampling_grid, common_view,
                               head_forward, init_dvf_params, init_head_params,
                               init_joint_head_params, init_multiscale_params,
                               median_level_index, multiscale_conv,
                               predict_sampling_fields, scale_attention,
                               spatial_attention, task_attention, task_theta,
                               task_transform)
from adahead.gradcheck import grad_check
from adahead.tensor import Tensor


def identity_fields(n, h, w, k=1):
    """Degenerate sampling: zero offsets, unit masks and weights."""
    return (Tensor(np.zeros((n, h, w, k, 2))), Tensor(np.ones((n, h, w, k))),
            Tensor(np.ones((n, h, w, k))))


def random_dvf_params(c, k_points, rng, scale=0.3) -> DvfParams:
    hidden = max(c // 4, 4)
    return DvfParams(
        scale_w=Tensor(np.array(rng.uniform(0.5, 1.5)), requires_grad=True),
        scale_b=Tensor(np.array(rng.uniform(-0.2, 0.2)), requires_grad=True),
        offset_kernel=Tensor(rng.standard_normal((3, 3, c, 4 * k_points)) * scale,
                             requires_grad=True),
        offset_bias=Tensor(rng.standard_normal(4 * k_points) * scale,
                           requires_grad=True),
        theta_w1=Tensor(rng.standard_normal((c, hidden)) * scale, requires_grad=True),
        theta_b1=Tensor(rng.standard_normal(hidden) * scale, requires_grad=True),
        theta_w2=Tensor(rng.standard_normal((hidden, 4 * c)) * scale,
                        requires_grad=True),
        theta_b2=Tensor(rng.standard_normal(4 * c) * scale, requires_grad=True),
        k_points=k_points)


class TestCommonView:
    def test_median_index(self):
        assert median_level_index([(20, 20), (10, 10), (5, 5)]) == 1
        assert median_level_index([(4, 4)]) == 0
        # resolution tie: lower index wins the middle slot
        assert median_level_index([(8, 8), (8, 8), (2, 2)]) == 0

    def test_stacks_to_median_resolution(self, f64, rng):
        levels = [Tensor(rng.random((2, 8, 8, 3))), Tensor(rng.random((2, 4, 4, 3))),
                  Tensor(rng.random((2, 2, 2, 3)))]
        stacked, med = common_view(levels)
        assert med == 1
        assert stacked.shape == (2, 3, 4, 4, 3)
        # the median row is the untouched median level
        np.testing.assert_array_equal(stacked.data[:, 1], levels[1].data)


class TestScaleAttention:
    def test_all_ones_identity_gate(self, f64):
        f = Tensor(np.ones((1, 2, 3, 3, 4)))
        out = scale_attention(f, Tensor(np.array(1.0)), Tensor(np.array(0.0)))
        np.testing.assert_array_equal(out.data, f.data)

    def test_all_minus_one_zero_gate(self, f64):
        f = Tensor(-np.ones((1, 2, 3, 3, 4)))
        out = scale_attention(f, Tensor(np.array(1.0)), Tensor(np.array(0.0)))
        np.testing.assert_array_equal(out.data, np.zeros_like(f.data))

    def test_two_level_gates(self, f64, rng):
        # level 0 mean 0 -> gate 0.5; level 1 mean 0.5 -> gate 0.75
        lvl0 = rng.standard_normal((1, 1, 4, 4, 2))
        lvl0 -= lvl0.mean()
        lvl1 = rng.standard_normal((1, 1, 4, 4, 2))
        lvl1 += 0.5 - lvl1.mean()
        f = Tensor(np.concatenate([lvl0, lvl1], axis=1))
        out = scale_attention(f, Tensor(np.array(1.0)), Tensor(np.array(0.0)))
        np.testing.assert_allclose(out.data[:, 0], f.data[:, 0] * 0.5, atol=1e-12)
        np.testing.assert_allclose(out.data[:, 1], f.data[:, 1] * 0.75, atol=1e-12)

    def test_ratio_invariance(self, f64, rng):
        f = Tensor(rng.standard_normal((2, 3, 4, 4, 8)) + 0.1)
        out = scale_attention(f, Tensor(np.array(0.7)), Tensor(np.array(0.1)))
        ratio = out.data / f.data
        for n in range(2):
            for l in range(3):
                r = ratio[n, l]
                assert np.abs(r - r.flat[0]).max() <= 1e-6


class TestSpatialAttention:
    def test_degenerate_identity_single_level(self, f64, rng):
        f = Tensor(rng.standard_normal((1, 1, 3, 4, 2)))
        out = spatial_attention(f, *identity_fields(1, 3, 4))
        np.testing.assert_allclose(out.data, f.data, atol=1e-12)

    def test_degenerate_two_levels_mean(self, f64, rng):
        f = Tensor(rng.standard_normal((1, 2, 3, 4, 2)))
        out = spatial_attention(f, *identity_fields(1, 3, 4))
        mean = f.data.mean(axis=1, keepdims=True)
        np.testing.assert_allclose(out.data, np.broadcast_to(mean, f.shape), atol=1e-12)

    def test_two_point_row_fixture(self, f64):
        f = Tensor(np.array([1.0, 2.0, 3.0]).reshape(1, 1, 1, 3, 1))
        offsets = np.zeros((1, 1, 3, 2, 2))
        offsets[..., 1, 1] = 1.0  # second sample shifted +1 column
        out = spatial_attention(f, Tensor(offsets),
                                Tensor(np.ones((1, 1, 3, 2))),
                                Tensor(np.full((1, 1, 3, 2), 0.5)))
        # center: 0.5*2 + 0.5*3; right edge: 0.5*3 + 0.5*0 (zero padding)
        assert abs(out.data[0, 0, 0, 1, 0] - 2.5) < 1e-12
        assert abs(out.data[0, 0, 0, 2, 0] - 1.5) < 1e-12
        assert abs(out.data[0, 0, 0, 0, 0] - (0.5 * 1 + 0.5 * 2)) < 1e-12

    def test_linear_in_features_for_frozen_fields(self, f64, rng):
        x = rng.standard_normal((1, 2, 3, 3, 2))
        y = rng.standard_normal((1, 2, 3, 3, 2))
        offsets = Tensor(rng.uniform(-1, 1, (1, 3, 3, 4, 2)))
        masks = Tensor(rng.uniform(0, 1, (1, 3, 3, 4)))
        weights = Tensor(rng.standard_normal((1, 3, 3, 4)))
        a, b = 1.7, -0.4
        combined = spatial_attention(Tensor(a * x + b * y), offsets, masks, weights).data
        separate = (a * spatial_attention(Tensor(x), offsets, masks, weights).data
                    + b * spatial_attention(Tensor(y), offsets, masks, weights).data)
        np.testing.assert_allclose(combined, separate, atol=1e-12)

    def test_base_grid(self):
        grid, center = base_sampling_grid(9)
        assert grid.shape == (9, 2) and center == 4
        np.testing.assert_array_equal(grid[4], [0, 0])
        np.testing.assert_array_equal(grid[0], [-1, -1])
        grid1, center1 = base_sampling_grid(1)
        np.testing.assert_array_equal(grid1, [[0, 0]])
        assert center1 == 0


class TestTaskAttention:
    def quad(self, c, a1, a2, b1, b2):
        return np.tile(np.array([a1, a2, b1, b2]), (c, 1))

    def test_identity(self, f64, rng):
        f = Tensor(rng.standard_normal((1, 2, 3, 3, 4)))
        out = task_transform(f, self.quad(4, 1.0, 1.0, 0.0, 0.0))
        np.testing.assert_array_equal(out.data, f.data)

    def test_absolute_value(self, f64, rng):
        f = Tensor(rng.standard_normal((1, 2, 3, 3, 4)))
        out = task_transform(f, self.quad(4, 1.0, -1.0, 0.0, 0.0))
        np.testing.assert_array_equal(out.data, np.abs(f.data))

    def test_one_sided_rectifier(self, f64):
        f = Tensor(np.array([-2.0, 3.0]).reshape(1, 1, 1, 2, 1))
        out = task_transform(f, self.quad(1, 1.0, 0.0, 0.0, 0.0))
        np.testing.assert_array_equal(out.data.ravel(), [0.0, 3.0])

    def test_equals_one_branch_pointwise(self, f64, rng):
        f = Tensor(rng.standard_normal((1, 2, 3, 3, 4)))
        theta = rng.standard_normal((4, 4))
        out = task_transform(f, theta).data
        br1 = f.data * theta[:, 0] + theta[:, 2]
        br2 = f.data * theta[:, 1] + theta[:, 3]
        assert np.all((out == br1) | (out == br2))
        assert np.all(out >= np.minimum(br1, br2))

    def test_theta_range_open(self, f64, rng):
        c = 6
        f = Tensor(rng.standard_normal((2, 2, 3, 3, c)))
        hidden = 4
        theta = task_theta(f, Tensor(rng.standard_normal((c, hidden))),
                           Tensor(rng.standard_normal(hidden)),
                           Tensor(rng.standard_normal((hidden, 4 * c))),
                           Tensor(rng.standard_normal(4 * c)))
        assert theta.shape == (2, c, 4)
        assert theta.data.min() > -1.0 and theta.data.max() < 1.0


class TestAttentionStack:
    def test_identity_composition(self, f64, rng):
        # forced identity at every stage reproduces the input exactly
        f = Tensor(rng.standard_normal((1, 1, 3, 3, 4)))
        gated = scale_attention(f, Tensor(np.array(0.0)), Tensor(np.array(1.0)))
        agg = spatial_attention(gated, *identity_fields(1, 3, 3))
        out = task_transform(agg, np.tile([1.0, 1.0, 0.0, 0.0], (4, 1)))
        np.testing.assert_array_equal(out.data, f.data)

    def test_zero_gate_collapses_to_max_beta(self, f64, rng):
        c = 4
        params = random_dvf_params(c, 4, rng)
        f = Tensor(rng.standard_normal((1, 2, 3, 3, c)) - 3.0)  # level means < -1
        out = attention_stack(f, params, median_index=0)
        # with a zero scale gate, everything downstream of stage 1 is
        # input-independent: theta comes from zeros, output is max(b1, b2)
        pooled = np.zeros((1, max(c // 4, 4)))
        hidden = pooled @ params.theta_w1.data + params.theta_b1.data \
            if False else params.theta_b1.data
        centered = hidden - hidden.mean()
        normed = centered / np.sqrt((centered ** 2).mean() + 1e-5)
        raw = normed @ params.theta_w2.data + params.theta_b2.data
        theta = (2.0 / (1.0 + np.exp(-raw)) - 1.0).reshape(c, 4)
        expected = np.maximum(theta[:, 2], theta[:, 3])
        np.testing.assert_allclose(out.data, np.broadcast_to(expected, out.shape),
                                   atol=1e-12)

    def test_equals_manual_nesting_bit_exact(self, f64, rng):
        c, k = 4, 4
        params = random_dvf_params(c, k, rng)
        f = Tensor(rng.standard_normal((1, 2, 2, 2, c)))
        out = attention_stack(f, params, median_index=0)
        s1 = scale_attention(f, params.scale_w, params.scale_b)
        fields = predict_sampling_fields(s1, params.offset_kernel,
                                         params.offset_bias, k, 0)
        s2 = spatial_attention(s1, *fields)
        s3 = task_attention(s2, params.theta_w1, params.theta_b1,
                            params.theta_w2, params.theta_b2)
        assert np.array_equal(out.data, s3.data)

    def test_full_stack_gradient(self, f64, rng):
        c, k = 4, 4
        params = random_dvf_params(c, k, rng)
        f = Tensor(rng.standard_normal((1, 2, 4, 2, c)), requires_grad=True)
        tensors = [f] + list(params.tensors().values())

        def fn(ft, sw, sb, ok, ob, w1, b1, w2, b2):
            p = DvfParams(scale_w=sw, scale_b=sb, offset_kernel=ok, offset_bias=ob,
                          theta_w1=w1, theta_b1=b1, theta_w2=w2, theta_b2=b2,
                          k_points=k)
            return attention_stack(ft, p, median_index=1)

        err = grad_check(fn, tensors)
        assert err <= 1e-4, err


class TestMultiscaleConv:
    def test_zero_everything(self, f64, rng):
        params = init_multiscale_params(3)
        for kt in params.kernels:
            kt.data[:] = 0
        x = Tensor(rng.standard_normal((1, 4, 4, 3)))
        np.testing.assert_array_equal(multiscale_conv(x, params).data,
                                      np.zeros_like(x.data))

    def test_identity_1x1_branch(self, f64, rng):
        params = init_multiscale_params(3)
        for kt in params.kernels:
            kt.data[:] = 0
        params.kernels[0].data[0, 0] = np.eye(3)
        x = Tensor(rng.standard_normal((1, 4, 4, 3)))
        np.testing.assert_array_equal(multiscale_conv(x, params).data, x.data)

    def test_all_ones_3x3_neighborhood_count(self, f64):
        params = init_multiscale_params(1)
        for kt in params.kernels:
            kt.data[:] = 0
        params.kernels[1].data[:] = 1.0
        x = Tensor(np.full((1, 5, 5, 1), 2.0))
        out = multiscale_conv(x, params).data[0, :, :, 0]
        assert out[2, 2] == 9 * 2.0
        assert out[0, 0] == 4 * 2.0

    def test_preserves_shape(self, f64, rng):
        params = init_multiscale_params(6, rng)
        x = Tensor(rng.standard_normal((2, 7, 5, 6)))
        assert multiscale_conv(x, params).shape == x.shape


class TestJointHead:
    def test_zero_params_quarter_joint(self, f64, rng):
        params = init_joint_head_params(4, 3, 2)
        for t in (params.cls_kernel, params.cls_bias, params.box_kernel,
                  params.box_bias):
            t.data[:] = 0
        levels = [Tensor(rng.standard_normal((1, 2, 2, 4)))]
        out = head_forward(levels, params)
        np.testing.assert_array_equal(out.class_logits.data, 0)
        np.testing.assert_allclose(out.joint_score, 0.25, atol=1e-12)

    def test_ln3_fixture(self, f64, rng):
        params = init_joint_head_params(4, 3, 1)
        params.cls_kernel.data[:] = 0
        params.box_kernel.data[:] = 0
        params.cls_bias.data[:] = np.log(3.0)  # classes and objectness alike
        levels = [Tensor(rng.standard_normal((1, 2, 2, 4)))]
        out = head_forward(levels, params)
        np.testing.assert_allclose(out.joint_score, 0.5625, atol=1e-12)

    def test_monotone_in_both_logits(self, f64):
        from adahead.attention import joint_score
        base = joint_score(np.array([[[0.3]]]), np.array([[0.2]]))
        assert joint_score(np.array([[[1.3]]]), np.array([[0.2]])) > base
        assert joint_score(np.array([[[0.3]]]), np.array([[1.2]])) > base
        big = joint_score(np.array([[[30.0]]]), np.array([[30.0]]))
        assert big[0, 0] > 0.999999 and big[0, 0] <= 1.0

    def test_branch_order_invariance(self, f64, rng):
        params = init_joint_head_params(5, 3, 2, rng)
        lv = Tensor(rng.standard_normal((2, 3, 3, 5)))
        first = head_forward([lv], params)
        # reversed evaluation order: box branch computed before class branch
        box = T.conv2d(lv, params.box_kernel, params.box_bias)
        cls = T.conv2d(lv, params.cls_kernel, params.cls_bias)
        n, h, w, _ = lv.shape
        box = T.reshape(box, (n, h * w * 2, 4))
        assert np.array_equal(first.box_params.data, box.data)
        second = head_forward([lv], params)
        assert np.array_equal(first.class_logits.data, second.class_logits.data)
        assert np.array_equal(first.joint_score, second.joint_score)

    def test_anchor_layout_matches_grid(self, f64, rng):
        params = init_joint_head_params(3, 2, 2, rng)
        lv_data = rng.standard_normal((1, 2, 3, 3))
        out = head_forward([Tensor(lv_data)], params)
        assert out.class_logits.shape == (1, 2 * 3 * 2, 2)
        # anchor (iy=1, ix=2, b=1) is row (1*3 + 2)*2 + 1 = 11
        single = head_forward([Tensor(lv_data[:, 1:2, 2:3, :])], params)
        np.testing.assert_allclose(out.class_logits.data[0, 11],
                                   single.class_logits.data[0, 1], atol=1e-12)


class TestHeadApply:
    def test_shapes_and_gradients(self, f64, rng):
        c = 4
        params = init_head_params(c, n_categories=2, boxes_per_cell=2, k_points=4,
                                  rng=rng)
        # perturb away from the zero-init degenerate sampling
        params.dvf.offset_kernel.data[:] = rng.standard_normal(
            params.dvf.offset_kernel.shape) * 0.2
        pyr = PyramidFeatures(levels=[Tensor(rng.standard_normal((1, 4, 4, c))),
                                      Tensor(rng.standard_normal((1, 2, 2, c)))])
        out, attended = A.head_apply(pyr, params)
        total = 4 * 4 * 2 + 2 * 2 * 2
        assert out.class_logits.shape == (1, total, 2)
        assert out.box_params.shape == (1, total, 4)
        assert out.objectness.shape == (1, total)
        assert attended.shape == (1, 2, 2, 2, c)  # median level is the 2x2 one
        assert out.joint_score.min() >= 0.0 and out.joint_score.max() <= 1.0
