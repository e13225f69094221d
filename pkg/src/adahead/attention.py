"""Dynamic feature-localisation attention stack and the joint head.

The stack operates on a pyramid unified into a common view: a tensor of
shape (N, L, H, W, C) where every level has been resampled to the median
level's resolution. Three gates apply in sequence with no interposed
activation:

  * scale gate: one scalar per level, hard_sigmoid(f(mean over space and
    channels)), f a learned scalar map;
  * spatial gate: at every position, a weighted sum over K sparse sampling
    points (learned fractional offsets, bounded masks, free weights),
    averaged across levels and broadcast back over them;
  * task gate: per channel, max(F*a1 + b1, F*a2 + b2) where the quadruple
    (a1, a2, b1, b2) comes from pooled statistics through two affine maps,
    standardization, and a shifted sigmoid.

The joint head runs two independent 1x1-conv branches (classification +
objectness, box offsets) over per-level maps and couples them through the
product of logistic scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .tensor import Tensor

THETA_EPS = 1e-5


def median_level_index(shapes: list[tuple[int, int]]) -> int:
    """Index of the median-resolution level (ties to the lower index)."""
    order = sorted(range(len(shapes)), key=lambda i: (shapes[i][0] * shapes[i][1], i))
    return order[(len(shapes) - 1) // 2]


def common_view(levels: list[Tensor]) -> tuple[Tensor, int]:
    """Stack pyramid levels resampled to the median level's resolution.

    Returns the (N, L, H, W, C) tensor and the median level index.
    """
    shapes = [(lv.shape[1], lv.shape[2]) for lv in levels]
    med = median_level_index(shapes)
    hm, wm = shapes[med]
    rows = []
    for lv in levels:
        resized = T.resize_bilinear(lv, hm, wm)
        n, h, w, c = resized.shape
        rows.append(T.reshape(resized, (n, 1, h, w, c)))
    return T.concat(rows, axis=1), med


@dataclass
class PyramidFeatures:
    """Backbone output: native-resolution levels sharing one channel count."""

    levels: list[Tensor]

    def __post_init__(self):
        cs = {lv.shape[3] for lv in self.levels}
        if len(cs) != 1:
            raise ShapeError(f"pyramid levels disagree on channels: {sorted(cs)}")

    @property
    def channels(self) -> int:
        return self.levels[0].shape[3]

    def level_shapes(self) -> list[tuple[int, int]]:
        return [(lv.shape[1], lv.shape[2]) for lv in self.levels]


def base_sampling_grid(k_points: int) -> tuple[np.ndarray, int | None]:
    """K base sampling displacements around each position.

    Perfect squares give the centered r x r grid; otherwise all points sit
    at the position itself. Returns the (K, 2) grid in (dy, dx) order and
    the index of the central point when one exists.
    """
    if k_points <= 0:
        raise ConfigError(f"sampling point count must be positive, got {k_points}")
    r = math.isqrt(k_points)
    if r * r == k_points:
        half = (r - 1) / 2.0
        grid = np.array([(i - half, j - half) for i in range(r) for j in range(r)])
        center = (k_points - 1) // 2 if r % 2 == 1 else None
        return grid, center
    return np.zeros((k_points, 2)), None


# ---------------------------------------------------------------------------
# stage 1: per-level scalar gates

def scale_attention(f: Tensor, scale_w: Tensor, scale_b: Tensor) -> Tensor:
    """Gate each level by hard_sigmoid(w * mean_{space,channels} + b)."""
    if f.ndim != 5:
        raise ShapeError(f"expected (N, L, H, W, C), got {f.shape}")
    n, l = f.shape[0], f.shape[1]
    means = T.reduce_mean(f, dims=(2, 3, 4))                      # (N, L)
    gates = T.hard_sigmoid(T.add(T.mul(means, scale_w.reshape(())), scale_b.reshape(())))
    return T.mul(f, T.reshape(gates, (n, l, 1, 1, 1)))


# ---------------------------------------------------------------------------
# stage 2: sparse spatial aggregation

def predict_sampling_fields(f: Tensor, offset_kernel: Tensor, offset_bias: Tensor,
                            k_points: int, median_index: int):
    """Offsets, masks, and weights from a 3x3 conv on the median-level row.

    Output channels pack K*(2+1+1) values per position: (dy, dx) pairs, raw
    masks (bounded by hard_sigmoid here), then free weights shared across
    levels.
    """
    if offset_kernel.shape[3] != 4 * k_points:
        raise ShapeError(
            f"offset predictor must emit 4K={4 * k_points} channels, "
            f"got {offset_kernel.shape[3]}")
    row = f[:, median_index]                                      # (N, H, W, C)
    fields = T.conv2d(row, offset_kernel, offset_bias, padding="same")
    n, h, w, _ = fields.shape
    offsets = T.reshape(fields[..., :2 * k_points], (n, h, w, k_points, 2))
    masks = T.hard_sigmoid(fields[..., 2 * k_points:3 * k_points])
    weights = fields[..., 3 * k_points:]
    return offsets, masks, weights


def spatial_attention(f: Tensor, offsets: Tensor, masks, weights,
                      base_grid: np.ndarray | None = None) -> Tensor:
    """Sparse-sample aggregate, averaged over levels, broadcast back over L.

    At each position p the aggregate is sum_k weight_k * mask_k *
    F[level, p + base_k + offset_k] with bilinear lookup and zero
    out-of-bounds contribution; the level mean is then replicated so the
    output keeps the (N, L, H, W, C) shape.
    """
    n, l, h, w, c = f.shape
    k_points = offsets.shape[-2]
    if k_points <= 0:
        raise ConfigError("spatial attention needs at least one sampling point")
    if base_grid is None:
        base_grid, _ = base_sampling_grid(k_points)
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    positions = np.stack([gy, gx], axis=-1)                       # (H, W, 2)
    anchor_points = (positions[None, :, :, None, :]
                     + base_grid[None, None, None, :, :])         # (1, H, W, K, 2)
    coords = T.add(offsets, anchor_points.astype(f.data.dtype))
    wm = T.reshape(T.mul(weights, masks), (n, h, w, k_points, 1))

    agg = None
    for li in range(l):
        sampled = T.bilinear_sample(f[:, li], coords)             # (N, H, W, K, C)
        contrib = T.reduce_sum(T.mul(sampled, wm), dims=3)        # (N, H, W, C)
        agg = contrib if agg is None else T.add(agg, contrib)
    mean_levels = T.mul(agg, 1.0 / l)
    return T.broadcast_to(T.reshape(mean_levels, (n, 1, h, w, c)),
                          (n, l, h, w, c))


# ---------------------------------------------------------------------------
# stage 3: per-channel two-branch gates

def task_transform(f: Tensor, theta) -> Tensor:
    """Apply per-channel quadruples: max(F*a1 + b1, F*a2 + b2).

    theta has shape (C, 4) or (N, C, 4), last axis ordered (a1, a2, b1, b2).
    """
    n, l, h, w, c = f.shape
    th = theta if isinstance(theta, Tensor) else Tensor(np.asarray(theta, dtype=f.data.dtype))
    if th.shape[-2:] != (c, 4):
        raise ShapeError(f"theta shape {th.shape} does not end in ({c}, 4)")
    if th.ndim == 2:
        th = T.reshape(th, (1, c, 4))
    quads = T.reshape(th, (th.shape[0], 1, 1, 1, c, 4))
    a1 = quads[..., 0]
    a2 = quads[..., 1]
    b1 = quads[..., 2]
    b2 = quads[..., 3]
    return T.maximum(T.add(T.mul(f, a1), b1), T.add(T.mul(f, a2), b2))


def task_theta(f: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Pooled stats -> affine -> standardize -> affine -> shifted sigmoid."""
    n, _, _, _, c = f.shape
    pooled = T.reduce_mean(f, dims=(1, 2, 3))                     # (N, C)
    hidden = T.affine(pooled, w1, b1)
    mu = T.reduce_mean(hidden, dims=1, keepdims=True)
    centered = T.sub(hidden, mu)
    var = T.reduce_mean(T.square(centered), dims=1, keepdims=True)
    normed = T.div(centered, T.sqrt(T.add(var, THETA_EPS)))
    raw = T.affine(normed, w2, b2)                                # (N, 4C)
    return T.reshape(T.shifted_sigmoid(raw), (n, c, 4))


def task_attention(f: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    return task_transform(f, task_theta(f, w1, b1, w2, b2))


# ---------------------------------------------------------------------------
# full stack

@dataclass
class DvfParams:
    """Learned parameters of the three attention stages."""

    scale_w: Tensor          # () scalar map weight for the level gate
    scale_b: Tensor
    offset_kernel: Tensor    # (3, 3, C, 4K)
    offset_bias: Tensor
    theta_w1: Tensor         # (C, C/r)
    theta_b1: Tensor
    theta_w2: Tensor         # (C/r, 4C)
    theta_b2: Tensor
    k_points: int

    def tensors(self) -> dict[str, Tensor]:
        return {"scale_w": self.scale_w, "scale_b": self.scale_b,
                "offset_kernel": self.offset_kernel, "offset_bias": self.offset_bias,
                "theta_w1": self.theta_w1, "theta_b1": self.theta_b1,
                "theta_w2": self.theta_w2, "theta_b2": self.theta_b2}


def init_dvf_params(channels: int, k_points: int = 9, reduction: int = 4,
                    rng: np.random.Generator | None = None) -> DvfParams:
    """Near-identity start: unit scale map, degenerate sampling, gates ~0.9.

    The offset predictor kernel starts at zero with biases arranged so
    sampling begins at the position itself (center weight 1, other weights
    0, masks just inside the saturated region so they keep a gradient).
    """
    rng = rng or np.random.default_rng(0)
    hidden = max(channels // reduction, 4)
    grid, center = base_sampling_grid(k_points)
    offset_bias = np.zeros(4 * k_points)
    offset_bias[2 * k_points:3 * k_points] = 0.9     # hard_sigmoid -> 0.95
    if center is not None:
        offset_bias[3 * k_points + center] = 1.0
    else:
        offset_bias[3 * k_points:] = 1.0 / k_points
    theta_b2 = np.zeros(4 * channels)
    # shifted_sigmoid(log 19) = 0.9: both slopes start near identity
    theta_b2[0::4] = math.log(19.0)
    theta_b2[1::4] = math.log(19.0)

    def fan_in(shape, fan):
        bound = 1.0 / math.sqrt(fan)
        return rng.uniform(-bound, bound, shape)

    return DvfParams(
        scale_w=T.param(np.array(1.0)),
        scale_b=T.param(np.array(0.0)),
        offset_kernel=T.param(np.zeros((3, 3, channels, 4 * k_points))),
        offset_bias=T.param(offset_bias),
        theta_w1=T.param(fan_in((channels, hidden), channels)),
        theta_b1=T.param(np.zeros(hidden)),
        theta_w2=T.param(fan_in((hidden, 4 * channels), hidden)),
        theta_b2=T.param(theta_b2),
        k_points=k_points)


def attention_stack(f: Tensor, params: DvfParams, median_index: int) -> Tensor:
    """scale -> spatial -> task, composed with no interposed activation.

    Calling the three stage functions in sequence is the definition; this
    wrapper must stay bit-identical to manual nesting.
    """
    gated = scale_attention(f, params.scale_w, params.scale_b)
    offsets, masks, weights = predict_sampling_fields(
        gated, params.offset_kernel, params.offset_bias, params.k_points,
        median_index)
    aggregated = spatial_attention(gated, offsets, masks, weights)
    return task_attention(aggregated, params.theta_w1, params.theta_b1,
                          params.theta_w2, params.theta_b2)


# ---------------------------------------------------------------------------
# multi-scale convolution block

@dataclass
class MultiScaleParams:
    kernels: list[Tensor]    # one per kernel size, each (k, k, C, C)
    biases: list[Tensor]


MULTISCALE_KERNELS = (1, 3, 5)


def init_multiscale_params(channels: int,
                           rng: np.random.Generator | None = None) -> MultiScaleParams:
    rng = rng or np.random.default_rng(0)
    kernels, biases = [], []
    n_branches = len(MULTISCALE_KERNELS)
    for k in MULTISCALE_KERNELS:
        bound = 1.0 / math.sqrt(n_branches * k * k * channels)
        kernels.append(T.param(rng.uniform(-bound, bound, (k, k, channels, channels))))
        biases.append(T.param(np.zeros(channels)))
    return MultiScaleParams(kernels=kernels, biases=biases)


def multiscale_conv(x: Tensor, params: MultiScaleParams) -> Tensor:
    """Sum of parallel same-padded convolutions (1x1 + 3x3 + 5x5)."""
    out = None
    for kernel, bias in zip(params.kernels, params.biases):
        branch = T.conv2d(x, kernel, bias, padding="same")
        out = branch if out is None else T.add(out, branch)
    return out


# ---------------------------------------------------------------------------
# joint head: parallel classification and box branches

@dataclass
class JointHeadParams:
    cls_kernel: Tensor       # (1, 1, C, B*(ncat+1))
    cls_bias: Tensor
    box_kernel: Tensor       # (1, 1, C, B*4)
    box_bias: Tensor
    boxes_per_cell: int
    n_categories: int


def init_joint_head_params(channels: int, n_categories: int, boxes_per_cell: int,
                           rng: np.random.Generator | None = None) -> JointHeadParams:
    rng = rng or np.random.default_rng(0)
    bound = 1.0 / math.sqrt(channels)
    b = boxes_per_cell
    return JointHeadParams(
        cls_kernel=T.param(rng.uniform(-bound, bound,
                                       (1, 1, channels, b * (n_categories + 1)))),
        cls_bias=T.param(np.zeros(b * (n_categories + 1))),
        box_kernel=T.param(rng.uniform(-bound, bound, (1, 1, channels, b * 4))),
        box_bias=T.param(np.zeros(b * 4)),
        boxes_per_cell=b, n_categories=n_categories)


@dataclass
class HeadOutput:
    """Per-anchor predictions; all arrays share the leading anchor layout."""

    class_logits: Tensor     # (N, A, n_categories)
    box_params: Tensor       # (N, A, 4) as (tx, ty, tw, th)
    objectness: Tensor       # (N, A) logits
    joint_score: np.ndarray  # (N, A) calibrated in [0, 1]


def _logistic_np(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def joint_score(class_logits: np.ndarray, objectness: np.ndarray) -> np.ndarray:
    """Product of logistic class confidence (best category) and objectness."""
    best = class_logits.max(axis=-1)
    return _logistic_np(best) * _logistic_np(objectness)


def head_forward(levels: list[Tensor], params: JointHeadParams) -> HeadOutput:
    """Run the two branches over every level and flatten to anchor order.

    The branches share no layers and read only their own parameters, so
    they may run in either order (or concurrently) with identical results.
    Anchor order is level-major, then row-major cells, then box index.
    """
    b = params.boxes_per_cell
    ncat = params.n_categories
    cls_rows, box_rows, obj_rows = [], [], []
    for lv in levels:
        n, h, w, _ = lv.shape
        cls_map = T.conv2d(lv, params.cls_kernel, params.cls_bias)
        cls_map = T.reshape(cls_map, (n, h * w * b, ncat + 1))
        cls_rows.append(cls_map[:, :, :ncat])
        obj_rows.append(cls_map[:, :, ncat])
        box_map = T.conv2d(lv, params.box_kernel, params.box_bias)
        box_rows.append(T.reshape(box_map, (n, h * w * b, 4)))
    class_logits = T.concat(cls_rows, axis=1)
    objectness = T.concat(obj_rows, axis=1)
    box_params = T.concat(box_rows, axis=1)
    return HeadOutput(class_logits=class_logits, box_params=box_params,
                      objectness=objectness,
                      joint_score=joint_score(class_logits.data, objectness.data))


# ---------------------------------------------------------------------------
# whole head assembly

@dataclass
class HeadParams:
    multiscale: MultiScaleParams
    dvf: DvfParams
    joint: JointHeadParams

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for i, (k, bi) in enumerate(zip(self.multiscale.kernels, self.multiscale.biases)):
            out[f"ms_kernel{i}"] = k
            out[f"ms_bias{i}"] = bi
        out.update(self.dvf.tensors())
        out.update({"cls_kernel": self.joint.cls_kernel, "cls_bias": self.joint.cls_bias,
                    "box_kernel": self.joint.box_kernel, "box_bias": self.joint.box_bias})
        return out


def init_head_params(channels: int, n_categories: int, boxes_per_cell: int,
                     k_points: int = 9,
                     rng: np.random.Generator | None = None) -> HeadParams:
    rng = rng or np.random.default_rng(0)
    return HeadParams(
        multiscale=init_multiscale_params(channels, rng),
        dvf=init_dvf_params(channels, k_points=k_points, rng=rng),
        joint=init_joint_head_params(channels, n_categories, boxes_per_cell, rng))


def head_apply(pyramid: PyramidFeatures, params: HeadParams
               ) -> tuple[HeadOutput, Tensor]:
    """Multi-scale conv per level, attention over the common view, then the
    joint branches on levels re-projected to their native grids.

    Returns the head output and the post-attention common view (the tensor
    the feature-dump interface serializes).
    """
    refined = [multiscale_conv(lv, params.multiscale) for lv in pyramid.levels]
    stacked, med = common_view(refined)
    attended = attention_stack(stacked, params.dvf, med)
    native = []
    for li, (h, w) in enumerate(pyramid.level_shapes()):
        native.append(T.resize_bilinear(attended[:, li], h, w))
    return head_forward(native, params.joint), attended
