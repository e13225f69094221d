"""Anchor grids, box encode/decode, IoU, and ground-truth assignment.

Boxes are normalized center-format (cx, cy, w, h), all fractions of image
width/height. Anchor grids are derived from the input shape alone, so a
different input resolution changes grid counts and normalized base sizes
without reconfiguration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError

DEFAULT_STRIDES = (8, 16, 32)
DEFAULT_SCALES = (3.0, 4.0, 5.0)
DEFAULT_RATIOS = (1.0,)
IGNORE_IOU = 0.5


@dataclass(frozen=True)
class BoxN:
    """Normalized center-format box: all fields in [0, 1] fractions."""

    cx: float
    cy: float
    w: float
    h: float

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    def to_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=np.float64)


@dataclass(frozen=True)
class AnchorLevel:
    stride: int
    sx: int                 # grid cells along x
    sy: int                 # grid cells along y
    sizes: np.ndarray       # (B, 2) normalized (w, h), strictly positive

    @property
    def count(self) -> int:
        return self.sx * self.sy * self.sizes.shape[0]


@dataclass(frozen=True)
class AnchorSet:
    input_h: int
    input_w: int
    levels: list[AnchorLevel]

    @property
    def total(self) -> int:
        return sum(lv.count for lv in self.levels)

    @property
    def boxes_per_cell(self) -> int:
        return self.levels[0].sizes.shape[0]

    def level_offsets(self) -> list[int]:
        offs, acc = [], 0
        for lv in self.levels:
            offs.append(acc)
            acc += lv.count
        return offs

    def anchor_id(self, level: int, iy: int, ix: int, b: int) -> int:
        lv = self.levels[level]
        return self.level_offsets()[level] + (iy * lv.sx + ix) * lv.sizes.shape[0] + b

    def locate(self, anchor_id: int) -> tuple[int, int, int, int]:
        """Inverse of anchor_id: (level, iy, ix, b)."""
        for level, off in enumerate(self.level_offsets()):
            lv = self.levels[level]
            if anchor_id < off + lv.count:
                rel = anchor_id - off
                nb = lv.sizes.shape[0]
                cell, b = divmod(rel, nb)
                iy, ix = divmod(cell, lv.sx)
                return level, iy, ix, b
        raise IndexError(f"anchor id {anchor_id} out of range {self.total}")

    def positioned_boxes(self) -> np.ndarray:
        """(A, 4) center-format boxes: every anchor at its cell center."""
        parts = []
        for lv in self.levels:
            cx = (np.arange(lv.sx) + 0.5) / lv.sx
            cy = (np.arange(lv.sy) + 0.5) / lv.sy
            gy, gx = np.meshgrid(cy, cx, indexing="ij")
            nb = lv.sizes.shape[0]
            centers = np.stack([gx, gy], axis=-1).reshape(-1, 1, 2).repeat(nb, axis=1)
            sizes = np.broadcast_to(lv.sizes, (lv.sx * lv.sy, nb, 2))
            parts.append(np.concatenate([centers, sizes], axis=-1).reshape(-1, 4))
        return np.concatenate(parts, axis=0)


def dynamic_anchors(input_h: int, input_w: int,
                    strides=DEFAULT_STRIDES, scales=DEFAULT_SCALES,
                    aspect_ratios=DEFAULT_RATIOS) -> AnchorSet:
    """Build anchor grids from the input shape.

    Per level: grid S_x = ceil(W/stride), S_y = ceil(H/stride); one base box
    per (scale, ratio) pair with pixel size stride*scale, normalized by the
    input dimensions.
    """
    if not strides or any(s <= 0 for s in strides):
        raise ConfigError(f"strides must be positive, got {strides}")
    if not scales or any(s <= 0 for s in scales):
        raise ConfigError(f"scales must be positive, got {scales}")
    if not aspect_ratios or any(r <= 0 for r in aspect_ratios):
        raise ConfigError(f"aspect ratios must be positive, got {aspect_ratios}")
    if input_h <= 0 or input_w <= 0:
        raise ConfigError(f"input dims must be positive, got {input_h}x{input_w}")
    levels = []
    for stride in strides:
        sizes = []
        for scale in scales:
            for ratio in aspect_ratios:
                px = stride * scale
                sizes.append((px * math.sqrt(ratio) / input_w,
                              px / math.sqrt(ratio) / input_h))
        levels.append(AnchorLevel(
            stride=stride,
            sx=math.ceil(input_w / stride),
            sy=math.ceil(input_h / stride),
            sizes=np.array(sizes, dtype=np.float64)))
    return AnchorSet(input_h=input_h, input_w=input_w, levels=levels)


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def decode_box(cell_ix: int, cell_iy: int, sx: int, sy: int,
               anchor_w: float, anchor_h: float, t) -> BoxN:
    """Offsets-in-cell-units to a normalized box.

    cx = (cell_ix + logistic(tx)) / S_x (cy analogous); w = anchor_w*exp(tw)
    and h = anchor_h*exp(th), clamped to (0, 1].
    """
    tx, ty, tw, th = (float(v) for v in t)
    fx = 1.0 / (1.0 + math.exp(-tx))
    fy = 1.0 / (1.0 + math.exp(-ty))
    w = min(anchor_w * math.exp(tw), 1.0)
    h = min(anchor_h * math.exp(th), 1.0)
    return BoxN((cell_ix + fx) / sx, (cell_iy + fy) / sy, w, h)


def encode_box(gt: BoxN, cell_ix: int, cell_iy: int, sx: int, sy: int,
               anchor_w: float, anchor_h: float) -> np.ndarray:
    """Exact inverse of decode_box for a center inside the given cell."""
    fx = gt.cx * sx - cell_ix
    fy = gt.cy * sy - cell_iy
    if not (0.0 <= fx <= 1.0 and 0.0 <= fy <= 1.0):
        raise ShapeError(
            f"assignment bug: gt center ({gt.cx}, {gt.cy}) outside cell "
            f"({cell_ix}, {cell_iy}) of {sx}x{sy} grid")
    if gt.w <= 0 or gt.h <= 0:
        raise ShapeError(f"gt size must be positive, got {gt.w}x{gt.h}")
    eps = 1e-12
    fx = min(max(fx, eps), 1.0 - eps)
    fy = min(max(fy, eps), 1.0 - eps)
    return np.array([_logit(fx), _logit(fy),
                     math.log(gt.w / anchor_w), math.log(gt.h / anchor_h)],
                    dtype=np.float64)


def iou(a: BoxN, b: BoxN) -> float:
    """Intersection area over union area; degenerate boxes give 0."""
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two (n,4)/(m,4) center-format box arrays -> (n,m)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ax1 = a[:, 0] - a[:, 2] / 2
    ay1 = a[:, 1] - a[:, 3] / 2
    ax2 = a[:, 0] + a[:, 2] / 2
    ay2 = a[:, 1] + a[:, 3] / 2
    bx1 = b[:, 0] - b[:, 2] / 2
    by1 = b[:, 1] - b[:, 3] / 2
    bx2 = b[:, 0] + b[:, 2] / 2
    by2 = b[:, 1] + b[:, 3] / 2
    iw = np.clip(np.minimum(ax2[:, None], bx2) - np.maximum(ax1[:, None], bx1), 0, None)
    ih = np.clip(np.minimum(ay2[:, None], by2) - np.maximum(ay1[:, None], by1), 0, None)
    inter = iw * ih
    union = ((ax2 - ax1) * (ay2 - ay1))[:, None] + (bx2 - bx1) * (by2 - by1) - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


@dataclass
class Assignment:
    """Per-anchor match result.

    gt_index maps each anchor to a position in the canonically ordered
    ground-truth arrays carried alongside (or -1). Anchors are exactly one
    of: positive, ignored (excluded from the no-object loss), or negative.
    """

    gt_index: np.ndarray          # (A,) int64, -1 where unmatched
    positive: np.ndarray          # (A,) bool
    ignored: np.ndarray           # (A,) bool
    gt_boxes: np.ndarray          # (G, 4) canonical order
    gt_categories: np.ndarray     # (G,) int64 canonical order
    unassigned_gts: int = 0

    @property
    def negative(self) -> np.ndarray:
        return ~self.positive & ~self.ignored


def _center_cell(frac: float, cells: int) -> int:
    """Cell index containing a coordinate; boundaries go to the smaller index."""
    idx = math.ceil(frac * cells) - 1
    return min(max(idx, 0), cells - 1)


def assign_targets(gt_categories, gt_boxes, anchors: AnchorSet,
                   ignore_iou: float = IGNORE_IOU) -> Assignment:
    """Map each ground truth to one positive anchor.

    Every GT lands in the cell containing its center at every level; within a
    cell, candidate quality is the IoU of the GT against the concentric base
    box. Only the level with the best candidate keeps the positive (ties go
    to the lowest level index). Anchors whose positioned IoU with any GT
    exceeds ignore_iou are excluded from the no-object loss. The GT list is
    canonically sorted by (cy, cx, category, w, h) first, so the result is
    invariant under input permutation.
    """
    boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    cats = np.asarray(gt_categories, dtype=np.int64).reshape(-1)
    if boxes.shape[0] != cats.shape[0]:
        raise ShapeError(
            f"{cats.shape[0]} categories vs {boxes.shape[0]} boxes")
    order = np.lexsort((boxes[:, 3], boxes[:, 2], cats, boxes[:, 0], boxes[:, 1]))
    boxes = boxes[order]
    cats = cats[order]

    total = anchors.total
    gt_index = np.full(total, -1, dtype=np.int64)
    positive = np.zeros(total, dtype=bool)
    taken: set[int] = set()
    unassigned = 0

    for g in range(boxes.shape[0]):
        gt = BoxN(*boxes[g])
        candidates = []  # (-iou, level, b, anchor_id)
        for li, lv in enumerate(anchors.levels):
            ix = _center_cell(gt.cx, lv.sx)
            iy = _center_cell(gt.cy, lv.sy)
            for b in range(lv.sizes.shape[0]):
                aw, ah = lv.sizes[b]
                quality = iou(BoxN(gt.cx, gt.cy, aw, ah), gt)
                candidates.append((-quality, li, b, anchors.anchor_id(li, iy, ix, b)))
        candidates.sort()
        for _, _, _, aid in candidates:
            if aid not in taken:
                taken.add(aid)
                gt_index[aid] = g
                positive[aid] = True
                break
        else:
            unassigned += 1

    ignored = np.zeros(total, dtype=bool)
    if boxes.shape[0] > 0:
        overlap = iou_matrix(anchors.positioned_boxes(), boxes).max(axis=1)
        ignored = (overlap > ignore_iou) & ~positive

    return Assignment(gt_index=gt_index, positive=positive, ignored=ignored,
                      gt_boxes=boxes, gt_categories=cats, unassigned_gts=unassigned)
