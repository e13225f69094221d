"""Confidence filtering and greedy per-category non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .anchors import BoxN, iou
from .errors import ConfigError, ParseError

DEFAULT_CONFIDENCE = 0.25
DEFAULT_NMS_IOU = 0.45


@dataclass(frozen=True)
class Detection:
    box: BoxN
    category: int
    score: float


def filter_confidence(dets: list[Detection], threshold: float) -> list[Detection]:
    """Keep detections scoring at least threshold, preserving order."""
    if not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"confidence threshold must be in [0,1], got {threshold}")
    return [d for d in dets if d.score >= threshold]


def _canonical_key(d: Detection):
    return (-d.score, d.box.cy, d.box.cx, d.box.w, d.box.h, d.category)


def nms(dets: list[Detection], iou_threshold: float = DEFAULT_NMS_IOU) -> list[int]:
    """Greedy suppression; returns kept indices into the input list.

    Processing order is score descending with deterministic tie-breaks on
    (cy, cx, w, h, category), so the kept set is invariant under input
    permutation. Boxes of different categories never suppress each other.
    """
    order = sorted(range(len(dets)), key=lambda i: _canonical_key(dets[i]))
    kept: list[int] = []
    suppressed = [False] * len(dets)
    for oi, i in enumerate(order):
        if suppressed[oi]:
            continue
        kept.append(i)
        di = dets[i]
        for oj in range(oi + 1, len(order)):
            if suppressed[oj]:
                continue
            dj = dets[order[oj]]
            if dj.category == di.category and iou(di.box, dj.box) > iou_threshold:
                suppressed[oj] = True
    return kept


def write_detections(path, dets: list[Detection]) -> None:
    """One detection per line: `category score cx cy w h`, 6 significant digits."""
    with open(path, "w") as f:
        for d in dets:
            f.write(f"{d.category} {d.score:.6g} {d.box.cx:.6g} {d.box.cy:.6g} "
                    f"{d.box.w:.6g} {d.box.h:.6g}\n")


def read_detections(path) -> list[Detection]:
    dets = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 6:
                raise ParseError(f"{path}:{ln}: expected 6 fields, got {len(parts)}")
            try:
                cat = int(parts[0])
                vals = [float(v) for v in parts[1:]]
            except ValueError as e:
                raise ParseError(f"{path}:{ln}: {e}") from None
            dets.append(Detection(BoxN(vals[1], vals[2], vals[3], vals[4]), cat, vals[0]))
    return dets
