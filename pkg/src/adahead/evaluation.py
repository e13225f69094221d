"""Detection metrics: matching, precision/recall, AP in two forms, mAP,
and the confusion matrix.

Two AP estimators are shipped because they answer different questions:

* rank-product AP: mean over the first n_pos ranked detections of
  precision(r) * recall(r) — exactly the printed summation this artifact
  standardizes on (CLI name ``paper``); it is not comparable with
  conventional challenge numbers.
* interpolated AP: mean over the 101-point recall grid {0, 0.01, .., 1} of
  the best precision achieved at recall >= the grid point (CLI name
  ``interp``, the default). mAP@50-95 always uses this form.

All rankings use score-descending order with deterministic tie-breaks on
the box geometry, so results are invariant to input ordering.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import BoxN, iou
from .postprocess import Detection

IOU_GRID_50_95 = tuple(round(0.5 + 0.05 * i, 2) for i in range(10))

eval_flags = {"zero_positive_categories": 0}


def _ranked(preds: list[Detection]) -> list[Detection]:
    return sorted(preds, key=lambda d: (-d.score, d.box.cy, d.box.cx,
                                        d.box.w, d.box.h, d.category))


def match_detections(preds: list[Detection], gts: list[tuple[int, BoxN]],
                     iou_threshold: float) -> tuple[np.ndarray, int]:
    """Greedy TP/FP flags for score-ranked predictions of one image.

    Each prediction claims the highest-IoU unmatched ground truth of its own
    category with IoU >= threshold; every ground truth matches at most once.
    Returns flags aligned with the canonical ranking plus the count of
    ground truths left unmatched.
    """
    ranked = _ranked(preds)
    matched = [False] * len(gts)
    flags = np.zeros(len(ranked), dtype=bool)
    for pi, pred in enumerate(ranked):
        best, best_iou = -1, iou_threshold
        for gi, (cat, box) in enumerate(gts):
            if matched[gi] or cat != pred.category:
                continue
            v = iou(pred.box, box)
            if v > best_iou or (v == best_iou and v > 0 and best == -1):
                best, best_iou = gi, v
        if best >= 0:
            matched[best] = True
            flags[pi] = True
    return flags, matched.count(False)


def precision_recall(flags, n_pos: int) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative precision and recall at every rank of the flag list."""
    flags = np.asarray(flags, dtype=bool)
    tp = np.cumsum(flags)
    ranks = np.arange(1, len(flags) + 1)
    precision = tp / ranks
    if n_pos <= 0:
        eval_flags["zero_positive_categories"] += 1
        recall = np.zeros(len(flags))
    else:
        recall = tp / n_pos
    return precision, recall


def ap_rank_product(flags, n_pos: int) -> float:
    """(1/n_pos) * sum_{r=1..n_pos} precision(r) * recall(r).

    r indexes the ranked detection list; ranks past its end contribute 0.
    """
    if n_pos <= 0:
        eval_flags["zero_positive_categories"] += 1
        return 0.0
    precision, recall = precision_recall(flags, n_pos)
    upto = min(n_pos, len(precision))
    return float((precision[:upto] * recall[:upto]).sum() / n_pos)


def ap_interpolated(precision, recall) -> float:
    """Mean over the 101-point recall grid of max precision at recall >= g.

    Computed via the right-to-left precision envelope over the
    recall-sorted series plus a binary search per grid point.
    """
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    if precision.size == 0:
        return 0.0
    order = np.argsort(recall, kind="stable")
    rec = recall[order]
    envelope = np.maximum.accumulate(precision[order][::-1])[::-1]
    grid = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(rec, grid - 1e-12, side="left")
    inside = idx < rec.size
    vals = np.where(inside, envelope[np.minimum(idx, rec.size - 1)], 0.0)
    return float(vals.mean())


def _category_flags(preds_per_image, gts_per_image, category: int,
                    iou_threshold: float) -> tuple[np.ndarray, int]:
    """Cross-image ranked TP/FP flags for one category at one threshold."""
    entries = []  # (sort key, image index, Detection)
    for img, preds in enumerate(preds_per_image):
        for d in preds:
            if d.category == category:
                entries.append(((-d.score, d.box.cy, d.box.cx, d.box.w,
                                 d.box.h, img), img, d))
    entries.sort(key=lambda e: e[0])
    remaining = [[box for cat, box in gts if cat == category]
                 for gts in gts_per_image]
    n_pos = sum(len(r) for r in remaining)
    flags = np.zeros(len(entries), dtype=bool)
    for i, (_, img, det) in enumerate(entries):
        cand = remaining[img]
        best, best_iou = -1, iou_threshold
        for gi, box in enumerate(cand):
            v = iou(det.box, box)
            if v > best_iou or (v == best_iou and v > 0 and best == -1):
                best, best_iou = gi, v
        if best >= 0:
            cand.pop(best)
            flags[i] = True
    return flags, n_pos


def confusion_matrix(preds: list[Detection], gts: list[tuple[int, BoxN]],
                     n_categories: int, iou_threshold: float = 0.5,
                     conf_threshold: float = 0.25,
                     normalized: bool = False) -> np.ndarray:
    """(n+1) square matrix indexed [gt_cat, pred_cat]; last row/col = background.

    Matching here is category-agnostic so cross-category confusions show up
    off the diagonal. Unmatched ground truths land in the background column,
    unmatched predictions in the background row. The normalized variant
    divides each ground-truth row by that category's total.
    """
    m = np.zeros((n_categories + 1, n_categories + 1), dtype=np.float64)
    kept = _ranked([d for d in preds if d.score >= conf_threshold])
    matched = [False] * len(gts)
    for pred in kept:
        best, best_iou = -1, iou_threshold
        for gi, (cat, box) in enumerate(gts):
            if matched[gi]:
                continue
            v = iou(pred.box, box)
            if v > best_iou or (v == best_iou and v > 0 and best == -1):
                best, best_iou = gi, v
        if best >= 0:
            matched[best] = True
            m[gts[best][0], pred.category] += 1
        else:
            m[n_categories, pred.category] += 1
    for gi, (cat, _) in enumerate(gts):
        if not matched[gi]:
            m[cat, n_categories] += 1
    if normalized:
        sums = m.sum(axis=1, keepdims=True)
        m = np.divide(m, sums, out=np.zeros_like(m), where=sums > 0)
    return m


@dataclass
class MetricsReport:
    categories: list[int]
    precision: dict[int, float]
    recall: dict[int, float]
    ap50: dict[int, float]
    ap5095: dict[int, float]
    map50: float
    map5095: float
    confusion: np.ndarray
    notes: list[str] = field(default_factory=list)


def evaluate(preds_per_image: list[list[Detection]],
             gts_per_image: list[list[tuple[int, BoxN]]],
             n_categories: int, ap_mode: str = "interp",
             conf_threshold: float = 0.25) -> MetricsReport:
    """Full metrics over a dataset of per-image predictions and labels.

    Categories absent from both ground truth and predictions are excluded
    from the mAP means (noted in the report). Precision and recall columns
    are computed at IoU 0.5 using only predictions at or above
    conf_threshold; AP uses every prediction.
    """
    if ap_mode not in ("interp", "paper"):
        raise ValueError(f"ap_mode must be 'interp' or 'paper', got {ap_mode!r}")
    notes: list[str] = []
    present = set()
    for gts in gts_per_image:
        present.update(cat for cat, _ in gts)
    for preds in preds_per_image:
        present.update(d.category for d in preds)
    skipped = sorted(set(range(n_categories)) - present)
    if skipped:
        notes.append(f"categories excluded from mAP (no data): {skipped}")
    categories = sorted(present & set(range(n_categories)))

    precision_c, recall_c, ap50_c, ap5095_c = {}, {}, {}, {}
    for c in categories:
        flags50, n_pos = _category_flags(preds_per_image, gts_per_image, c, 0.5)
        if ap_mode == "paper":
            ap50_c[c] = ap_rank_product(flags50, n_pos)
        else:
            ap50_c[c] = ap_interpolated(*precision_recall(flags50, n_pos))
        aps = []
        for thr in IOU_GRID_50_95:
            fl, np_ = _category_flags(preds_per_image, gts_per_image, c, thr)
            aps.append(ap_interpolated(*precision_recall(fl, np_)))
        ap5095_c[c] = float(np.mean(aps))

        conf_preds = [[d for d in preds if d.score >= conf_threshold]
                      for preds in preds_per_image]
        fl, n_pos_c = _category_flags(conf_preds, gts_per_image, c, 0.5)
        tp = int(fl.sum())
        precision_c[c] = tp / len(fl) if len(fl) else 0.0
        recall_c[c] = tp / n_pos_c if n_pos_c else 0.0

    map50 = float(np.mean([ap50_c[c] for c in categories])) if categories else 0.0
    map5095 = float(np.mean([ap5095_c[c] for c in categories])) if categories else 0.0

    conf_total = np.zeros((n_categories + 1, n_categories + 1))
    for preds, gts in zip(preds_per_image, gts_per_image):
        conf_total += confusion_matrix(preds, gts, n_categories,
                                       conf_threshold=conf_threshold)
    return MetricsReport(categories=categories, precision=precision_c,
                         recall=recall_c, ap50=ap50_c, ap5095=ap5095_c,
                         map50=map50, map5095=map5095, confusion=conf_total,
                         notes=notes)


def write_metrics_csv(path, report: MetricsReport) -> None:
    """`category,precision,recall,ap50,ap5095` rows plus mAP summary rows."""
    with open(path, "w") as f:
        f.write("category,precision,recall,ap50,ap5095\n")
        for c in report.categories:
            f.write(f"{c},{report.precision[c]:.6f},{report.recall[c]:.6f},"
                    f"{report.ap50[c]:.6f},{report.ap5095[c]:.6f}\n")
        f.write(f"mAP50,,,{report.map50:.6f},\n")
        f.write(f"mAP5095,,,,{report.map5095:.6f}\n")


def write_confusion_csv(path, confusion: np.ndarray) -> None:
    n = confusion.shape[0] - 1
    names = [str(i) for i in range(n)] + ["background"]
    with open(path, "w") as f:
        f.write("gt\\pred," + ",".join(names) + "\n")
        for i, row in enumerate(confusion):
            f.write(names[i] + "," + ",".join(f"{v:g}" for v in row) + "\n")
