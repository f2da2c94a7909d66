"""Temporal-interval detection metrics.

Predictions across all videos are pooled per class into one
precision/recall curve; matching is greedy in descending score with each
ground-truth instance usable once. AP uses all-point interpolation (the
precision envelope integrated over recall). Classes with no ground truth
are excluded from the mean; the mean over classes is then averaged over
the configured tIoU thresholds.

`brute_force_mean_ap` is a deliberately slow, numpy-free re-implementation
kept as the reference the fast path is tested against.
"""

from __future__ import annotations

import numpy as np


class EvaluationError(Exception):
    """Raised for unusable evaluation inputs (e.g. no ground truth at all)."""


class EvalConfig:
    def __init__(self, tiou_thresholds=(0.3, 0.4, 0.5, 0.6, 0.7)):
        th = tuple(float(t) for t in tiou_thresholds)
        if not th:
            raise EvaluationError("need at least one tIoU threshold")
        if any(not (0.0 < t <= 1.0) for t in th):
            raise EvaluationError(f"thresholds must lie in (0,1], got {th}")
        if any(b <= a for a, b in zip(th, th[1:])):
            raise EvaluationError(f"thresholds must strictly increase, got {th}")
        self.tiou_thresholds = th


def tiou(a, b) -> float:
    """Intersection-over-union of two (start, end) intervals."""
    s1, e1 = a
    s2, e2 = b
    if s1 >= e1 or s2 >= e2:
        raise ValueError(f"degenerate interval: {a} vs {b}")
    inter = min(e1, e2) - max(s1, s2)
    if inter <= 0.0:
        return 0.0
    union = (e1 - s1) + (e2 - s2) - inter
    return inter / union


class EvalResult:
    """per_class[threshold][class] = AP; map_per_thresh[threshold]; average."""

    def __init__(self, per_class, map_per_thresh, average, classes):
        self.per_class = per_class
        self.map_per_thresh = map_per_thresh
        self.average = average
        self.classes = classes

    def __repr__(self):
        return f"EvalResult(average={self.average:.4f})"


def _gt_index(ground_truth):
    """dict video -> list of (t_s, t_e, c) from annotation-like objects."""
    out = {}
    for vid, anns in ground_truth.items():
        out[vid] = [(float(a.t_s), float(a.t_e), int(a.c)) for a in anns]
    return out


def average_precision(predictions, ground_truth, class_id: int,
                      thresh: float):
    """All-point interpolated AP for one class at one threshold.

    Returns None when the class has no ground-truth instances (the caller
    excludes it from the mean).
    """
    gts = {}
    n_gt = 0
    for vid, anns in ground_truth.items():
        spans = [(ts, te) for ts, te, c in anns if c == class_id]
        if spans:
            gts[vid] = spans
            n_gt += len(spans)
    if n_gt == 0:
        return None
    preds = [p for p in predictions if p.class_id == class_id]
    preds.sort(key=lambda p: -p.score)
    if not preds:
        return 0.0
    matched = {vid: [False] * len(spans) for vid, spans in gts.items()}
    tp = np.zeros(len(preds))
    for i, p in enumerate(preds):
        spans = gts.get(p.video_id)
        if spans is None:
            continue
        used = matched[p.video_id]
        best_iou, best_j = 0.0, -1
        for j, span in enumerate(spans):
            if used[j]:
                continue
            v = tiou((p.t_start, p.t_end), span)
            if v > best_iou:
                best_iou, best_j = v, j
        if best_j >= 0 and best_iou >= thresh:
            used[best_j] = True
            tp[i] = 1.0
    cum_tp = np.cumsum(tp)
    precision = cum_tp / np.arange(1, len(preds) + 1)
    recall = cum_tp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for i in range(len(preds)):
        if tp[i]:
            ap += (recall[i] - prev_r) * envelope[i]
            prev_r = recall[i]
    return float(ap)


def mean_ap(predictions, ground_truth, cfg: EvalConfig | None = None) -> EvalResult:
    """Mean AP over classes per threshold, then averaged over thresholds."""
    cfg = cfg or EvalConfig()
    gt = _gt_index(ground_truth)
    classes = sorted({c for anns in gt.values() for _, _, c in anns})
    if not classes:
        raise EvaluationError("no ground-truth instances in the evaluation set")
    per_class = {}
    map_per_thresh = {}
    for th in cfg.tiou_thresholds:
        aps = {}
        for c in classes:
            ap = average_precision(predictions, gt, c, th)
            if ap is not None:
                aps[c] = ap
        per_class[th] = aps
        map_per_thresh[th] = sum(aps.values()) / len(aps)
    average = sum(map_per_thresh.values()) / len(map_per_thresh)
    return EvalResult(per_class, map_per_thresh, average, classes)


# ---------------------------------------------------------------------------
# slow reference implementation (no numpy, explicit loops)
# ---------------------------------------------------------------------------

def _brute_interval_iou(a, b):
    lo = a[0] if a[0] > b[0] else b[0]
    hi = a[1] if a[1] < b[1] else b[1]
    if hi <= lo:
        return 0.0
    inter = hi - lo
    return inter / ((a[1] - a[0]) + (b[1] - b[0]) - inter)


def brute_force_average_precision(predictions, ground_truth, class_id, thresh):
    spans_by_vid = {}
    total = 0
    for vid, anns in ground_truth.items():
        spans = [(float(a.t_s), float(a.t_e)) for a in anns if int(a.c) == class_id]
        if spans:
            spans_by_vid[vid] = spans
            total += len(spans)
    if total == 0:
        return None
    preds = sorted((p for p in predictions if p.class_id == class_id),
                   key=lambda p: -p.score)
    if not preds:
        return 0.0
    used = {vid: set() for vid in spans_by_vid}
    flags = []
    for p in preds:
        hit = False
        spans = spans_by_vid.get(p.video_id, [])
        best = (0.0, -1)
        for j, span in enumerate(spans):
            if j in used[p.video_id]:
                continue
            v = _brute_interval_iou((p.t_start, p.t_end), span)
            if v > best[0]:
                best = (v, j)
        if best[1] >= 0 and best[0] >= thresh:
            used[p.video_id].add(best[1])
            hit = True
        flags.append(hit)
    points = []
    tp = 0
    for k, hit in enumerate(flags):
        if hit:
            tp += 1
        points.append((tp / total, tp / (k + 1)))
    ap = 0.0
    prev_recall = 0.0
    for k, hit in enumerate(flags):
        if not hit:
            continue
        recall_k = points[k][0]
        best_prec = 0.0
        for r, pr in points[k:]:
            if pr > best_prec:
                best_prec = pr
        ap += (recall_k - prev_recall) * best_prec
        prev_recall = recall_k
    return ap


def brute_force_mean_ap(predictions, ground_truth, cfg: EvalConfig | None = None):
    cfg = cfg or EvalConfig()
    classes = set()
    for anns in ground_truth.values():
        for a in anns:
            classes.add(int(a.c))
    if not classes:
        raise EvaluationError("no ground-truth instances in the evaluation set")
    per_thresh = []
    for th in cfg.tiou_thresholds:
        vals = []
        for c in sorted(classes):
            ap = brute_force_average_precision(predictions, ground_truth, c, th)
            if ap is not None:
                vals.append(ap)
        per_thresh.append(sum(vals) / len(vals))
    return sum(per_thresh) / len(per_thresh)


# ---------------------------------------------------------------------------
# results.csv
# ---------------------------------------------------------------------------

def write_results_csv(path, result: EvalResult) -> None:
    """Rows per threshold plus an "avg" row; per-class AP columns + mAP."""
    classes = result.classes
    with open(path, "w") as fp:
        cols = ",".join(f"ap_class_{c}" for c in classes)
        fp.write(f"threshold,{cols},map\n")
        for th in sorted(result.map_per_thresh):
            aps = result.per_class[th]
            vals = ",".join(f"{aps.get(c, float('nan')):.6f}" for c in classes)
            fp.write(f"{th:.2f},{vals},{result.map_per_thresh[th]:.6f}\n")
        n = len(result.map_per_thresh)
        avg_cols = []
        for c in classes:
            vals = [result.per_class[th].get(c) for th in result.map_per_thresh]
            vals = [v for v in vals if v is not None]
            avg_cols.append(sum(vals) / len(vals) if vals else float("nan"))
        vals = ",".join(f"{v:.6f}" for v in avg_cols)
        fp.write(f"avg,{vals},{result.average:.6f}\n")


def read_csv_rows(path) -> tuple[list[str], list[list[str]]]:
    """Small CSV reader shared by the harness; skips '#' comment lines."""
    header = None
    rows = []
    with open(path) as fp:
        for line in fp:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if header is None:
                header = parts
            else:
                rows.append(parts)
    if header is None:
        raise EvaluationError(f"empty CSV {path}")
    return header, rows
