"""Detection metrics: greedy matching, all-point-interpolated AP50, mAP."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import iou_matrix
from .detector import (DetectorModel, forward_full, postprocess,
                       DEFAULT_SCORE_THRESHOLD, DEFAULT_NMS_IOU)

AP_IOU_THRESHOLD = 0.5


@dataclass
class EvalResult:
    per_category_ap50: dict       # category index -> AP in [0,1], or None if no gt
    map50: float                  # mean over categories that have ground truth
    counts: dict                  # category index -> (tp, fp, fn)

    def as_payload(self) -> dict:
        return {
            "map50": self.map50,
            "per_category": {str(k): v for k, v in self.per_category_ap50.items()},
            "counts": {str(k): list(v) for k, v in self.counts.items()},
        }


def match_detections(dets: list, gts: list, iou_threshold: float = AP_IOU_THRESHOLD) -> np.ndarray:
    """TP/FP flags for one image's detections against its ground truth.

    Per category, detections are visited in descending score order; each
    claims the highest-IoU still-unmatched ground-truth box with IoU at or
    above the threshold. Returned flags align with the input order.
    """
    flags = np.zeros(len(dets), dtype=bool)
    if not dets:
        return flags
    categories = {d.category for d in dets}
    for cat in categories:
        det_idx = [i for i, d in enumerate(dets) if d.category == cat]
        det_idx.sort(key=lambda i: (-dets[i].score, i))
        gt_boxes = np.array([[b.x1, b.y1, b.x2, b.y2] for b, c in gts if c == cat],
                            dtype=np.float64).reshape(-1, 4)
        taken = np.zeros(gt_boxes.shape[0], dtype=bool)
        if gt_boxes.shape[0] == 0:
            continue
        for i in det_idx:
            b = dets[i].box
            overl = iou_matrix(np.array([[b.x1, b.y1, b.x2, b.y2]]), gt_boxes)[0]
            overl = np.where(taken, -1.0, overl)
            j = int(overl.argmax())
            if overl[j] >= iou_threshold:
                flags[i] = True
                taken[j] = True
    return flags


def average_precision(flags, num_gt: int) -> float | None:
    """Area under the monotone precision envelope over recall.

    ``flags`` are TP/FP indicators already ranked by descending score.
    Returns None when there is no ground truth (undefined AP).
    """
    if num_gt < 0:
        raise ValueError("num_gt must be non-negative")
    if num_gt == 0:
        return None
    flags = np.asarray(flags, dtype=bool)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / num_gt
    precision = tp / (tp + fp)
    # Monotone non-increasing envelope, then sum rectangle areas.
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = 0.0
    ap = 0.0
    for r, p in zip(recall, env):
        ap += (r - prev_r) * p
        prev_r = r
    return float(ap)


def map50(detections_by_frame: dict, gts_by_frame: dict,
          iou_threshold: float = AP_IOU_THRESHOLD) -> EvalResult:
    """Per-category AP50 and their mean over all frames.

    ``detections_by_frame`` maps frame_id -> list of Detection;
    ``gts_by_frame`` maps frame_id -> list of (Box, category index).
    Categories never seen in the ground truth are reported as None and
    excluded from the mean; categories with ground truth but no detections
    score 0.
    """
    frame_flags = {fid: match_detections(dets, gts_by_frame.get(fid, []), iou_threshold)
                   for fid, dets in detections_by_frame.items()}

    categories = {c for gts in gts_by_frame.values() for _, c in gts}
    categories |= {d.category for dets in detections_by_frame.values() for d in dets}

    per_cat: dict[int, float | None] = {}
    counts: dict[int, tuple] = {}
    for cat in sorted(categories):
        num_gt = sum(1 for gts in gts_by_frame.values() for _, c in gts if c == cat)
        ranked = []
        for fid, dets in detections_by_frame.items():
            for i, d in enumerate(dets):
                if d.category == cat:
                    ranked.append((-d.score, fid, i, bool(frame_flags[fid][i])))
        ranked.sort()
        flags = [r[3] for r in ranked]
        ap = average_precision(flags, num_gt)
        per_cat[cat] = ap
        tp = sum(flags)
        counts[cat] = (tp, len(flags) - tp, num_gt - tp)

    defined = [v for v in per_cat.values() if v is not None]
    mean = float(np.mean(defined)) if defined else 0.0
    return EvalResult(per_category_ap50=per_cat, map50=mean, counts=counts)


def evaluate_model(model: DetectorModel, frames: list,
                   score_threshold: float = DEFAULT_SCORE_THRESHOLD,
                   nms_iou: float = DEFAULT_NMS_IOU) -> EvalResult:
    """Eval-mode inference over frames, then mAP@50. Mutates nothing."""
    dets = {}
    gts = {}
    for frame in frames:
        raw = forward_full(model, frame.image.reshape(1, *frame.image.shape), "eval")
        dets[frame.frame_id] = postprocess(raw, score_threshold, nms_iou)
        gts[frame.frame_id] = frame.gt
    return map50(dets, gts)
