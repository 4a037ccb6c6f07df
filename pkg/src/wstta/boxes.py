"""Axis-aligned box geometry: IoU, greedy NMS, anchor grids and matching."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ANCHOR_POSITIVE_IOU = 0.5
ANCHOR_NEGATIVE_IOU = 0.3

POSITIVE = 1
NEGATIVE = 0
IGNORE = -1


@dataclass(frozen=True)
class Box:
    """Pixel-coordinate box with x1 < x2 and y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self}")

    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    """Intersection area over union area; 0 for disjoint boxes."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    return inter / (a.area() + b.area() - inter)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of two [N,4] / [M,4] box arrays."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ix = (np.minimum(a[:, None, 2], b[None, :, 2]) -
          np.maximum(a[:, None, 0], b[None, :, 0])).clip(min=0.0)
    iy = (np.minimum(a[:, None, 3], b[None, :, 3]) -
          np.maximum(a[:, None, 1], b[None, :, 1])).clip(min=0.0)
    inter = ix * iy
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter > 0.0, inter / np.where(union > 0.0, union, 1.0), 0.0)


def nms(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
        max_keep: int | None = None) -> np.ndarray:
    """Greedy NMS: keep by descending score, drop boxes with IoU > threshold.

    Returns indices into ``boxes`` in descending-score order. Ties in score
    are broken by the original index, keeping the result deterministic.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).ravel()
    order = np.lexsort((np.arange(len(scores)), -scores))
    keep: list[int] = []
    while order.size:
        i = order[0]
        keep.append(int(i))
        if max_keep is not None and len(keep) >= max_keep:
            break
        if order.size == 1:
            break
        rest = order[1:]
        overl = iou_matrix(boxes[i:i + 1], boxes[rest])[0]
        order = rest[overl <= iou_threshold]
    return np.asarray(keep, dtype=np.intp)


def make_anchor_grid(grid: int, stride: float, sizes: tuple) -> np.ndarray:
    """Square anchors centered on each cell: index = a*grid*grid + y*grid + x."""
    ys, xs = np.meshgrid(np.arange(grid), np.arange(grid), indexing="ij")
    cx = (xs + 0.5) * stride
    cy = (ys + 0.5) * stride
    out = []
    for s in sizes:
        half = s / 2.0
        out.append(np.stack([cx - half, cy - half, cx + half, cy + half], axis=-1).reshape(-1, 4))
    return np.concatenate(out, axis=0)


def assign_anchors(anchors: np.ndarray, target_boxes: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Label each anchor positive/negative/ignore against target boxes.

    Positive when IoU >= 0.5 with some target (matched to the argmax target)
    or when the anchor is the highest-IoU anchor for a target; negative when
    max IoU < 0.3; ignore otherwise. With no targets every anchor is negative.
    Returns ``(labels, matched_target_index)``; the match index is -1 for
    non-positive anchors.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = anchors.shape[0]
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    matches = np.full(n, -1, dtype=np.int64)
    target_boxes = np.asarray(target_boxes, dtype=np.float64).reshape(-1, 4)
    if target_boxes.shape[0] == 0:
        return labels, matches

    overl = iou_matrix(anchors, target_boxes)
    best_iou = overl.max(axis=1)
    best_target = overl.argmax(axis=1)

    labels[(best_iou >= ANCHOR_NEGATIVE_IOU)] = IGNORE
    pos = best_iou >= ANCHOR_POSITIVE_IOU
    labels[pos] = POSITIVE
    matches[pos] = best_target[pos]

    # Argmax rule: every overlapped target keeps at least one positive anchor.
    # Unmatched targets claim their best still-unclaimed anchor, best-first,
    # so one crowded anchor cannot orphan its neighbours.
    for t in range(target_boxes.shape[0]):
        if ((labels == POSITIVE) & (matches == t)).any():
            continue
        for a in np.argsort(-overl[:, t]):
            if overl[a, t] <= 0.0:
                break
            if labels[a] == POSITIVE:
                continue
            labels[a] = POSITIVE
            matches[a] = t
            break
    return labels, matches


def encode_deltas(anchors: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Box regression targets: center offsets relative to anchor size, log scales."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    targets = np.asarray(targets, dtype=np.float64).reshape(-1, 4)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = (anchors[:, 0] + anchors[:, 2]) / 2.0
    ay = (anchors[:, 1] + anchors[:, 3]) / 2.0
    tw = targets[:, 2] - targets[:, 0]
    th = targets[:, 3] - targets[:, 1]
    tx = (targets[:, 0] + targets[:, 2]) / 2.0
    ty = (targets[:, 1] + targets[:, 3]) / 2.0
    return np.stack([(tx - ax) / aw, (ty - ay) / ah, np.log(tw / aw), np.log(th / ah)], axis=1)


DELTA_CLIP = 4.0  # caps exp() growth when decoding


def decode_deltas(anchors: np.ndarray, deltas: np.ndarray, image_size: float) -> np.ndarray:
    """Invert :func:`encode_deltas`, then clip to valid boxes inside the image."""
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    deltas = np.clip(np.asarray(deltas, dtype=np.float64).reshape(-1, 4), -DELTA_CLIP, DELTA_CLIP)
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = (anchors[:, 0] + anchors[:, 2]) / 2.0
    ay = (anchors[:, 1] + anchors[:, 3]) / 2.0
    cx = ax + deltas[:, 0] * aw
    cy = ay + deltas[:, 1] * ah
    w = aw * np.exp(deltas[:, 2])
    h = ah * np.exp(deltas[:, 3])
    x1 = np.clip(cx - w / 2.0, 0.0, image_size - 1.0)
    y1 = np.clip(cy - h / 2.0, 0.0, image_size - 1.0)
    x2 = np.clip(cx + w / 2.0, x1 + 1.0, image_size)
    y2 = np.clip(cy + h / 2.0, y1 + 1.0, image_size)
    return np.stack([x1, y1, x2, y2], axis=1)
