"""Per-frame adaptation step and baselines.

Methods: ``source`` (no-op), ``bn_stats`` (running statistics at fixed
momentum), ``dua`` (statistics with decayed momentum), ``wstta`` (statistics
plus gradient updates of BN scale/shift driven by an operator weak label).
"""
from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np

from . import tensor_nn as tn
from .boxes import assign_anchors, iou_matrix
from .detector import (DetectorModel, RawOutputs, forward_full, postprocess,
                       sample_balanced, DEFAULT_SCORE_THRESHOLD, DEFAULT_NMS_IOU)
from .rng import make_rng

METHODS = ("source", "bn_stats", "dua", "wstta")
INITIAL_MOMENTUM = 0.1
RPN_SAMPLE = 32
ROI_POSITIVE_IOU = 0.5


class AdaptationError(RuntimeError):
    """A step could not be applied; the model was rolled back."""


@dataclass
class AdaptationConfig:
    """Method selector and hyperparameters, defaulted for the desk-scale streams.

    omega/delta drive the momentum schedule (decaying from 0.1 toward
    delta/(1-omega)); lambda_ scales the BN affine gradient step; alpha
    weights the image-level loss; tau is the pseudo-label score floor.
    """

    method: str = "wstta"
    omega: float = 0.94
    delta: float = 0.005
    lambda_: float = 0.1
    alpha: float = 0.1
    tau: float = 0.8

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}; expected one of {METHODS}")
        if not 0.0 < self.omega <= 1.0:
            raise ValueError("omega must lie in (0, 1]")
        if self.delta < 0.0:
            raise ValueError("delta must be non-negative")
        if self.lambda_ < 0.0:
            raise ValueError("lambda must be non-negative")
        if self.alpha < 0.0:
            raise ValueError("alpha must be non-negative")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdaptationState:
    """Momentum and step counter for one streaming session."""

    config: AdaptationConfig
    seed: int = 0
    t: int = 0
    m: float = INITIAL_MOMENTUM


@dataclass
class PseudoLabel:
    entries: list = field(default_factory=list)   # (Box, category index)

    def boxes_array(self) -> np.ndarray:
        if not self.entries:
            return np.zeros((0, 4), dtype=np.float64)
        return np.array([[b.x1, b.y1, b.x2, b.y2] for b, _ in self.entries], dtype=np.float64)

    def categories_array(self) -> np.ndarray:
        return np.array([c for _, c in self.entries], dtype=np.int64)


@dataclass
class StepReport:
    step: int
    method: str
    momentum_used: float
    pseudo_count: int
    prediction: list
    weak_label: list | None
    loss_total: float | None = None
    loss_instance: float | None = None
    loss_image: float | None = None

    def scalar_payload(self) -> dict:
        return {
            "step": self.step,
            "method": self.method,
            "momentum": self.momentum_used,
            "pseudo_count": self.pseudo_count,
            "num_detections": len(self.prediction),
            "loss_total": self.loss_total,
            "loss_instance": self.loss_instance,
            "loss_image": self.loss_image,
        }


# --------------------------------------------------------------------------
# Pseudo-labelling and image-level aggregation
# --------------------------------------------------------------------------

def make_pseudo_label(prediction: list, weak: set, tau: float) -> PseudoLabel:
    """Keep predicted boxes whose score reaches tau and whose category is weak-labelled."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [0, 1]")
    entries = [(d.box, d.category) for d in prediction
               if d.score >= tau and d.category in weak]
    return PseudoLabel(entries)


def multi_hot(weak: set, num_categories: int) -> np.ndarray:
    """Length-L {0,1} vector with ones at the weak label's category indices."""
    vec = np.zeros(num_categories, dtype=np.float64)
    for c in weak:
        if not 0 <= c < num_categories:
            raise ValueError(f"category index {c} outside [0, {num_categories})")
        vec[c] = 1.0
    return vec


def build_O(class_scores, objectness) -> tn.Tensor:
    """Objectness routed to each row's argmax class column, zero elsewhere."""
    c = tn.as_tensor(class_scores)
    o = tn.as_tensor(objectness)
    if c.data.ndim != 2 or o.data.ndim != 1 or c.shape[0] != o.shape[0]:
        raise tn.DimensionError(
            f"build_O: rows of class scores {c.shape} must match objectness {o.shape}")
    col_idx = np.argmax(c.data, axis=1)     # ties resolve to the smallest column
    return tn.scatter_rows(o, col_idx, c.shape[1])


def image_level_prediction(class_scores, objectness) -> tn.Tensor:
    """Per-category presence scores: column sums of softmax(C) * col-softmax(O)."""
    c = tn.as_tensor(class_scores)
    o = tn.as_tensor(objectness)
    if c.shape[0] < 1:
        raise tn.DimensionError("image_level_prediction needs at least one proposal row")
    weighted = tn.mul(tn.softmax_rows(c), tn.softmax_cols(build_O(c, o)))
    return tn.sum_axis0(weighted)


def image_level_loss(zhat, target: np.ndarray) -> tn.Tensor:
    """Mean per-class binary cross-entropy against the multi-hot target."""
    return tn.multi_hot_bce(zhat, target)


def roi_targets(proposal_boxes: np.ndarray, pseudo: PseudoLabel,
                background_index: int) -> np.ndarray:
    """Class targets for proposals: a pseudo box's class at IoU >= 0.5, else background."""
    k = np.asarray(proposal_boxes).reshape(-1, 4).shape[0]
    if not pseudo.entries:
        return np.full(k, background_index, dtype=np.int64)
    overl = iou_matrix(proposal_boxes, pseudo.boxes_array())
    best = overl.max(axis=1)
    cats = pseudo.categories_array()
    return np.where(best >= ROI_POSITIVE_IOU, cats[overl.argmax(axis=1)],
                    background_index).astype(np.int64)


def instance_level_loss(raw: RawOutputs, pseudo: PseudoLabel, model: DetectorModel,
                        rng) -> tn.Tensor:
    """Mean objectness BCE over sampled anchors plus mean (L+1)-way CE over proposals.

    Anchors are matched against the pseudo boxes; proposals take a pseudo
    box's class when their best IoU reaches 0.5, else background. An empty
    pseudo-label makes every anchor negative and every proposal background.
    No box-regression term.
    """
    labels, _ = assign_anchors(model.anchors, pseudo.boxes_array())
    samp_idx, samp_targets = sample_balanced(labels, RPN_SAMPLE, rng)
    rpn = tn.sigmoid_bce_with_logits(tn.take(raw.anchor_objectness, samp_idx), samp_targets)
    targets = roi_targets(raw.proposal_boxes, pseudo, model.background_index)
    roi = tn.softmax_cross_entropy(raw.class_logits, targets)
    return tn.add(rpn, roi)


def total_loss(l_ins: float, l_img: float, alpha: float) -> float:
    return l_ins + alpha * l_img


# --------------------------------------------------------------------------
# BN updates
# --------------------------------------------------------------------------

def decay_momentum(m: float, omega: float, delta: float) -> float:
    """One momentum-schedule application, clamped to at most 1."""
    return min(m * omega + delta, 1.0)


def update_bn_stats(layer: tn.BatchNormLayer, batch_mean: np.ndarray,
                    batch_var: np.ndarray, m_t: float) -> tn.BatchNormLayer:
    """Blend the batch statistics into the running statistics with weight m_t."""
    if not 0.0 <= m_t <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    layer.running_mean = (1.0 - m_t) * layer.running_mean + m_t * np.asarray(batch_mean)
    layer.running_var = (1.0 - m_t) * layer.running_var + m_t * np.asarray(batch_var)
    return layer


def update_bn_affine(model: DetectorModel, gradients: dict, lambda_: float) -> DetectorModel:
    """Descend BN scale/shift along the loss gradient; nothing else moves."""
    for bn in model.named_bn_layers().values():
        for p in (bn.gamma, bn.beta):
            g = gradients.get(p)
            if g is not None:
                p.data = p.data - lambda_ * g
    return model


# --------------------------------------------------------------------------
# The per-frame step
# --------------------------------------------------------------------------

def compute_wstta_loss(model: DetectorModel, image, weak_vec: np.ndarray,
                       pseudo: PseudoLabel, rng, alpha: float,
                       fixed_proposals: tuple | None = None):
    """Traced adapt-mode forward and the full loss; returns its tape for backward."""
    with tn.trace() as tape:
        raw = forward_full(model, image, "adapt", fixed_proposals=fixed_proposals)
        l_ins = instance_level_loss(raw, pseudo, model, rng)
        fg_scores = tn.slice_cols(raw.class_logits, 0, model.num_categories)
        zhat = image_level_prediction(fg_scores, raw.proposal_logits)
        l_img = image_level_loss(zhat, weak_vec)
        total = tn.add(l_ins, tn.scale(l_img, alpha))
    return total, l_ins, l_img, raw, tape


def _bn_snapshot(model: DetectorModel) -> list:
    return [(bn.gamma.data.copy(), bn.beta.data.copy(),
             bn.running_mean.copy(), bn.running_var.copy())
            for bn in model.named_bn_layers().values()]


def _bn_restore(model: DetectorModel, snapshot: list) -> None:
    for bn, (g, b, rm, rv) in zip(model.named_bn_layers().values(), snapshot):
        bn.gamma.data = g
        bn.beta.data = b
        bn.running_mean = rm
        bn.running_var = rv


def _apply_stat_updates(model: DetectorModel, bn_stats: dict, m_t: float) -> None:
    for name, bn in model.named_bn_layers().items():
        if name in bn_stats:
            update_bn_stats(bn, *bn_stats[name], m_t)


def adapt_step(model: DetectorModel, state: AdaptationState, image, weak: set | None = None,
               prediction: list | None = None,
               score_threshold: float = DEFAULT_SCORE_THRESHOLD,
               nms_iou: float = DEFAULT_NMS_IOU) -> tuple:
    """One observe-once step: predict, then adapt according to the configured method.

    Returns ``(prediction, StepReport)`` where the prediction is the
    pre-adaptation eval-mode output. The frame is not retained.
    """
    cfg = state.config
    if cfg.method == "wstta" and weak is None:
        raise AdaptationError("wstta requires a weak label for every frame")

    if prediction is None:
        raw_eval = forward_full(model, image, "eval")
        prediction = postprocess(raw_eval, score_threshold, nms_iou)

    report = StepReport(
        step=state.t, method=cfg.method, momentum_used=state.m,
        pseudo_count=0, prediction=prediction,
        weak_label=sorted(weak) if weak is not None else None,
    )

    if cfg.method == "source":
        pass

    elif cfg.method == "bn_stats":
        raw = forward_full(model, image, "adapt")
        _apply_stat_updates(model, raw.bn_stats, INITIAL_MOMENTUM)
        report.momentum_used = INITIAL_MOMENTUM

    elif cfg.method == "dua":
        state.m = decay_momentum(state.m, cfg.omega, cfg.delta)
        raw = forward_full(model, image, "adapt")
        _apply_stat_updates(model, raw.bn_stats, state.m)
        report.momentum_used = state.m

    else:  # wstta
        model.set_trainable("adapt")
        pseudo = make_pseudo_label(prediction, weak, cfg.tau)
        weak_vec = multi_hot(weak, model.num_categories)
        snapshot = _bn_snapshot(model)
        rng = make_rng("adapt", state.seed, state.t)
        total, l_ins, l_img, raw, tape = compute_wstta_loss(
            model, image, weak_vec, pseudo, rng, cfg.alpha)
        if not np.isfinite(total.item()):
            _bn_restore(model, snapshot)
            raise AdaptationError(
                f"non-finite loss at step {state.t} "
                f"(instance={l_ins.item()!r}, image={l_img.item()!r}); model rolled back")
        state.m = decay_momentum(state.m, cfg.omega, cfg.delta)
        _apply_stat_updates(model, raw.bn_stats, state.m)
        grads = tape.backward(total)
        if any(not np.isfinite(g).all() for g in grads.values()):
            _bn_restore(model, snapshot)
            raise AdaptationError(
                f"non-finite gradient at step {state.t}; model rolled back")
        update_bn_affine(model, grads, cfg.lambda_)
        report.momentum_used = state.m
        report.pseudo_count = len(pseudo.entries)
        report.loss_total = total.item()
        report.loss_instance = l_ins.item()
        report.loss_image = l_img.item()

    state.t += 1
    return prediction, report
