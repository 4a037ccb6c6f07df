"""Miniature two-stage detector: backbone with BN, proposal head, ROI classifier.

The proposal head scores square anchors on the backbone grid and regresses
box deltas; the top proposals are pooled and classified into L categories
plus background. Final boxes come from the proposal deltas only; there is no
second-stage box regression.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from . import tensor_nn as tn
from .boxes import (Box, assign_anchors, decode_deltas, encode_deltas, iou_matrix,
                    make_anchor_grid, nms, POSITIVE, NEGATIVE)
from .rng import make_rng

DEFAULT_SCORE_THRESHOLD = 0.05
DEFAULT_NMS_IOU = 0.5
BN_DEFAULT_MOMENTUM = 0.1


class CheckpointError(ValueError):
    """Malformed checkpoint file; message carries the byte offset."""


@dataclass(frozen=True)
class DetectorArch:
    """Shape of the network; the default is the 64x64 three-block reference."""

    image_size: int = 64
    conv_channels: tuple = (16, 32, 64)
    pool_after: tuple = (True, True, False)
    anchor_sizes: tuple = (12.0, 24.0)
    top_k: int = 64
    proposal_nms_iou: float = 0.7
    roi_size: int = 4
    roi_hidden: int = 256
    roi_batchnorm: bool = True   # BN on the ROI hidden layer, adapted like the rest

    @property
    def stride(self) -> int:
        return 2 ** sum(1 for p in self.pool_after if p)

    @property
    def grid(self) -> int:
        return self.image_size // self.stride

    @property
    def num_anchors(self) -> int:
        return self.grid * self.grid * len(self.anchor_sizes)


@dataclass
class Detection:
    """One predicted box with its category index and class probability."""

    box: Box
    category: int
    score: float


@dataclass
class RawOutputs:
    """Pre-NMS network outputs for one image."""

    proposal_logits: tn.Tensor          # [K'] objectness logits of selected proposals
    proposal_boxes: np.ndarray          # [K', 4] decoded, clipped
    proposal_indices: np.ndarray        # [K'] anchor indices of the selection
    class_logits: tn.Tensor             # [K', L+1], background last
    anchor_objectness: tn.Tensor        # [A] full-grid objectness logits
    anchor_deltas: tn.Tensor            # [A, 4] full-grid box deltas
    bn_stats: dict                      # layer name -> (batch_mean, batch_var)


class DetectorModel:
    """Parameters plus the fixed anchor grid; owns no per-frame state."""

    def __init__(self, arch: DetectorArch, categories: list):
        if not categories:
            raise ValueError("category list must not be empty")
        if len(set(categories)) != len(categories):
            raise ValueError("category names must be unique")
        self.arch = arch
        self.categories = list(categories)
        self.conv_weights: list[tn.Parameter] = []
        self.conv_biases: list[tn.Parameter] = []
        self.bn_layers: list[tn.BatchNormLayer] = []
        self.roi_bn: tn.BatchNormLayer | None = None
        self.obj_w: tn.Parameter
        self.obj_b: tn.Parameter
        self.delta_w: tn.Parameter
        self.delta_b: tn.Parameter
        self.fc1_w: tn.Parameter
        self.fc1_b: tn.Parameter
        self.fc2_w: tn.Parameter
        self.fc2_b: tn.Parameter
        self.anchors = make_anchor_grid(arch.grid, float(arch.stride), arch.anchor_sizes)

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    @property
    def background_index(self) -> int:
        return len(self.categories)

    def named_bn_layers(self) -> dict:
        """All normalization layers touched by adaptation, keyed by slot name."""
        out = {f"bn{i}": bn for i, bn in enumerate(self.bn_layers)}
        if self.roi_bn is not None:
            out["bn_roi"] = self.roi_bn
        return out

    def named_parameters(self) -> dict:
        out = {}
        for i, (w, b) in enumerate(zip(self.conv_weights, self.conv_biases)):
            out[f"conv{i}.weight"] = w
            out[f"conv{i}.bias"] = b
        for name, bn in self.named_bn_layers().items():
            out[f"{name}.gamma"] = bn.gamma
            out[f"{name}.beta"] = bn.beta
        out["rpn.obj.weight"] = self.obj_w
        out["rpn.obj.bias"] = self.obj_b
        out["rpn.delta.weight"] = self.delta_w
        out["rpn.delta.bias"] = self.delta_b
        out["roi.fc1.weight"] = self.fc1_w
        out["roi.fc1.bias"] = self.fc1_b
        out["roi.fc2.weight"] = self.fc2_w
        out["roi.fc2.bias"] = self.fc2_b
        return out

    def bn_parameter_names(self) -> set:
        return {n for n in self.named_parameters() if n.startswith("bn")}

    def named_state(self) -> dict:
        """Every value slot, including BN running statistics, as numpy arrays."""
        out = {name: p.data for name, p in self.named_parameters().items()}
        for name, bn in self.named_bn_layers().items():
            out[f"{name}.running_mean"] = bn.running_mean
            out[f"{name}.running_var"] = bn.running_var
            out[f"{name}.momentum"] = np.float64(bn.momentum)
            out[f"{name}.epsilon"] = np.float64(bn.epsilon)
        return out

    def state_digest(self) -> dict:
        """Slot name -> raw value bytes; equality means bitwise-identical slots."""
        return {name: np.asarray(arr).tobytes() for name, arr in self.named_state().items()}

    def set_trainable(self, scope: str) -> None:
        """'pretrain' trains everything, 'adapt' only BN scale/shift, 'none' nothing."""
        if scope not in ("pretrain", "adapt", "none"):
            raise ValueError(f"unknown trainable scope {scope!r}")
        bn_names = self.bn_parameter_names()
        for name, p in self.named_parameters().items():
            if scope == "pretrain":
                p.trainable = True
            elif scope == "adapt":
                p.trainable = name in bn_names
            else:
                p.trainable = False


def build_model(seed: int, categories: list, arch: DetectorArch | None = None) -> DetectorModel:
    """He-initialized detector, deterministic in the seed."""
    arch = arch or DetectorArch()
    model = DetectorModel(arch, categories)
    rng = make_rng("model-init", seed)

    def he_conv(fan_out, fan_in, k, name):
        std = np.sqrt(2.0 / (fan_in * k * k))
        return tn.Parameter(rng.normal(0.0, std, size=(fan_out, fan_in, k, k)), name=name)

    def he_dense(fan_in, fan_out, name):
        std = np.sqrt(2.0 / fan_in)
        return tn.Parameter(rng.normal(0.0, std, size=(fan_in, fan_out)), name=name)

    in_ch = 3
    for i, out_ch in enumerate(arch.conv_channels):
        model.conv_weights.append(he_conv(out_ch, in_ch, 3, f"conv{i}.weight"))
        model.conv_biases.append(tn.Parameter(np.zeros(out_ch), name=f"conv{i}.bias"))
        model.bn_layers.append(
            tn.BatchNormLayer.create(out_ch, momentum=BN_DEFAULT_MOMENTUM, name=f"bn{i}"))
        in_ch = out_ch

    apc = len(arch.anchor_sizes)
    feat_ch = arch.conv_channels[-1]
    model.obj_w = he_conv(apc, feat_ch, 1, "rpn.obj.weight")
    model.obj_b = tn.Parameter(np.zeros(apc), name="rpn.obj.bias")
    model.delta_w = he_conv(4 * apc, feat_ch, 1, "rpn.delta.weight")
    model.delta_b = tn.Parameter(np.zeros(4 * apc), name="rpn.delta.bias")

    roi_in = feat_ch * arch.roi_size * arch.roi_size
    model.fc1_w = he_dense(roi_in, arch.roi_hidden, "roi.fc1.weight")
    model.fc1_b = tn.Parameter(np.zeros(arch.roi_hidden), name="roi.fc1.bias")
    if arch.roi_batchnorm:
        model.roi_bn = tn.BatchNormLayer.create(
            arch.roi_hidden, momentum=BN_DEFAULT_MOMENTUM, name="bn_roi")
    model.fc2_w = he_dense(arch.roi_hidden, len(categories) + 1, "roi.fc2.weight")
    model.fc2_b = tn.Parameter(np.zeros(len(categories) + 1), name="roi.fc2.bias")
    return model


# --------------------------------------------------------------------------
# Forward passes
# --------------------------------------------------------------------------

def _forward_core(model: DetectorModel, image, mode: str):
    """Backbone + proposal-head maps. Returns (features, objectness, deltas, bn_stats)."""
    arch = model.arch
    x = tn.as_tensor(image)
    expect = (1, 3, arch.image_size, arch.image_size)
    if x.shape != expect:
        raise tn.DimensionError(f"image axes {x.shape} != expected {expect}")

    bn_stats = {}
    for i in range(len(arch.conv_channels)):
        x = tn.conv2d(x, model.conv_weights[i], model.conv_biases[i], stride=1, padding=1)
        x, bmean, bvar = tn.batchnorm_forward(model.bn_layers[i], x, mode)
        bn_stats[f"bn{i}"] = (bmean, bvar)
        x = tn.relu(x)
        if arch.pool_after[i]:
            x = tn.maxpool2(x)

    apc = len(arch.anchor_sizes)
    g = arch.grid
    obj_map = tn.conv2d(x, model.obj_w, model.obj_b)                    # [1, apc, G, G]
    obj_flat = tn.reshape(obj_map, (apc * g * g,))
    delta_map = tn.conv2d(x, model.delta_w, model.delta_b)              # [1, 4*apc, G, G]
    deltas = tn.reshape(
        tn.transpose(tn.reshape(delta_map, (apc, 4, g, g)), (0, 2, 3, 1)),
        (apc * g * g, 4))
    return x, obj_flat, deltas, bn_stats


def _select_proposals(model: DetectorModel, objectness: np.ndarray,
                      deltas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Class-agnostic NMS over decoded anchors, then the top-K by objectness."""
    arch = model.arch
    boxes_all = decode_deltas(model.anchors, deltas, float(arch.image_size))
    keep = nms(boxes_all, objectness, arch.proposal_nms_iou, max_keep=arch.top_k)
    return keep, boxes_all[keep]


def _roi_class_logits(model: DetectorModel, features, boxes: np.ndarray,
                      mode: str) -> tuple[tn.Tensor, dict]:
    pooled = tn.roi_pool(features, boxes, model.arch.roi_size, float(model.arch.stride))
    hidden = tn.dense(pooled, model.fc1_w, model.fc1_b)
    bn_stats = {}
    if model.roi_bn is not None:
        k, width = hidden.shape
        # Adapt-mode statistics need >= 2 proposals per feature.
        bn_mode = mode if (mode == "eval" or k >= 2) else "eval"
        as_map = tn.reshape(hidden, (k, width, 1, 1))
        normed, bmean, bvar = tn.batchnorm_forward(model.roi_bn, as_map, bn_mode)
        hidden = tn.reshape(normed, (k, width))
        if bn_mode == "adapt":
            bn_stats["bn_roi"] = (bmean, bvar)
    hidden = tn.relu(hidden)
    return tn.dense(hidden, model.fc2_w, model.fc2_b), bn_stats


def forward_full(model: DetectorModel, image, mode: str,
                 fixed_proposals: tuple | None = None) -> RawOutputs:
    """Full pass: backbone, proposal selection, ROI classification.

    ``fixed_proposals`` pins the proposal set to ``(anchor_indices, boxes)``
    from an earlier pass so repeated evaluations differentiate the exact same
    surrogate; by default proposals are re-selected from the current output.
    Eval mode mutates nothing.
    """
    features, obj_flat, deltas, bn_stats = _forward_core(model, image, mode)
    if fixed_proposals is None:
        sel_idx, prop_boxes = _select_proposals(model, obj_flat.data, deltas.data)
    else:
        sel_idx, prop_boxes = fixed_proposals
        sel_idx = np.asarray(sel_idx, dtype=np.intp)
        prop_boxes = np.asarray(prop_boxes, dtype=np.float64)
    proposal_logits = tn.take(obj_flat, sel_idx)
    class_logits, roi_stats = _roi_class_logits(model, features, prop_boxes, mode)
    bn_stats.update(roi_stats)
    return RawOutputs(
        proposal_logits=proposal_logits,
        proposal_boxes=prop_boxes,
        proposal_indices=sel_idx,
        class_logits=class_logits,
        anchor_objectness=obj_flat,
        anchor_deltas=deltas,
        bn_stats=bn_stats,
    )


def postprocess(raw: RawOutputs, score_threshold: float = DEFAULT_SCORE_THRESHOLD,
                nms_iou: float = DEFAULT_NMS_IOU) -> list:
    """Score proposals with row softmax, threshold and NMS per category."""
    logits = raw.class_logits.data
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=1, keepdims=True)
    num_fg = logits.shape[1] - 1

    picked = []
    for cat in range(num_fg):
        scores = probs[:, cat]
        idx = np.nonzero(scores >= score_threshold)[0]
        if idx.size == 0:
            continue
        keep = nms(raw.proposal_boxes[idx], scores[idx], nms_iou)
        for k in keep:
            j = idx[k]
            picked.append(Detection(Box(*raw.proposal_boxes[j]), cat, float(scores[j])))
    picked.sort(key=lambda d: (-d.score, d.category, d.box.x1, d.box.y1))
    return picked


# --------------------------------------------------------------------------
# Pretraining
# --------------------------------------------------------------------------

@dataclass
class PretrainConfig:
    steps: int = 4000
    batch_size: int = 2
    lr_initial: float = 1e-3
    lr_final: float = 1e-4
    lr_drop_frac: float = 0.75
    seed: int = 0
    rpn_sample: int = 32
    roi_sample: int = 32
    box_loss_weight: float = 5.0    # sharp deltas keep duplicate detections merged by NMS
    roi_positive_iou: float = 0.65  # classifier learns to score sloppy boxes down


class Adam:
    """Per-parameter Adam state; deterministic given the gradient sequence."""

    def __init__(self, params: dict, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, grads: dict, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            mhat = self.m[name] / (1 - b1 ** self.t)
            vhat = self.v[name] / (1 - b2 ** self.t)
            p.data = p.data - lr * mhat / (np.sqrt(vhat) + self.eps)


def sample_balanced(labels: np.ndarray, total: int, rng) -> tuple[np.ndarray, np.ndarray]:
    """Sample up to ``total`` indices, at most half positive, rest negative."""
    pos = np.nonzero(labels == POSITIVE)[0]
    neg = np.nonzero(labels == NEGATIVE)[0]
    n_pos = min(len(pos), total // 2)
    if len(pos) > n_pos:
        pos = rng.choice(pos, size=n_pos, replace=False)
    n_neg = min(len(neg), total - n_pos)
    if len(neg) > n_neg:
        neg = rng.choice(neg, size=n_neg, replace=False)
    idx = np.concatenate([pos, neg]).astype(np.intp)
    targets = np.concatenate([np.ones(len(pos)), np.zeros(len(neg))])
    return idx, targets


def _supervised_losses(model: DetectorModel, frame_image, gt_boxes: np.ndarray,
                       gt_cats: np.ndarray, rng, cfg: PretrainConfig):
    """Traced RPN + ROI training losses for one labeled frame."""
    with tn.trace() as tape:
        features, obj_flat, deltas, bn_stats = _forward_core(model, frame_image, "adapt")

        labels, matches = assign_anchors(model.anchors, gt_boxes)
        samp_idx, samp_targets = sample_balanced(labels, cfg.rpn_sample, rng)
        loss = tn.sigmoid_bce_with_logits(tn.take(obj_flat, samp_idx), samp_targets)

        pos_idx = np.nonzero(labels == POSITIVE)[0]
        if pos_idx.size:
            delta_targets = encode_deltas(model.anchors[pos_idx], gt_boxes[matches[pos_idx]])
            loss = tn.add(loss, tn.scale(
                tn.smooth_l1(tn.take(deltas, pos_idx), delta_targets),
                cfg.box_loss_weight))

        sel_idx, prop_boxes = _select_proposals(model, obj_flat.data, deltas.data)
        candidates = np.concatenate([prop_boxes, gt_boxes], axis=0)
        overl = iou_matrix(candidates, gt_boxes)
        best = overl.max(axis=1)
        roi_targets = np.where(best >= cfg.roi_positive_iou,
                               gt_cats[overl.argmax(axis=1)], model.background_index)
        roi_labels = np.where(best >= cfg.roi_positive_iou, POSITIVE, NEGATIVE)
        roi_idx, _ = sample_balanced(roi_labels, cfg.roi_sample, rng)
        class_logits, roi_stats = _roi_class_logits(model, features, candidates[roi_idx],
                                                    "adapt")
        bn_stats.update(roi_stats)
        loss = tn.add(loss, tn.softmax_cross_entropy(class_logits, roi_targets[roi_idx]))
    return loss, tape, bn_stats


def _frame_targets(frame) -> tuple[np.ndarray, np.ndarray]:
    if not frame.gt:
        return np.zeros((0, 4)), np.zeros(0, dtype=np.int64)
    boxes = np.array([[b.x1, b.y1, b.x2, b.y2] for b, _ in frame.gt], dtype=np.float64)
    cats = np.array([c for _, c in frame.gt], dtype=np.int64)
    return boxes, cats


def pretrain(model: DetectorModel, dataset: list, config: PretrainConfig) -> tuple:
    """Supervised source training of all parameters; returns (model, loss_curve)."""
    if not dataset:
        raise ValueError("pretraining dataset must not be empty")
    if config.steps == 0:
        return model, []

    model.set_trainable("pretrain")
    params = model.named_parameters()
    opt = Adam(params)
    by_obj = {id(p): n for n, p in params.items()}
    drop_at = int(config.steps * config.lr_drop_frac)
    curve = []

    for step in range(config.steps):
        lr = config.lr_initial if step < drop_at else config.lr_final
        rng = make_rng("pretrain", config.seed, step)
        picks = rng.integers(0, len(dataset), size=config.batch_size)
        grad_sum: dict[str, np.ndarray] = {}
        loss_sum = 0.0
        for fi in picks:
            frame = dataset[int(fi)]
            gt_boxes, gt_cats = _frame_targets(frame)
            image = frame.image.reshape(1, *frame.image.shape)
            loss, tape, bn_stats = _supervised_losses(model, image, gt_boxes, gt_cats, rng, config)
            grads = tape.backward(loss)
            loss_sum += loss.item()
            for p, g in grads.items():
                name = by_obj[id(p)]
                grad_sum[name] = grad_sum.get(name, 0.0) + g / config.batch_size
            for name, bn in model.named_bn_layers().items():
                if name not in bn_stats:
                    continue
                bmean, bvar = bn_stats[name]
                m = bn.momentum
                bn.running_mean = (1 - m) * bn.running_mean + m * bmean
                bn.running_var = (1 - m) * bn.running_var + m * bvar
        opt.step(grad_sum, lr)
        curve.append(loss_sum / config.batch_size)
    return model, curve


# --------------------------------------------------------------------------
# Checkpoint I/O
# --------------------------------------------------------------------------

CHECKPOINT_MAGIC = b"WSTTACKP"
CHECKPOINT_VERSION = 1
_DTYPE_F64 = 1


def save_checkpoint(model: DetectorModel, path) -> None:
    """Bit-exact binary snapshot: magic, version, JSON header, named tensor table."""
    header = json.dumps(
        {"categories": model.categories, "arch": asdict(model.arch)},
        sort_keys=True).encode()
    chunks = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION),
              struct.pack("<I", len(header)), header]
    state = model.named_state()
    chunks.append(struct.pack("<I", len(state)))
    for name in sorted(state):
        arr = np.atleast_1d(np.asarray(state[name], dtype=np.float64))
        nb = name.encode()
        chunks.append(struct.pack("<H", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BB", _DTYPE_F64, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.off = 0

    def read(self, n: int) -> bytes:
        if self.off + n > len(self.buf):
            raise CheckpointError(
                f"truncated checkpoint: wanted {n} bytes at offset {self.off}, "
                f"file has {len(self.buf)}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def load_checkpoint(path) -> DetectorModel:
    """Rebuild a model from :func:`save_checkpoint` output, bitwise losslessly."""
    with open(path, "rb") as fh:
        rd = _Reader(fh.read())
    if rd.read(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic at offset 0: not a detector checkpoint")
    (version,) = rd.unpack("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} at offset 8")
    (hlen,) = rd.unpack("<I")
    try:
        header = json.loads(rd.read(hlen).decode())
        categories = list(header["categories"])
        arch_fields = dict(header["arch"])
        for key in ("conv_channels", "pool_after", "anchor_sizes"):
            arch_fields[key] = tuple(arch_fields[key])
        arch = DetectorArch(**arch_fields)
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"bad header at offset 16: {exc}") from exc

    (count,) = rd.unpack("<I")
    tensors = {}
    for _ in range(count):
        (nlen,) = rd.unpack("<H")
        name = rd.read(nlen).decode()
        dtype_tag, ndim = rd.unpack("<BB")
        if dtype_tag != _DTYPE_F64:
            raise CheckpointError(f"unknown dtype tag {dtype_tag} at offset {rd.off - 2}")
        shape = rd.unpack(f"<{ndim}I")
        n = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(rd.read(8 * n), dtype="<f8").reshape(shape).astype(np.float64)
        tensors[name] = data
    if rd.off != len(rd.buf):
        raise CheckpointError(f"{len(rd.buf) - rd.off} trailing bytes at offset {rd.off}")

    model = build_model(0, categories, arch)
    params = model.named_parameters()
    try:
        for name, p in params.items():
            p.data = np.ascontiguousarray(tensors[name].reshape(p.data.shape))
        for name, bn in model.named_bn_layers().items():
            bn.running_mean = np.ascontiguousarray(tensors[f"{name}.running_mean"])
            bn.running_var = np.ascontiguousarray(tensors[f"{name}.running_var"])
            bn.momentum = float(tensors[f"{name}.momentum"][0])
            bn.epsilon = float(tensors[f"{name}.epsilon"][0])
    except KeyError as exc:
        raise CheckpointError(f"missing tensor {exc.args[0]!r} in checkpoint table") from exc
    return model
