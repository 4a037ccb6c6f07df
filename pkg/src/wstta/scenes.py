"""Deterministic synthetic frames: textured backgrounds, three shape categories,
controllable domain shift, weak-label oracle and label-noise simulation."""
from __future__ import annotations

import functools
import json
import os
from dataclasses import dataclass

import numpy as np

from .boxes import Box, iou_matrix
from .rng import make_rng

IMAGE_SIZE = 64
CATEGORIES = ("disc", "triangle", "square")
MIN_OBJECT_SIZE = 8.0
MAX_OBJECT_SIZE = 28.0
MAX_OBJECTS = 4
PLACEMENT_MAX_IOU = 0.1
FOG_GRAY = 0.75


@dataclass(frozen=True)
class DomainSpec:
    """Appearance shift applied on top of the rendered geometry."""

    fog_alpha: float = 0.0
    brightness_shift: float = 0.0
    noise_sigma: float = 0.0
    hue_rotation: float = 0.0

    def is_identity(self) -> bool:
        return (self.fog_alpha == 0.0 and self.brightness_shift == 0.0
                and self.noise_sigma == 0.0 and self.hue_rotation == 0.0)


DEFAULT_TARGET_SHIFT = DomainSpec(fog_alpha=0.5, brightness_shift=-0.1,
                                  noise_sigma=0.05, hue_rotation=40.0)


@dataclass(frozen=True)
class StreamConfig:
    """Identifies a frame stream: the seed keys the generator, domain the shift."""

    seed: int
    domain: DomainSpec | None = None


@dataclass
class Frame:
    image: np.ndarray               # [3, 64, 64] in [0, 1]
    gt: list                        # list of (Box, category index)
    frame_id: int


def _render_background(rng) -> tuple[np.ndarray, np.ndarray]:
    # Narrow luminance spread keeps per-frame channel statistics steady, so
    # streaming BN updates measure the domain shift rather than scene chatter.
    base = rng.uniform(0.42, 0.48)
    tint = rng.uniform(-0.02, 0.02, size=3)
    fx = rng.uniform(0.02, 0.12)
    fy = rng.uniform(0.02, 0.12)
    ph = rng.uniform(0.0, 2.0 * np.pi, size=2)
    xs = np.arange(IMAGE_SIZE, dtype=np.float64)
    tex = (0.04 * np.sin(2 * np.pi * fx * xs[None, :] + ph[0])
           + 0.04 * np.sin(2 * np.pi * fy * xs[:, None] + ph[1]))
    noise = rng.normal(0.0, 0.01, size=(IMAGE_SIZE, IMAGE_SIZE))
    img = (base + tint)[:, None, None] + (tex + noise)[None, :, :]
    return img, base + tint


def _shape_mask(category: int, cx: float, cy: float, size: float) -> np.ndarray:
    ys, xs = np.meshgrid(np.arange(IMAGE_SIZE, dtype=np.float64),
                         np.arange(IMAGE_SIZE, dtype=np.float64), indexing="ij")
    half = size / 2.0
    name = CATEGORIES[category]
    if name == "disc":
        return (xs - cx) ** 2 + (ys - cy) ** 2 <= half ** 2
    if name == "square":
        return np.maximum(np.abs(xs - cx), np.abs(ys - cy)) <= half
    # Triangle: apex up, base down; three half-plane tests.
    ax, ay = cx, cy - half
    bx, by = cx - half, cy + half
    qx, qy = cx + half, cy + half

    def cross(px, py, x0, y0, x1, y1):
        return (x1 - x0) * (py - y0) - (y1 - y0) * (px - x0)

    d1 = cross(xs, ys, ax, ay, bx, by)
    d2 = cross(xs, ys, bx, by, qx, qy)
    d3 = cross(xs, ys, qx, qy, ax, ay)
    has_neg = (d1 < 0) | (d2 < 0) | (d3 < 0)
    has_pos = (d1 > 0) | (d2 > 0) | (d3 > 0)
    return ~(has_neg & has_pos)


def _pick_color(rng, bg_mean: np.ndarray) -> np.ndarray:
    color = rng.uniform(0.0, 1.0, size=3)
    for _ in range(20):
        if np.abs(color - bg_mean).max() >= 0.3:
            break
        color = rng.uniform(0.0, 1.0, size=3)
    return color


def render_frame(config: StreamConfig, index: int) -> Frame:
    """Pure function of (config.seed, index): same inputs, bitwise-same frame."""
    rng = make_rng("frame", config.seed, index)
    img, bg_mean = _render_background(rng)
    count = int(rng.integers(1, MAX_OBJECTS + 1))
    placed_boxes: list[np.ndarray] = []
    gt: list[tuple[Box, int]] = []

    for _ in range(count):
        for _attempt in range(40):
            cat = int(rng.integers(0, len(CATEGORIES)))
            size = float(rng.uniform(MIN_OBJECT_SIZE, MAX_OBJECT_SIZE))
            half = size / 2.0
            cx = float(rng.uniform(half + 1.0, IMAGE_SIZE - half - 2.0))
            cy = float(rng.uniform(half + 1.0, IMAGE_SIZE - half - 2.0))
            cand = np.array([[cx - half, cy - half, cx + half, cy + half]])
            if placed_boxes:
                overlap = iou_matrix(cand, np.vstack(placed_boxes)).max()
                if overlap > PLACEMENT_MAX_IOU:
                    continue
            mask = _shape_mask(cat, cx, cy, size)
            if not mask.any():
                continue
            color = _pick_color(rng, bg_mean)
            img[:, mask] = color[:, None]
            ys, xs = np.nonzero(mask)
            box = Box(float(xs.min()), float(ys.min()),
                      float(xs.max() + 1), float(ys.max() + 1))
            placed_boxes.append(cand[0])
            gt.append((box, cat))
            break

    image = np.clip(img, 0.0, 1.0)
    if config.domain is not None and not config.domain.is_identity():
        image = apply_domain_shift(image, config.domain,
                                   make_rng("shift", config.seed, index))
    return Frame(image=np.ascontiguousarray(image), gt=gt, frame_id=index)


def hue_rotate(image: np.ndarray, degrees: float) -> np.ndarray:
    """Linear RGB hue rotation (the standard filter matrix)."""
    th = np.deg2rad(degrees)
    c, s = np.cos(th), np.sin(th)
    m = np.array([
        [0.213 + 0.787 * c - 0.213 * s, 0.715 - 0.715 * c - 0.715 * s, 0.072 - 0.072 * c + 0.928 * s],
        [0.213 - 0.213 * c + 0.143 * s, 0.715 + 0.285 * c + 0.140 * s, 0.072 - 0.072 * c - 0.283 * s],
        [0.213 - 0.213 * c - 0.787 * s, 0.715 - 0.715 * c + 0.715 * s, 0.072 + 0.928 * c + 0.072 * s],
    ])
    return np.einsum("dc,chw->dhw", m, image)


def apply_domain_shift(image: np.ndarray, spec: DomainSpec, rng=None) -> np.ndarray:
    """Fog blend toward gray, brightness shift, hue rotation, additive noise."""
    out = image
    if spec.hue_rotation != 0.0:
        out = hue_rotate(out, spec.hue_rotation)
    out = out * (1.0 - spec.fog_alpha) + FOG_GRAY * spec.fog_alpha
    out = out + spec.brightness_shift
    if spec.noise_sigma > 0.0:
        if rng is None:
            raise ValueError("noise_sigma > 0 requires an explicit rng")
        out = out + rng.normal(0.0, spec.noise_sigma, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def weak_label_oracle(frame: Frame) -> set:
    """Exactly the set of category indices present in the ground truth."""
    return {cat for _, cat in frame.gt}


def inject_label_noise(target: np.ndarray, rho: float, rng) -> np.ndarray:
    """Flip each multi-hot bit independently with probability rho."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    target = np.asarray(target, dtype=np.float64)
    flips = rng.random(target.shape) < rho
    return np.where(flips, 1.0 - target, target)


# --------------------------------------------------------------------------
# Dataset splits
# --------------------------------------------------------------------------

SPLITS = {
    # name: (index offset, default count, domain-shifted)
    "source-train": (0, 2000, False),
    "source-test": (1 << 20, 500, False),
    "target-stream": (2 << 20, 1000, True),
    "target-test": (3 << 20, 500, True),
}


def split_config(data_seed: int, split: str,
                 domain: DomainSpec | None = None) -> tuple[StreamConfig, int, int]:
    """Stream config, index offset and default count for a named split."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}; expected one of {sorted(SPLITS)}")
    offset, count, shifted = SPLITS[split]
    if domain is None:
        domain = DEFAULT_TARGET_SHIFT if shifted else None
    return StreamConfig(seed=data_seed, domain=domain), offset, count


@functools.lru_cache(maxsize=8)
def _load_split_cached(data_seed: int, split: str, count: int | None,
                       domain: DomainSpec | None) -> tuple:
    config, offset, default_count = split_config(data_seed, split, domain)
    n = default_count if count is None else count
    return tuple(render_frame(config, offset + i) for i in range(n))


def load_split(data_seed: int, split: str, count: int | None = None,
               domain: DomainSpec | None = None) -> list[Frame]:
    """Render (and memoize) a named split. Frames are shared: do not mutate."""
    return list(_load_split_cached(data_seed, split, count, domain))


# --------------------------------------------------------------------------
# Export / import
# --------------------------------------------------------------------------

ANNOTATION_FILE = "annotations.jsonl"


def export_dataset(frames: list, out_dir) -> None:
    """One PNG per frame plus a newline-delimited annotation record per frame."""
    from PIL import Image

    os.makedirs(out_dir, exist_ok=True)
    records = []
    for frame in frames:
        arr = np.clip(np.round(frame.image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(arr, "RGB").save(os.path.join(out_dir, f"{frame.frame_id}.png"))
        records.append(json.dumps({
            "frame_id": frame.frame_id,
            "objects": [
                {"box": [b.x1, b.y1, b.x2, b.y2], "category": CATEGORIES[cat]}
                for b, cat in frame.gt
            ],
        }, sort_keys=True))
    with open(os.path.join(out_dir, ANNOTATION_FILE), "w") as fh:
        fh.write("\n".join(records) + ("\n" if records else ""))


def import_dataset(in_dir) -> list[Frame]:
    """Read back :func:`export_dataset` output (8-bit quantized pixels)."""
    from PIL import Image

    frames = []
    with open(os.path.join(in_dir, ANNOTATION_FILE)) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            fid = int(rec["frame_id"])
            with Image.open(os.path.join(in_dir, f"{fid}.png")) as im:
                arr = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
            gt = [(Box(*obj["box"]), CATEGORIES.index(obj["category"]))
                  for obj in rec["objects"]]
            frames.append(Frame(image=np.ascontiguousarray(arr.transpose(2, 0, 1)),
                                gt=gt, frame_id=fid))
    return frames
