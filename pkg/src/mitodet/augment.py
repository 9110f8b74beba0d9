"""Seeded augmentation: color jitter, random crop, horizontal/vertical
flips. Identical (input, config, seed) triples produce byte-identical
outputs.

Images are HWC float arrays in [0, 1]. Jitter applies in the fixed order
brightness -> contrast -> saturation -> hue, each step clamping back to
[0, 1]; factors at exact identity are skipped so zero-magnitude configs
are true no-ops.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from matplotlib.colors import hsv_to_rgb, rgb_to_hsv

from . import geometry
from .data import Annotation, label_foreground

_LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float64)


@dataclass(frozen=True)
class AugmentConfig:
    """Jitter magnitudes, crop size, and flip probabilities.

    A factor magnitude m samples multiplicative factors from [1-m, 1+m];
    hue samples an additive shift from [-hue, +hue] on the hue circle.
    ``crop_size`` of None means no cropping.
    """

    brightness: float = 0.35
    contrast: float = 0.2
    saturation: float = 0.1
    hue: float = 0.1
    crop_size: int | None = None
    flip_h_prob: float = 0.5
    flip_v_prob: float = 0.5
    enabled: bool = True

    def __post_init__(self):
        for name in ("brightness", "contrast", "saturation", "hue"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} magnitude must be >= 0")
        if self.hue > 0.5:
            raise ValueError("hue shift magnitude cannot exceed 0.5")
        for name in ("flip_h_prob", "flip_v_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.crop_size is not None and self.crop_size <= 0:
            raise ValueError("crop_size must be positive")


@dataclass(frozen=True)
class JitterParams:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue_shift: float = 0.0


def sample_jitter(config: AugmentConfig, rng) -> JitterParams:
    """Draw one set of jitter factors. Always consumes four draws so the
    rng stream does not depend on which magnitudes are zero."""
    b = rng.uniform(1.0 - config.brightness, 1.0 + config.brightness)
    c = rng.uniform(1.0 - config.contrast, 1.0 + config.contrast)
    s = rng.uniform(1.0 - config.saturation, 1.0 + config.saturation)
    h = rng.uniform(-config.hue, config.hue)
    return JitterParams(b, c, s, h)


def _check_range(image):
    if image.size and (image.min() < 0.0 or image.max() > 1.0):
        raise ValueError("image values must lie in [0, 1]")


def apply_jitter(image, params: JitterParams) -> np.ndarray:
    """Apply jitter factors in the fixed order, clamping after each step."""
    out = np.asarray(image, dtype=np.float64)
    if params.brightness != 1.0:
        out = np.clip(out * params.brightness, 0.0, 1.0)
    if params.contrast != 1.0:
        mean = float(out @ _LUMA if out.ndim == 1 else (out * _LUMA).sum(axis=-1).mean())
        out = np.clip((out - mean) * params.contrast + mean, 0.0, 1.0)
    if params.saturation != 1.0:
        gray = (out * _LUMA).sum(axis=-1, keepdims=True)
        out = np.clip(out * params.saturation + gray * (1.0 - params.saturation), 0.0, 1.0)
    if params.hue_shift != 0.0:
        hsv = rgb_to_hsv(out)
        hsv[..., 0] = (hsv[..., 0] + params.hue_shift) % 1.0
        out = np.clip(hsv_to_rgb(hsv), 0.0, 1.0)
    return out.astype(np.asarray(image).dtype, copy=False)


def color_jitter(image, config: AugmentConfig, rng) -> np.ndarray:
    """Sample factors from the config's ranges and apply them."""
    image = np.asarray(image)
    _check_range(image)
    return apply_jitter(image, sample_jitter(config, rng))


# ---------------------------------------------------------------------------
# geometric transforms


def flip_boxes_h(boxes, width) -> np.ndarray:
    """Mirror boxes across the vertical center line: x -> width - x."""
    b = geometry.as_box_array(boxes).copy()
    b[:, [0, 2]] = width - b[:, [2, 0]]
    return b


def flip_boxes_v(boxes, height) -> np.ndarray:
    b = geometry.as_box_array(boxes).copy()
    b[:, [1, 3]] = height - b[:, [3, 1]]
    return b


def crop_with_boxes(image, boxes, x0, y0, size, min_area_frac=0.3):
    """Extract a size x size window at (x0, y0); remap and filter boxes.

    Boxes are translated into the window frame, clipped, and dropped when
    their clipped area is under ``min_area_frac`` of the original.
    Returns (window, boxes, kept original indices).
    """
    h, w = image.shape[:2]
    if size > h or size > w:
        raise ValueError(f"crop size {size} exceeds image {h}x{w}")
    if not (0 <= x0 <= w - size and 0 <= y0 <= h - size):
        raise ValueError(f"crop origin ({x0}, {y0}) out of bounds")
    window = image[y0:y0 + size, x0:x0 + size]
    remapped, kept = geometry.remap_boxes_to_window(boxes, (x0, y0), (size, size), min_area_frac)
    return window, remapped, kept


def random_crop_flip(image, boxes, config: AugmentConfig, rng):
    """Random crop (uniform over valid origins) then random h/v flips.

    All four random draws happen on every call so the rng stream is
    independent of the config. Returns (image, boxes, kept indices).
    """
    image = np.asarray(image)
    h, w = image.shape[:2]
    size = config.crop_size if config.crop_size is not None else min(h, w)
    if size > min(h, w):
        raise ValueError(f"crop_size {size} exceeds image {h}x{w}")
    x0 = int(rng.integers(0, w - size + 1))
    y0 = int(rng.integers(0, h - size + 1))
    do_h = rng.uniform() < config.flip_h_prob
    do_v = rng.uniform() < config.flip_v_prob

    out, kept_boxes, kept = crop_with_boxes(image, boxes, x0, y0, size)
    out = np.ascontiguousarray(out)
    if do_h:
        out = out[:, ::-1].copy()
        kept_boxes = flip_boxes_h(kept_boxes, size)
    if do_v:
        out = out[::-1].copy()
        kept_boxes = flip_boxes_v(kept_boxes, size)
    return out, kept_boxes, kept


def compose(image, annotations, config: AugmentConfig, seed):
    """Full pipeline on one patch: crop/flips, then color jitter.

    ``annotations`` is a sequence of :class:`mitodet.data.Annotation`; the
    foreground flag is recomputed from the annotations that survive the
    crop. With ``enabled`` False the inputs pass through untouched.

    Returns (image, annotations, foreground_flag).
    """
    annotations = tuple(annotations)
    if not config.enabled:
        return np.asarray(image), annotations, label_foreground(annotations)

    image = np.asarray(image)
    _check_range(image)
    rng = np.random.default_rng(seed)
    boxes = np.stack([a.box.to_array() for a in annotations]) if annotations else np.empty((0, 4))
    out, new_boxes, kept = random_crop_flip(image, boxes, config, rng)
    out = color_jitter(out, config, rng)
    new_annotations = tuple(
        replace(annotations[src], box=geometry.Box.from_array(new_boxes[i]))
        for i, src in enumerate(kept)
    )
    return out, new_annotations, label_foreground(new_annotations)
