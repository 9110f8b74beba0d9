"""Box arithmetic: IoU, anchor grids, delta encoding, NMS, anchor matching.

Boxes use the corner convention (x1, y1, x2, y2) in continuous pixel
coordinates with x2 >= x1 and y2 >= y1. Everything here is a pure function
over immutable inputs; the heavy pairwise loops live in
:mod:`mitodet.kernels`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels

# match_anchors label codes (non-negative labels are ground-truth indices)
NEGATIVE = -1
IGNORE = -2


@dataclass(frozen=True)
class Box:
    """Axis-aligned rectangle, corner convention, continuous coordinates."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not math.isfinite(v):
                raise ValueError(f"box coordinates must be finite, got {self}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"box corners out of order: {self}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    def to_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "Box":
        x1, y1, x2, y2 = (float(v) for v in arr)
        return cls(x1, y1, x2, y2)


@dataclass(frozen=True)
class BoxDelta:
    """Anchor-relative regression target: center offsets over anchor size,
    log size ratios."""

    dx: float
    dy: float
    dw: float
    dh: float

    def to_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dw, self.dh], dtype=np.float64)

    @classmethod
    def from_array(cls, arr) -> "BoxDelta":
        dx, dy, dw, dh = (float(v) for v in arr)
        return cls(dx, dy, dw, dh)


def as_box_array(boxes) -> np.ndarray:
    """Coerce a Box, a 4-sequence, a list of either, or an (N, 4) array to
    a float64 (N, 4) array."""
    if isinstance(boxes, Box):
        return boxes.to_array().reshape(1, 4)
    if isinstance(boxes, (list, tuple)) and boxes and isinstance(boxes[0], Box):
        return np.stack([b.to_array() for b in boxes])
    arr = np.asarray(boxes, dtype=np.float64)
    if arr.size == 0:
        return arr.reshape(0, 4)
    return arr.reshape(-1, 4)


def iou(a, b) -> float:
    """IoU of two boxes in [0, 1]; 0 when both boxes are degenerate."""
    return float(kernels.iou_matrix(as_box_array(a), as_box_array(b))[0, 0])


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU, (N, M)."""
    return kernels.iou_matrix(as_box_array(boxes_a), as_box_array(boxes_b))


# ---------------------------------------------------------------------------
# anchors


@dataclass(frozen=True)
class AnchorLevelConfig:
    """One pyramid level: grid stride plus the anchor shapes tiled per cell.

    ``aspect_ratios`` are height/width; each (scale, ratio) pair keeps the
    anchor area at (base_size * scale)^2.
    """

    stride: int
    base_size: float
    scales: tuple = (1.0,)
    aspect_ratios: tuple = (1.0,)

    def __post_init__(self):
        if self.stride <= 0:
            raise ValueError(f"stride must be positive, got {self.stride}")
        if self.base_size <= 0:
            raise ValueError(f"base_size must be positive, got {self.base_size}")
        if len(self.scales) == 0 or len(self.aspect_ratios) == 0:
            raise ValueError("scales and aspect_ratios must be non-empty")
        if any(s <= 0 for s in self.scales) or any(r <= 0 for r in self.aspect_ratios):
            raise ValueError("scales and aspect_ratios must be positive")

    @property
    def anchors_per_cell(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    def cell_anchors(self) -> np.ndarray:
        """(A, 4) anchors centered at the origin, scale-major, ratio-minor."""
        out = np.empty((self.anchors_per_cell, 4), dtype=np.float64)
        k = 0
        for s in self.scales:
            size = self.base_size * s
            for r in self.aspect_ratios:
                w = size / math.sqrt(r)
                h = size * math.sqrt(r)
                out[k] = (-w / 2, -h / 2, w / 2, h / 2)
                k += 1
        return out


# scaled for small mitotic figures: 3 levels, bases 16..64, the usual
# 3 scales x 3 ratios = 9 anchors per cell
DEFAULT_ANCHOR_LEVELS = (
    AnchorLevelConfig(8, 16.0, (1.0, 2 ** (1 / 3), 2 ** (2 / 3)), (0.5, 1.0, 2.0)),
    AnchorLevelConfig(16, 32.0, (1.0, 2 ** (1 / 3), 2 ** (2 / 3)), (0.5, 1.0, 2.0)),
    AnchorLevelConfig(32, 64.0, (1.0, 2 ** (1 / 3), 2 ** (2 / 3)), (0.5, 1.0, 2.0)),
)


@dataclass(frozen=True)
class AnchorSet:
    """Materialized anchor grid for one image size.

    ``level_anchors[i]`` is (N_i, 4), cell row-major with the per-cell
    anchors contiguous; ``all_anchors`` is their concatenation in level
    order.
    """

    image_size: tuple
    levels: tuple
    level_anchors: tuple = field(repr=False)

    @property
    def per_level_counts(self) -> tuple:
        return tuple(a.shape[0] for a in self.level_anchors)

    @property
    def all_anchors(self) -> np.ndarray:
        return np.concatenate(self.level_anchors, axis=0)

    def __len__(self) -> int:
        return sum(self.per_level_counts)


def grid_shape(image_size, stride) -> tuple:
    """Feature-grid (rows, cols) for an image size: ceil(size / stride)."""
    h, w = image_size
    return (math.ceil(h / stride), math.ceil(w / stride))


def generate_anchors(image_size, levels=DEFAULT_ANCHOR_LEVELS) -> AnchorSet:
    """Materialize the dense anchor grid for an (height, width) image.

    Anchor centers sit on the stride grid offset by stride/2; the count per
    level is rows * cols * |scales| * |ratios|.
    """
    h, w = image_size
    if h <= 0 or w <= 0:
        raise ValueError(f"image size must be positive, got {image_size}")
    levels = tuple(levels)
    if not levels:
        raise ValueError("at least one anchor level is required")
    level_anchors = []
    for cfg in levels:
        rows, cols = grid_shape(image_size, cfg.stride)
        cx = (np.arange(cols, dtype=np.float64) + 0.5) * cfg.stride
        cy = (np.arange(rows, dtype=np.float64) + 0.5) * cfg.stride
        shift_x, shift_y = np.meshgrid(cx, cy)
        shifts = np.stack(
            [shift_x.ravel(), shift_y.ravel(), shift_x.ravel(), shift_y.ravel()],
            axis=1,
        )
        cell = cfg.cell_anchors()
        anchors = (shifts[:, None, :] + cell[None, :, :]).reshape(-1, 4)
        level_anchors.append(anchors)
    return AnchorSet(
        image_size=(int(h), int(w)),
        levels=levels,
        level_anchors=tuple(level_anchors),
    )


# ---------------------------------------------------------------------------
# box <-> delta


def encode_boxes(gt_boxes, anchors) -> np.ndarray:
    """Encode ground-truth boxes against anchors as (dx, dy, dw, dh)."""
    g = as_box_array(gt_boxes)
    a = as_box_array(anchors)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have positive area")
    gw = g[:, 2] - g[:, 0]
    gh = g[:, 3] - g[:, 1]
    if np.any(gw <= 0) or np.any(gh <= 0):
        raise ValueError("cannot encode a box with zero width or height")
    acx = a[:, 0] + aw / 2
    acy = a[:, 1] + ah / 2
    gcx = g[:, 0] + gw / 2
    gcy = g[:, 1] + gh / 2
    return np.stack(
        [(gcx - acx) / aw, (gcy - acy) / ah, np.log(gw / aw), np.log(gh / ah)],
        axis=1,
    )


def decode_boxes(deltas, anchors) -> np.ndarray:
    """Invert :func:`encode_boxes`."""
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    a = as_box_array(anchors)
    aw = a[:, 2] - a[:, 0]
    ah = a[:, 3] - a[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0):
        raise ValueError("anchors must have positive area")
    acx = a[:, 0] + aw / 2
    acy = a[:, 1] + ah / 2
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    w = aw * np.exp(d[:, 2])
    h = ah * np.exp(d[:, 3])
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


def encode(gt: Box, anchor: Box) -> BoxDelta:
    return BoxDelta.from_array(encode_boxes(gt, anchor)[0])


def decode(delta: BoxDelta, anchor: Box) -> Box:
    return Box.from_array(decode_boxes(delta.to_array(), anchor)[0])


def clip_boxes(boxes, image_size) -> np.ndarray:
    """Clamp box coordinates into [0, width] x [0, height]."""
    h, w = image_size
    b = as_box_array(boxes).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0.0, float(w))
    b[:, 1::2] = np.clip(b[:, 1::2], 0.0, float(h))
    return b


def remap_boxes_to_window(boxes, origin_xy, window_size, min_area_frac=0.3):
    """Translate boxes into a window's coordinate frame and clip to it.

    Boxes whose clipped area falls below ``min_area_frac`` of their
    original area (or to zero) are dropped. Returns (remapped (K, 4),
    kept original indices (K,)).
    """
    b = as_box_array(boxes)
    if b.shape[0] == 0:
        return b.reshape(0, 4), np.empty(0, dtype=np.int64)
    x0, y0 = origin_xy
    h, w = window_size
    shifted = b - np.array([x0, y0, x0, y0], dtype=np.float64)
    clipped = clip_boxes(shifted, (h, w))
    orig_area = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    new_area = (clipped[:, 2] - clipped[:, 0]) * (clipped[:, 3] - clipped[:, 1])
    kept = (new_area > 0) & (new_area >= min_area_frac * orig_area)
    return clipped[kept], np.flatnonzero(kept).astype(np.int64)


# ---------------------------------------------------------------------------
# suppression and matching


def nms(boxes, scores, iou_threshold) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order.

    Score ties break toward the lower input index, which makes the output
    deterministic.
    """
    if not 0.0 <= iou_threshold <= 1.0:
        raise ValueError(f"iou_threshold must be in [0, 1], got {iou_threshold}")
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size and not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return kernels.nms(as_box_array(boxes), scores, float(iou_threshold))


def match_anchors(anchors, gt_boxes, pos_threshold=0.5, neg_threshold=0.4) -> np.ndarray:
    """Assign each anchor a label: gt index (>= 0), NEGATIVE, or IGNORE.

    An anchor is positive when its max IoU over ground truths reaches
    ``pos_threshold`` (argmax gt, ties to the lowest gt index), negative
    below ``neg_threshold``, and ignored in between. Each ground truth's
    single best anchor is forced positive so no gt goes unsupervised.
    """
    if pos_threshold < neg_threshold:
        raise ValueError("pos_threshold must be >= neg_threshold")
    a = anchors.all_anchors if isinstance(anchors, AnchorSet) else as_box_array(anchors)
    g = as_box_array(gt_boxes)
    labels = np.full(a.shape[0], NEGATIVE, dtype=np.int64)
    if g.shape[0] == 0:
        return labels

    ious = kernels.iou_matrix(a, g)
    best_gt = np.argmax(ious, axis=1)  # ties -> lowest gt index
    best_iou = ious[np.arange(a.shape[0]), best_gt]
    labels[best_iou >= pos_threshold] = best_gt[best_iou >= pos_threshold]
    band = (best_iou < pos_threshold) & (best_iou >= neg_threshold)
    labels[band] = IGNORE

    # force-match: each gt claims its best anchor (ties -> lowest anchor
    # index; a later gt wins a shared best anchor)
    best_anchor = np.argmax(ious, axis=0)
    for gi in range(g.shape[0]):
        labels[best_anchor[gi]] = gi
    return labels
