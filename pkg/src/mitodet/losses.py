"""Loss functions: tumor-head cross-entropy, focal loss for the foreground
head and the dense detection classifier, smooth-L1 box regression, and the
weighted multi-task combination.

All functions are differentiable torch compositions. Python scalars are
promoted to float64 tensors so closed-form expectations hold to tight
tolerances; tensor inputs keep their dtype.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

from . import geometry

EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    """Focal-loss hyperparameters, tumor class count, and task weights
    (detection, tumor, foreground)."""

    alpha: float = 0.25
    gamma: float = 2.0
    num_tumor_classes: int = 6
    task_weights: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.num_tumor_classes < 2:
            raise ValueError(
                f"num_tumor_classes must be >= 2, got {self.num_tumor_classes}"
            )
        if len(self.task_weights) != 3:
            raise ValueError("task_weights must be (w_det, w_tumor, w_fg)")
        if any((not math.isfinite(w)) or w < 0 for w in self.task_weights):
            raise ValueError(f"task_weights must be finite and >= 0, got {self.task_weights}")


def _as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x
    return torch.as_tensor(x, dtype=torch.float64)


def cross_entropy(probs, true_class) -> torch.Tensor:
    """-log p of the true class, given a probability vector over C classes.

    ``probs`` is (C,) or (B, C) and must sum to 1 within 1e-6 per row;
    returns a 0-dim tensor or a (B,) tensor of per-row losses. The true-
    class probability is clamped at EPS so a saturated 0 yields a large
    finite loss instead of inf.
    """
    p = _as_tensor(probs)
    squeeze = p.dim() == 1
    if squeeze:
        p = p.unsqueeze(0)
    if p.dim() != 2:
        raise ValueError(f"probs must be a vector or batch of vectors, got shape {tuple(p.shape)}")
    with torch.no_grad():
        if torch.any(p < 0) or torch.any(p > 1):
            raise ValueError("probabilities must lie in [0, 1]")
        if torch.any((p.sum(dim=1) - 1.0).abs() > 1e-6):
            raise ValueError("probabilities must sum to 1 within 1e-6")
    idx = torch.as_tensor(true_class, dtype=torch.long)
    if squeeze and idx.dim() == 0:
        idx = idx.unsqueeze(0)
    if torch.any(idx < 0) or torch.any(idx >= p.shape[1]):
        raise IndexError(f"class index out of range for {p.shape[1]} classes")
    p_true = p.gather(1, idx.unsqueeze(1)).squeeze(1)
    loss = -torch.log(p_true.clamp(min=EPS))
    return loss.squeeze(0) if squeeze else loss


def focal_loss(p_true, alpha, gamma) -> torch.Tensor:
    """-alpha * (1 - p)^gamma * log(p), elementwise.

    ``p_true`` is the probability assigned to the true class (for a binary
    task: p for foreground, 1-p for background, with alpha mirrored to
    1-alpha on the background side). Inputs outside [0, 1] are rejected;
    interior values are clamped to (EPS, 1-EPS).
    """
    p = _as_tensor(p_true)
    with torch.no_grad():
        if torch.any(p < 0) or torch.any(p > 1):
            raise ValueError("p_true must lie in [0, 1]")
    alpha_t = _as_tensor(alpha)
    with torch.no_grad():
        if torch.any(alpha_t <= 0):
            raise ValueError("alpha must be positive")
    if gamma < 0:
        raise ValueError(f"gamma must be >= 0, got {gamma}")
    p = p.clamp(min=EPS, max=1.0 - EPS)
    return -alpha_t * (1.0 - p) ** gamma * torch.log(p)


def binary_focal_from_logit(logit, target, alpha, gamma) -> torch.Tensor:
    """Focal loss on a sigmoid logit, elementwise.

    ``target`` is 0/1; the true-class probability is sigmoid(logit) for
    target 1 and its complement for target 0, with the class weight
    mirrored the same way.
    """
    z = _as_tensor(logit)
    t = _as_tensor(target).to(z.dtype)
    p = torch.sigmoid(z)
    p_true = t * p + (1.0 - t) * (1.0 - p)
    alpha_t = t * alpha + (1.0 - t) * (1.0 - alpha)
    return focal_loss(p_true, alpha_t, gamma)


def smooth_l1(x) -> torch.Tensor:
    """0.5 x^2 for |x| < 1, |x| - 0.5 otherwise, elementwise."""
    x = _as_tensor(x)
    ax = x.abs()
    return torch.where(ax < 1.0, 0.5 * x * x, ax - 0.5)


def detection_loss(cls_logits, pred_deltas, anchor_labels, target_deltas,
                   alpha=0.25, gamma=2.0):
    """Dense detection loss over one image's anchors.

    ``anchor_labels`` follows :func:`mitodet.geometry.match_anchors`:
    >= 0 positive (gt index), NEGATIVE, IGNORE. Classification is focal
    loss summed over non-ignored anchors and normalized by the positive
    count (at least 1); regression is smooth-L1 summed over the four delta
    components and averaged over positive anchors (0 when there are none).

    Returns (cls_loss, reg_loss) as 0-dim tensors.
    """
    z = _as_tensor(cls_logits).reshape(-1)
    if z.numel() == 0:
        raise ValueError("detection_loss requires at least one anchor")
    labels = torch.as_tensor(anchor_labels, dtype=torch.long).reshape(-1)
    if labels.numel() != z.numel():
        raise ValueError("anchor_labels length must match cls_logits")
    d = _as_tensor(pred_deltas).reshape(-1, 4)

    pos = labels >= 0
    neg = labels == geometry.NEGATIVE
    n_pos = int(pos.sum())

    cls_terms = binary_focal_from_logit(
        z[pos | neg], pos[pos | neg].to(z.dtype), alpha, gamma
    )
    cls_loss = cls_terms.sum() / max(1, n_pos)

    if n_pos > 0:
        t = _as_tensor(target_deltas).reshape(-1, 4).to(d.dtype)
        reg_loss = smooth_l1(d[pos] - t[pos]).sum(dim=1).mean()
    else:
        reg_loss = z.new_zeros(())
    return cls_loss, reg_loss


def multitask_loss(det_cls, det_reg, tumor_ce, fg_focal, task_weights=(1.0, 1.0, 1.0)) -> torch.Tensor:
    """w_det * (cls + reg) + w_tumor * tumor_ce + w_fg * fg_focal.

    With weights (1, 0, 0) this is exactly the plain detection loss.
    """
    if len(task_weights) != 3:
        raise ValueError("task_weights must be (w_det, w_tumor, w_fg)")
    w_det, w_tumor, w_fg = (float(w) for w in task_weights)
    if any((not math.isfinite(w)) or w < 0 for w in (w_det, w_tumor, w_fg)):
        raise ValueError(f"task_weights must be finite and >= 0, got {task_weights}")
    parts = [_as_tensor(v) for v in (det_cls, det_reg, tumor_ce, fg_focal)]
    with torch.no_grad():
        for name, v in zip(("det_cls", "det_reg", "tumor_ce", "fg_focal"), parts):
            if not torch.isfinite(v).all():
                raise ValueError(f"loss component {name} is not finite")
    det_cls, det_reg, tumor_ce, fg_focal = parts
    return w_det * (det_cls + det_reg) + w_tumor * tumor_ce + w_fg * fg_focal
