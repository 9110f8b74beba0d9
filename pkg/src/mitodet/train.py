"""Deterministic CPU training loop for the multi-task detector.

Per epoch: resample patches from every training case (seeded by
(seed, epoch)), augment, match anchors, and take Adam steps on the
weighted multi-task loss. Logs one row per epoch with the individual
loss terms; disabled heads log exactly 0 for their terms.
"""

from __future__ import annotations

import dataclasses
import json
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from . import data as data_mod
from . import evaluation, geometry
from .augment import compose
from .config import RunConfig, resolve_output_dir, save_config, to_flat
from .losses import binary_focal_from_logit, cross_entropy, detection_loss, multitask_loss
from .model import MitosisDetector, anchors_for, image_to_tensor, save_checkpoint


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; the last finite-state
    checkpoint is left on disk."""


@dataclass
class TrainResult:
    model: MitosisDetector
    history: list
    best_val_map: float | None
    f1_threshold: float | None
    train_cases: list
    val_cases: list
    test_cases: list
    image_cache: dict
    checkpoint_last: Path | None
    checkpoint_best: Path | None


def split_train_val(records, val_fraction, seed):
    """Case-level validation split, deterministic in the seed."""
    records = list(records)
    n_val = int(round(len(records) * val_fraction))
    if n_val == 0 or n_val >= len(records):
        return records, []
    order = np.random.default_rng([seed, 917]).permutation(len(records))
    val_idx = set(order[:n_val].tolist())
    train = [r for i, r in enumerate(records) if i not in val_idx]
    val = [r for i, r in enumerate(records) if i in val_idx]
    return train, val


def _effective_weights(config: RunConfig):
    w_det, w_tumor, w_fg = config.loss.task_weights
    if not config.use_tumor_head:
        w_tumor = 0.0
    if not config.use_fg_head:
        w_fg = 0.0
    return (w_det, w_tumor, w_fg)


def _batch_targets(samples, anchor_set, pos_iou, neg_iou):
    """Anchor labels, box-regression targets, and aux targets for a list
    of augmented PatchSamples."""
    anchors = anchor_set.all_anchors
    labels, deltas, tumor_labels, fg_flags = [], [], [], []
    for s in samples:
        boxes = s.detection_boxes()
        lab = geometry.match_anchors(anchors, boxes, pos_iou, neg_iou)
        tgt = np.zeros((anchors.shape[0], 4), dtype=np.float64)
        pos = lab >= 0
        if pos.any():
            tgt[pos] = geometry.encode_boxes(boxes[lab[pos]], anchors[pos])
        labels.append(torch.from_numpy(lab))
        deltas.append(torch.from_numpy(tgt).float())
        tumor_labels.append(s.tumor_label)
        fg_flags.append(1.0 if s.foreground else 0.0)
    return (
        torch.stack(labels),
        torch.stack(deltas),
        torch.tensor(tumor_labels, dtype=torch.long),
        torch.tensor(fg_flags),
    )


def _train_epoch(model, optimizer, patches, anchor_set, config):
    """One pass over the epoch's patches; returns mean loss components."""
    w = _effective_weights(config)
    alpha, gamma = config.loss.alpha, config.loss.gamma
    sums = {"det_cls": 0.0, "det_reg": 0.0, "tumor_ce": 0.0, "fg_focal": 0.0, "total": 0.0}
    n_batches = 0
    model.train()
    for start in range(0, len(patches), config.batch_size):
        batch = patches[start:start + config.batch_size]
        images = torch.stack([image_to_tensor(s.image) for s in batch])
        labels, deltas, tumor_t, fg_t = _batch_targets(
            batch, anchor_set, config.pos_iou, config.neg_iou
        )
        out = model(images)
        cls_logits = out.cat_cls()
        box_deltas = out.cat_deltas()
        det_cls = cls_logits.new_zeros(())
        det_reg = cls_logits.new_zeros(())
        for i in range(len(batch)):
            c, r = detection_loss(
                cls_logits[i], box_deltas[i], labels[i], deltas[i], alpha, gamma
            )
            det_cls = det_cls + c
            det_reg = det_reg + r
        det_cls = det_cls / len(batch)
        det_reg = det_reg / len(batch)

        if model.use_tumor_head and w[1] > 0:
            probs = torch.softmax(out.tumor_logits, dim=-1)
            tumor_ce = cross_entropy(probs, tumor_t).mean()
        else:
            tumor_ce = det_cls.new_zeros(())
        if model.use_fg_head and w[2] > 0:
            fg_focal = binary_focal_from_logit(out.fg_logit, fg_t, alpha, gamma).mean()
        else:
            fg_focal = det_cls.new_zeros(())

        components = {"det_cls": det_cls, "det_reg": det_reg,
                      "tumor_ce": tumor_ce, "fg_focal": fg_focal}
        bad = [k for k, v in components.items() if not torch.isfinite(v)]
        if bad:
            raise TrainingDiverged(
                f"non-finite loss at batch {n_batches}: "
                + " ".join(f"{k}={float(components[k].detach())}" for k in components)
            )
        total = multitask_loss(det_cls, det_reg, tumor_ce, fg_focal, w)
        optimizer.zero_grad()
        total.backward()
        optimizer.step()

        for key, val in (("det_cls", det_cls), ("det_reg", det_reg),
                         ("tumor_ce", tumor_ce), ("fg_focal", fg_focal),
                         ("total", total)):
            sums[key] += float(val.detach())
        n_batches += 1
    if n_batches == 0:
        raise ValueError("no training patches were produced")
    return {k: v / n_batches for k, v in sums.items()}


def _resample_patches(records, images, class_names, config, epoch):
    rng = np.random.default_rng([config.seed, 1, epoch])
    patches = []
    for rec in records:
        patches.extend(
            data_mod.sample_patches(
                rec, images[rec.case_id], class_names,
                patch_size=config.patch_size,
                n_patches=config.patches_per_case,
                rng=rng,
            )
        )
    order = rng.permutation(len(patches))
    return [patches[i] for i in order]


def _augment_patches(patches, config, epoch):
    if not config.augment.enabled:
        return patches
    out = []
    for i, s in enumerate(patches):
        img, anns, fg = compose(
            s.image, s.annotations, config.augment, seed=[config.seed, 2, epoch, i]
        )
        out.append(dataclasses.replace(
            s, image=img, annotations=anns, foreground=fg
        ))
    return out


def train_model(manifest, config: RunConfig, out_dir=None, log_fn=None) -> TrainResult:
    """Train on the leave-one-tumor-out split of ``manifest``.

    Writes `config.json`, per-epoch checkpoints (`last.pt`, plus
    `best.pt` at the best validation mAP), and returns the trained model
    with its history. ``epochs=0`` emits the initialized checkpoint only.
    """
    if isinstance(manifest, (str, Path)):
        manifest = data_mod.load_dataset(manifest)
    class_names = list(manifest.tumor_types)
    config = dataclasses.replace(
        config, loss=dataclasses.replace(config.loss, num_tumor_classes=len(class_names))
    )
    train_all, test_cases = data_mod.split_leave_one_tumor_out(
        manifest.cases, config.held_out
    )
    train_cases, val_cases = split_train_val(
        train_all, config.val_fraction, config.seed
    )
    if not train_cases:
        raise ValueError("training split is empty")

    out = Path(out_dir) if out_dir is not None else resolve_output_dir(config)
    out.mkdir(parents=True, exist_ok=True)
    save_config(config, out / "config.json")
    log_path = out / "train_log.jsonl"

    images = {
        rec.case_id: data_mod.load_case_image(rec)
        for rec in (*train_cases, *val_cases, *test_cases)
    }

    crop = config.augment.crop_size if config.augment.enabled and config.augment.crop_size \
        else config.patch_size
    anchor_set = anchors_for((crop, crop), config.anchors)

    torch.manual_seed(config.seed)
    model = MitosisDetector(
        backbone_config=config.backbone,
        anchor_levels=config.anchors,
        num_tumor_classes=len(class_names),
        use_tumor_head=config.use_tumor_head,
        use_fg_head=config.use_fg_head,
    )
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    def emit(row):
        with log_path.open("a") as fh:
            fh.write(json.dumps(row) + "\n")
        if log_fn:
            log_fn(row)

    def val_map():
        if not val_cases:
            return None
        per_dets, per_gts = evaluation.collect_detections(
            model, val_cases, images,
            score_threshold=config.score_threshold,
            nms_threshold=config.nms_threshold,
            max_detections=config.max_detections,
        )
        ap, _, _ = evaluation.pooled_average_precision(
            per_dets, per_gts, config.iou_threshold
        )
        return ap

    ckpt_args = dict(class_names=class_names, loss_config=config.loss,
                     extra={"config": to_flat(config)})
    last_path = out / "last.pt"
    best_path = out / "best.pt"
    history = []
    best = None
    wrote_best = False

    # the initialized state is the first "last good" checkpoint, so a
    # divergence in epoch 1 still leaves a loadable model behind
    save_checkpoint(last_path, model, **ckpt_args)
    if config.epochs == 0:
        save_checkpoint(best_path, model, **ckpt_args)
        return TrainResult(model, history, None, None, train_cases, val_cases,
                           test_cases, images, last_path, best_path)

    for epoch in range(1, config.epochs + 1):
        t0 = time.monotonic()
        patches = _resample_patches(train_cases, images, class_names, config, epoch)
        patches = _augment_patches(patches, config, epoch)
        means = _train_epoch(model, optimizer, patches, anchor_set, config)
        vmap = val_map()
        row = {"epoch": epoch, **{k: round(v, 6) for k, v in means.items()},
               "val_map": None if vmap is None else round(vmap, 6),
               "seconds": round(time.monotonic() - t0, 2)}
        history.append(row)
        emit(row)
        save_checkpoint(last_path, model, **ckpt_args)
        if vmap is not None and (best is None or vmap > best):
            best = vmap
            save_checkpoint(best_path, model, **ckpt_args)
            wrote_best = True
    if not wrote_best:
        save_checkpoint(best_path, model, **ckpt_args)

    f1_thr = None
    if val_cases:
        per_dets, per_gts = evaluation.collect_detections(
            model, val_cases, images,
            score_threshold=config.score_threshold,
            nms_threshold=config.nms_threshold,
            max_detections=config.max_detections,
        )
        f1_thr, _ = evaluation.sweep_f1_threshold(per_dets, per_gts, config.iou_threshold)

    return TrainResult(model, history, best, f1_thr, train_cases, val_cases,
                       test_cases, images, last_path, best_path)
