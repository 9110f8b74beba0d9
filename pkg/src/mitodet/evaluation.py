"""Detection evaluation: greedy matching at IoU 0.5, all-points-interpolated
average precision, F1 at an operating threshold, and the 2^3 ablation
harness over {foreground head, tumor head, augmentation}.

There is a single detection class, so mAP equals AP; the "mAP" name is
kept in reports and CSV headers.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import geometry, model as model_mod

# (fg_head, tumor_head, augmentation) per ablation row, baseline first,
# all components last
ABLATION_ROW_ORDER = (
    (False, False, False),
    (False, False, True),
    (False, True, False),
    (True, False, False),
    (False, True, True),
    (True, False, True),
    (True, True, False),
    (True, True, True),
)

# mAP(iou=0.5) for this same ablation grid from a full-scale multi-domain
# training run; reference metadata only, desk-scale runs are not expected
# to reproduce these
FULL_SCALE_REFERENCE_MAP = {
    (False, False, False): 0.433,
    (False, False, True): 0.449,
    (False, True, False): 0.458,
    (True, False, False): 0.451,
    (False, True, True): 0.463,
    (True, False, True): 0.465,
    (True, True, False): 0.473,
    (True, True, True): 0.486,
}

ABLATION_CSV_HEADER = (
    "foreground classification",
    "tumor classification",
    "data augmentation",
    "mAP(iou=0.5)",
)


@dataclass
class MatchResult:
    """Greedy matching outcome for one image.

    ``flags`` marks each detection TP (True) or FP (False) in
    descending-score order, with ``scores`` aligned; ``gt_matched`` marks
    which ground truths were claimed.
    """

    scores: np.ndarray
    flags: np.ndarray
    gt_matched: np.ndarray

    @property
    def tp(self) -> int:
        return int(self.flags.sum())

    @property
    def fp(self) -> int:
        return int((~self.flags).sum())

    @property
    def fn(self) -> int:
        return int((~self.gt_matched).sum())


def _dets_to_arrays(detections):
    if isinstance(detections, tuple) and len(detections) == 2:
        boxes, scores = detections
        return geometry.as_box_array(boxes), np.asarray(scores, dtype=np.float64).reshape(-1)
    boxes = [d.box.to_array() for d in detections]
    scores = [d.score for d in detections]
    return (
        np.stack(boxes) if boxes else np.empty((0, 4)),
        np.asarray(scores, dtype=np.float64),
    )


def match_detections(detections, gt_boxes, iou_threshold=0.5,
                     match_mode="iou", center_radius=7.5) -> MatchResult:
    """Greedily match detections to ground truths.

    Detections are visited in descending-score order (ties to the lower
    input index); each claims the best still-unmatched ground truth:
    highest IoU >= ``iou_threshold`` in "iou" mode, nearest center within
    ``center_radius`` pixels in "center" mode. IoU/distance ties break to
    the lower gt index.
    """
    if match_mode not in ("iou", "center"):
        raise ValueError(f"unknown match mode {match_mode!r}")
    boxes, scores = _dets_to_arrays(detections)
    gts = geometry.as_box_array(gt_boxes)
    order = np.argsort(-scores, kind="stable")
    flags = np.zeros(order.size, dtype=bool)
    gt_matched = np.zeros(gts.shape[0], dtype=bool)
    if order.size and gts.shape[0]:
        if match_mode == "iou":
            affinity = geometry.iou_matrix(boxes, gts)
            eligible = affinity >= iou_threshold
        else:
            det_c = (boxes[:, :2] + boxes[:, 2:]) / 2
            gt_c = (gts[:, :2] + gts[:, 2:]) / 2
            dist = np.sqrt(((det_c[:, None, :] - gt_c[None, :, :]) ** 2).sum(-1))
            affinity = -dist
            eligible = dist <= center_radius
        for rank, di in enumerate(order):
            row = np.where(~gt_matched & eligible[di], affinity[di], -np.inf)
            gi = int(np.argmax(row))
            if row[gi] > -np.inf:
                flags[rank] = True
                gt_matched[gi] = True
    return MatchResult(scores=scores[order], flags=flags, gt_matched=gt_matched)


def average_precision(flags, n_gt) -> float:
    """Area under the precision envelope vs recall (all-points AP).

    With no ground truths the score is 1.0 for an empty detection list
    and 0.0 otherwise.
    """
    if n_gt < 0:
        raise ValueError("n_gt must be >= 0")
    flags = np.asarray(flags, dtype=bool).reshape(-1)
    if n_gt == 0:
        return 1.0 if flags.size == 0 else 0.0
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate(([0.0], recall))
    mpre = np.concatenate(([0.0], precision))
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    changed = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def precision_recall_points(flags, n_gt):
    """(recall, precision) at every rank of the pooled detection list."""
    flags = np.asarray(flags, dtype=bool).reshape(-1)
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt if n_gt > 0 else np.zeros_like(tp, dtype=float)
    precision = tp / (tp + fp)
    return recall, precision


@dataclass(frozen=True)
class PRF1:
    precision: float
    recall: float
    f1: float
    tp: int
    fp: int
    fn: int
    degenerate: bool = False


def _prf1(tp, fp, fn) -> PRF1:
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    if precision + recall == 0.0:
        return PRF1(precision, recall, 0.0, tp, fp, fn, degenerate=True)
    return PRF1(precision, recall, 2 * precision * recall / (precision + recall), tp, fp, fn)


def f1_at_threshold(per_image_detections, per_image_gts, score_threshold,
                    iou_threshold=0.5) -> PRF1:
    """Pool TP/FP/FN over images after filtering by score and compute
    precision/recall/F1. ``degenerate`` flags the P + R = 0 case."""
    if not 0.0 <= score_threshold <= 1.0 or not 0.0 <= iou_threshold <= 1.0:
        raise ValueError("thresholds must lie in [0, 1]")
    tp = fp = fn = 0
    for dets, gts in zip(per_image_detections, per_image_gts):
        boxes, scores = _dets_to_arrays(dets)
        keep = scores >= score_threshold
        m = match_detections((boxes[keep], scores[keep]), gts, iou_threshold)
        tp += m.tp
        fp += m.fp
        fn += m.fn
    return _prf1(tp, fp, fn)


def sweep_f1_threshold(per_image_detections, per_image_gts, iou_threshold=0.5):
    """Pick the score threshold maximizing F1 over candidate scores.

    Candidates are the distinct detection scores (plus 0.5 as a fallback
    when there are none). Ties prefer the higher threshold. Returns
    (threshold, PRF1 at it).
    """
    all_scores = np.concatenate(
        [_dets_to_arrays(d)[1] for d in per_image_detections]
        or [np.empty(0)]
    )
    candidates = np.unique(all_scores) if all_scores.size else np.array([0.5])
    best_thr, best = None, None
    for thr in candidates[::-1]:
        r = f1_at_threshold(per_image_detections, per_image_gts, float(thr), iou_threshold)
        if best is None or r.f1 > best.f1:
            best_thr, best = float(thr), r
    return best_thr, best


# ---------------------------------------------------------------------------
# model-level evaluation


def collect_detections(model, cases, images=None, score_threshold=0.05,
                       nms_threshold=0.5, max_detections=100):
    """Run the detector over whole case images.

    Returns (per_image_detections, per_image_gts) where ground truths are
    the mitotic-figure boxes. ``images`` maps case_id to a preloaded
    array; unlisted cases are read from disk.
    """
    from . import data as data_mod

    per_dets, per_gts = [], []
    for case in cases:
        img = images[case.case_id] if images and case.case_id in images else \
            data_mod.load_case_image(case)
        dets = model_mod.predict(
            model, img,
            score_threshold=score_threshold,
            nms_threshold=nms_threshold,
            max_detections=max_detections,
        )
        gts = [a.box.to_array() for a in case.annotations if a.is_detection_target]
        per_dets.append(dets)
        per_gts.append(np.stack(gts) if gts else np.empty((0, 4)))
    return per_dets, per_gts


def pooled_average_precision(per_image_detections, per_image_gts, iou_threshold=0.5) -> float:
    """AP over all images: per-image greedy matching, then a single ranked
    list pooled across images by score."""
    scores, flags, n_gt = [], [], 0
    for dets, gts in zip(per_image_detections, per_image_gts):
        m = match_detections(dets, gts, iou_threshold)
        scores.append(m.scores)
        flags.append(m.flags)
        n_gt += int(geometry.as_box_array(gts).shape[0])
    scores = np.concatenate(scores) if scores else np.empty(0)
    flags = np.concatenate(flags) if flags else np.empty(0, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    return average_precision(flags[order], n_gt), flags[order], n_gt


@dataclass
class EvalReport:
    """Metrics for one run plus its ablation flags: one table row."""

    ap: float
    map: float
    precision: float
    recall: float
    f1: float
    score_threshold: float
    fg_head: bool
    tumor_head: bool
    augmentation: bool
    n_images: int = 0
    n_gt: int = 0
    status: str = "ok"

    def to_json_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def failed(cls, fg_head, tumor_head, augmentation) -> "EvalReport":
        return cls(
            ap=float("nan"), map=float("nan"), precision=float("nan"),
            recall=float("nan"), f1=float("nan"), score_threshold=float("nan"),
            fg_head=fg_head, tumor_head=tumor_head, augmentation=augmentation,
            status="failed",
        )


def evaluate_model(model, cases, images=None, iou_threshold=0.5,
                   score_threshold=0.05, nms_threshold=0.5, max_detections=100,
                   f1_score_threshold=None, fg_head=None, tumor_head=None,
                   augmentation=None) -> EvalReport:
    """Full detection evaluation of a model on a case list.

    When ``f1_score_threshold`` is None the operating point is swept on
    these same cases (callers wanting an unbiased F1 should sweep on a
    validation split and pass the threshold in).
    """
    if not cases:
        raise ValueError("cannot evaluate on an empty case list")
    per_dets, per_gts = collect_detections(
        model, cases, images, score_threshold, nms_threshold, max_detections
    )
    ap, _, n_gt = pooled_average_precision(per_dets, per_gts, iou_threshold)
    if f1_score_threshold is None:
        f1_score_threshold, prf1 = sweep_f1_threshold(per_dets, per_gts, iou_threshold)
    else:
        prf1 = f1_at_threshold(per_dets, per_gts, f1_score_threshold, iou_threshold)
    return EvalReport(
        ap=ap, map=ap,
        precision=prf1.precision, recall=prf1.recall, f1=prf1.f1,
        score_threshold=f1_score_threshold,
        fg_head=bool(model.use_fg_head if fg_head is None else fg_head),
        tumor_head=bool(model.use_tumor_head if tumor_head is None else tumor_head),
        augmentation=bool(augmentation) if augmentation is not None else False,
        n_images=len(cases), n_gt=n_gt,
    )


# ---------------------------------------------------------------------------
# report files


def write_report_json(report: EvalReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_json_dict(), indent=2, sort_keys=True))
    return path


def write_reports_csv(reports, path) -> Path:
    """Full-column CSV, one row per report."""
    path = Path(path)
    fields = [
        "fg_head", "tumor_head", "augmentation", "ap", "map", "precision",
        "recall", "f1", "score_threshold", "n_images", "n_gt", "status",
    ]
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fields)
        for r in reports:
            d = r.to_json_dict()
            w.writerow([d[f] for f in fields])
    return path


def _fmt_map(report: EvalReport) -> str:
    if report.status != "ok" or math.isnan(report.map):
        return "failed"
    return f"{report.map:.4f}"


def write_ablation_csv(reports, path) -> Path:
    """Checkmark-style ablation table: component columns plus mAP."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(ABLATION_CSV_HEADER)
        for r in reports:
            w.writerow([
                "✓" if r.fg_head else "",
                "✓" if r.tumor_head else "",
                "✓" if r.augmentation else "",
                _fmt_map(r),
            ])
    return path


def plot_pr_curve(flags, n_gt, path, title="precision-recall"):
    """Save the pooled PR curve as a raster image."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    recall, precision = precision_recall_points(flags, n_gt)
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.plot(np.concatenate(([0.0], recall)), np.concatenate(([1.0], precision)), drawstyle="steps-post")
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_xlim(0, 1.02)
    ax.set_ylim(0, 1.02)
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_ablation(reports, path):
    """Bar chart of mAP per ablation row."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels, values = [], []
    for r in reports:
        marks = "".join(
            m if on else "-"
            for m, on in zip("FTA", (r.fg_head, r.tumor_head, r.augmentation))
        )
        labels.append(marks)
        values.append(0.0 if r.status != "ok" or math.isnan(r.map) else r.map)
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(range(len(values)), values)
    ax.set_xticks(range(len(labels)), labels)
    ax.set_xlabel("components on (F=foreground head, T=tumor head, A=augmentation)")
    ax.set_ylabel("mAP@0.5")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


# ---------------------------------------------------------------------------
# ablation harness


def run_ablation(manifest, base_config, progress=None):
    """Train and evaluate all 2^3 component combinations.

    Every row starts from the same seed; rows whose training diverges are
    marked failed and the harness continues. Returns 8 EvalReports in
    ``ABLATION_ROW_ORDER``.
    """
    from dataclasses import replace as dc_replace

    from .train import TrainingDiverged, train_model

    reports = []
    for fg, tumor, aug in ABLATION_ROW_ORDER:
        cfg = dc_replace(
            base_config,
            use_fg_head=fg,
            use_tumor_head=tumor,
            augment=dc_replace(base_config.augment, enabled=aug),
        )
        if progress:
            progress(f"ablation row fg={fg} tumor={tumor} aug={aug}")
        try:
            result = train_model(manifest, cfg)
            report = evaluate_model(
                result.model,
                result.test_cases,
                images=result.image_cache,
                iou_threshold=cfg.iou_threshold,
                score_threshold=cfg.score_threshold,
                nms_threshold=cfg.nms_threshold,
                max_detections=cfg.max_detections,
                f1_score_threshold=result.f1_threshold,
                fg_head=fg, tumor_head=tumor, augmentation=aug,
            )
        except TrainingDiverged:
            report = EvalReport.failed(fg, tumor, aug)
        reports.append(report)
    return reports
