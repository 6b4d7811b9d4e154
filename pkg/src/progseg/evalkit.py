"""Instance segmentation metrics: AP@[.5:.95], AP50, AP25, mPrec50, mRec50.

Predictions are matched greedily in descending confidence (ties by
prediction index). Each prediction is compared against the same-class
ground-truth instance it overlaps best; it is a true positive when that
overlap reaches the IoU threshold and the instance is still unclaimed.
Precision/recall curves are integrated with all-points interpolation.
Predictions are pooled across scenes per class, and class scores are
averaged over classes that have ground truth.
"""
from __future__ import annotations

import csv
import dataclasses
import io
import json

import numpy as np

AP_THRESHOLDS = tuple(np.round(np.arange(0.5, 0.951, 0.05), 2))


@dataclasses.dataclass
class Instance:
    mask: np.ndarray  # bool over voxels
    label: int
    confidence: float = 1.0


@dataclasses.dataclass
class EvalResult:
    ap: float
    ap50: float
    ap25: float
    mprec50: float
    mrec50: float
    per_class: dict

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_row(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["ap", "ap50", "ap25", "mprec50", "mrec50"])
        w.writerow([f"{v:.6f}" for v in (self.ap, self.ap50, self.ap25, self.mprec50, self.mrec50)])
        return buf.getvalue()


def iou(mask_a, mask_b) -> float:
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError("masks must have the same length")
    union = np.count_nonzero(a | b)
    if union == 0:
        return 0.0
    return np.count_nonzero(a & b) / union


def _as_scenes(preds, gts):
    # accept a single scene (lists of Instance) or a list of (preds, gts) scenes
    if gts is None:
        return preds
    return [(preds, gts)]


def _class_records(scenes, label, threshold):
    """Confidence-ordered TP flags for one class pooled over scenes, plus gt count."""
    records = []
    n_gt = 0
    for s, (preds, gts) in enumerate(scenes):
        g_masks = [g.mask for g in gts if g.label == label]
        n_gt += len(g_masks)
        cls_preds = [(i, p) for i, p in enumerate(preds) if p.label == label]
        order = sorted(cls_preds, key=lambda ip: (-ip[1].confidence, ip[0]))
        taken = [False] * len(g_masks)
        for i, p in order:
            tp = False
            if g_masks:
                ious = [iou(p.mask, g) for g in g_masks]
                best = int(np.argmax(ious))
                if ious[best] >= threshold and not taken[best]:
                    taken[best] = True
                    tp = True
            records.append((-p.confidence, s, i, tp))
    records.sort(key=lambda r: r[:3])
    return np.array([r[3] for r in records], dtype=bool), n_gt


def _all_points_ap(tp: np.ndarray, n_gt: int) -> float:
    if n_gt == 0 or tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    prec = ctp / np.arange(1, tp.size + 1)
    rec = ctp / n_gt
    mrec = np.concatenate([[0.0], rec, [1.0]])
    mpre = np.concatenate([[0.0], prec, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _gt_labels(scenes):
    return sorted({g.label for _, gts in scenes for g in gts})


def average_precision(preds, gts=None, iou_threshold: float | None = None) -> float:
    """AP at one IoU threshold, or averaged over 0.50:0.05:0.95 when ``iou_threshold`` is None."""
    scenes = _as_scenes(preds, gts)
    labels = _gt_labels(scenes)
    if not labels:
        return 0.0
    thresholds = AP_THRESHOLDS if iou_threshold is None else (iou_threshold,)
    per_thr = []
    for t in thresholds:
        per_thr.append(np.mean([_all_points_ap(*_class_records(scenes, c, t)) for c in labels]))
    return float(np.mean(per_thr))


def prec_rec_50(preds, gts=None) -> tuple[float, float]:
    """Class-averaged precision and recall at IoU 0.5.

    Classes with neither predictions nor ground truth are skipped; a class
    with predictions but no ground truth contributes to precision only.
    """
    scenes = _as_scenes(preds, gts)
    labels = sorted(set(_gt_labels(scenes)) | {p.label for ps, _ in scenes for p in ps})
    precs, recs = [], []
    for c in labels:
        tp, n_gt = _class_records(scenes, c, 0.5)
        n_pred = tp.size
        if n_pred == 0 and n_gt == 0:
            continue
        hits = int(tp.sum())
        precs.append(hits / n_pred if n_pred else 0.0)
        if n_gt:
            recs.append(hits / n_gt)
    return (float(np.mean(precs)) if precs else 0.0, float(np.mean(recs)) if recs else 0.0)


def evaluate(scenes) -> EvalResult:
    """Full metric set over a list of ``(predictions, ground_truths)`` scenes."""
    labels = _gt_labels(scenes)
    per_class = {}
    for c in labels:
        aps = {t: _all_points_ap(*_class_records(scenes, c, t)) for t in AP_THRESHOLDS}
        per_class[int(c)] = {
            "ap": float(np.mean(list(aps.values()))),
            "ap50": aps[0.5],
            "ap25": _all_points_ap(*_class_records(scenes, c, 0.25)),
        }
    mean = lambda key: float(np.mean([v[key] for v in per_class.values()])) if per_class else 0.0
    mprec, mrec = prec_rec_50(scenes)
    return EvalResult(mean("ap"), mean("ap50"), mean("ap25"), mprec, mrec, per_class)


def scene_ground_truth(gt_instance, gt_semantic) -> list[Instance]:
    """Ground-truth instances from per-voxel labels."""
    out = []
    for i in np.unique(gt_instance[gt_instance >= 0]):
        mask = gt_instance == i
        out.append(Instance(mask, int(gt_semantic[mask][0])))
    return out
