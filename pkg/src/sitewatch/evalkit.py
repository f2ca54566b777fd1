"""Detection and scene-classification quality metrics.

AP is the all-point area under the precision envelope: every true positive
adds ``1/total_gt`` of recall at the best precision reached at that recall
or beyond.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .boxes import Detection, GroundTruth, iou


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth], iou_thr: float = 0.5) -> list[bool]:
    """TP/FP flag per detection, detections taken in the given (score) order."""
    taken = [False] * len(gts)
    flags = []
    for d in dets:
        best, best_iou = -1, iou_thr
        for g, gt in enumerate(gts):
            if taken[g] or gt.class_id != d.class_id:
                continue
            ov = iou(d.box, gt.box)
            if ov >= best_iou and (best < 0 or ov > best_iou):
                best, best_iou = g, ov
        if best >= 0:
            taken[best] = True
        flags.append(best >= 0)
    return flags


def precision_recall(flags: Sequence[bool], total_gt: int) -> list[tuple[float, float]]:
    out = []
    tp = 0
    for k, f in enumerate(flags, start=1):
        tp += bool(f)
        out.append((tp / total_gt if total_gt else 0.0, tp / k))
    return out


def average_precision(flags: Sequence[bool], total_gt: int) -> float:
    """All-point AP; defined as 0 when there is no ground truth."""
    if total_gt <= 0 or not flags:
        return 0.0
    prec = [p for _, p in precision_recall(flags, total_gt)]
    envelope = list(np.maximum.accumulate(prec[::-1])[::-1])
    total = 0.0
    for f, p in zip(flags, envelope):
        if f:
            total += p
    return total / total_gt


@dataclass
class ClassResult:
    name: str
    ap: float
    gt_count: int
    curve: list[tuple[float, float]] = field(default_factory=list)


@dataclass
class EvalResult:
    per_class: list[ClassResult]
    map: float
    iou_thr: float
    no_gt_classes: list[str] = field(default_factory=list)
    scene_accuracy: Optional[float] = None
    confusion: Optional[list[list[int]]] = None

    def to_json(self) -> dict:
        d = {
            "per_class": [{"name": c.name, "ap": c.ap, "gt_count": c.gt_count} for c in self.per_class],
            "map": self.map,
            "iou_thr": self.iou_thr,
        }
        if self.no_gt_classes:
            d["no_gt_classes"] = list(self.no_gt_classes)
        if self.scene_accuracy is not None:
            d["scene_accuracy"] = self.scene_accuracy
            d["confusion"] = self.confusion
        return d


def _det_key(item):
    img, d = item
    return (-d.score, d.class_id, d.box.x1, d.box.y1, img)


def mean_ap(
    dets: Sequence[Sequence[Detection]],
    gts: Sequence[Sequence[GroundTruth]],
    iou_thr: float = 0.5,
    class_names: Optional[Sequence[str]] = None,
) -> EvalResult:
    """Per-class AP and their mean over classes that have ground truth.

    ``dets[i]`` and ``gts[i]`` belong to image ``i``.
    """
    if len(dets) != len(gts):
        raise ValueError(f"{len(dets)} detection lists for {len(gts)} images")
    if class_names is None:
        k = 1 + max([d.class_id for ds in dets for d in ds] + [g.class_id for gs in gts for g in gs], default=-1)
        class_names = [str(i) for i in range(k)]
    results, no_gt = [], []
    for c, name in enumerate(class_names):
        scored_flags = []
        total = 0
        for img, (ds, gs) in enumerate(zip(dets, gts)):
            mine = sorted(((img, d) for d in ds if d.class_id == c), key=_det_key)
            cands = [g for g in gs if g.class_id == c]
            total += len(cands)
            hits = match_detections([d for _, d in mine], cands, iou_thr)
            scored_flags.extend((_det_key(item), f) for item, f in zip(mine, hits))
        scored_flags.sort(key=lambda kf: kf[0])
        flags = [f for _, f in scored_flags]
        if total == 0:
            no_gt.append(name)
        results.append(ClassResult(name, average_precision(flags, total), total, precision_recall(flags, total)))
    scored = [r.ap for r in results if r.gt_count > 0]
    m = float(sum(scored) / len(scored)) if scored else 0.0
    return EvalResult(results, m, iou_thr, no_gt)


def scene_confusion(preds: Sequence[int], truths: Sequence[int], k: int) -> tuple[float, list[list[int]]]:
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions for {len(truths)} labels")
    counts = [[0] * k for _ in range(k)]
    for p, t in zip(preds, truths):
        counts[t][p] += 1
    total = len(truths)
    acc = sum(counts[i][i] for i in range(k)) / total if total else 0.0
    return acc, counts
