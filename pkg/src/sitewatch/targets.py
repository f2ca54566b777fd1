"""Anchor matching, training targets and the losses.

Classification uses the alpha-balanced focal loss over one-vs-all sigmoid
outputs; regression uses a plain L1 loss on anchor offsets. Whole-image
scene classification uses softmax cross-entropy.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

from .anchors import AnchorSet
from .boxes import BoxOffsets, GroundTruth, encode_array, iou_array
from .tensor import ShapeError, Tensor, custom_op, stable_sigmoid


NEGATIVE = -1
IGNORE = -2
PROB_EPS = 1e-7


@dataclass(frozen=True)
class FocalLossParams:
    alpha: float = 0.25
    gamma: float = 2.0

    def __post_init__(self):
        # alpha = 1 is allowed: it is the plain (unbalanced) focal loss
        if not 0.0 < self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in (0, 1], got {self.alpha}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")


@dataclass
class AnchorTargets:
    """Per-anchor labels (class id, NEGATIVE or IGNORE) and regression targets.

    ``offsets`` rows are only meaningful where ``labels >= 0``; ``matched``
    holds the ground-truth index for positives and -1 elsewhere.
    """

    labels: np.ndarray
    offsets: np.ndarray
    matched: np.ndarray

    @property
    def num_positive(self) -> int:
        return int((self.labels >= 0).sum())

    def permuted(self, order: np.ndarray) -> "AnchorTargets":
        return AnchorTargets(self.labels[order], self.offsets[order], self.matched[order])


def match_anchors(anchors: AnchorSet, gts: Sequence[GroundTruth], pos_thr: float = 0.5, neg_thr: float = 0.4) -> AnchorTargets:
    if pos_thr < neg_thr:
        raise ValueError(f"pos_thr {pos_thr} must be >= neg_thr {neg_thr}")
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int64)
    offsets = np.zeros((n, 4))
    matched = np.full(n, -1, dtype=np.int64)
    valid = anchors.valid
    if gts:
        gt_boxes = np.array([g.box.as_list() for g in gts])
        gt_cls = np.array([g.class_id for g in gts], dtype=np.int64)
        ov = iou_array(anchors.boxes, gt_boxes)
        ov[~valid] = -1.0
        best_gt = ov.argmax(axis=1)
        best = ov[np.arange(n), best_gt]
        labels[(best >= neg_thr) & (best < pos_thr)] = IGNORE
        pos = best >= pos_thr
        matched[pos] = best_gt[pos]
        # every object keeps at least its best-overlapping anchor
        for g in range(len(gts)):
            a = int(ov[:, g].argmax())
            if ov[a, g] > 0:
                matched[a] = g
                pos[a] = True
        labels[pos] = gt_cls[matched[pos]]
        idx = np.flatnonzero(pos)
        if idx.size:
            offsets[idx] = encode_array(gt_boxes[matched[idx]], anchors.boxes[idx])
    labels[~valid] = IGNORE
    return AnchorTargets(labels, offsets, matched)


# ---------------------------------------------------------------------------
# scalar losses

def focal_loss(p, y, params: FocalLossParams):
    """Alpha-balanced focal loss; ``p`` is clamped to [1e-7, 1-1e-7] first.

    Works elementwise on scalars or numpy arrays.
    """
    p = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    a, g = params.alpha, params.gamma
    out = np.where(
        np.asarray(y) == 1,
        -a * (1.0 - p) ** g * np.log(p),
        -(1.0 - a) * p ** g * np.log(1.0 - p),
    )
    return float(out) if out.ndim == 0 else out


def l1_loss(pred: BoxOffsets, target: BoxOffsets) -> float:
    return float(sum(abs(a - b) for a, b in zip(pred, target)))


def cross_entropy(logits, true_class: int) -> float:
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64).reshape(-1)
    if z.size < 2:
        raise ValueError("cross_entropy needs at least 2 classes")
    if not 0 <= true_class < z.size:
        raise ValueError(f"class {true_class} out of range for {z.size} logits")
    zmax = z.max()
    return float(zmax + math.log(np.exp(z - zmax).sum()) - z[true_class])


# ---------------------------------------------------------------------------
# differentiable losses

def _focal_from_logits(z: np.ndarray, onehot: np.ndarray, weight: np.ndarray, params: FocalLossParams):
    """Weighted focal loss sum and its gradient w.r.t. the logits."""
    p = stable_sigmoid(z)
    inside = (p > PROB_EPS) & (p < 1.0 - PROB_EPS)
    pc = np.clip(p, PROB_EPS, 1.0 - PROB_EPS)
    a, g = params.alpha, params.gamma
    one_m = 1.0 - pc
    pos_term = -a * one_m ** g * np.log(pc)
    neg_term = -(1.0 - a) * pc ** g * np.log(one_m)
    loss = np.where(onehot, pos_term, neg_term) * weight
    # d/dz of each branch, already multiplied through by dp/dz = p(1-p)
    dpos = a * one_m ** g * (g * pc * np.log(pc) - one_m)
    dneg = -(1.0 - a) * pc ** g * (g * one_m * np.log(one_m) - pc)
    grad = np.where(onehot, dpos, dneg) * weight * inside
    return loss.sum(), grad


TargetsLike = Union[AnchorTargets, Sequence[AnchorTargets]]


def _stack_targets(targets: TargetsLike, batched: bool):
    if isinstance(targets, AnchorTargets):
        targets = [targets]
    labels = np.stack([t.labels for t in targets])
    offsets = np.stack([t.offsets for t in targets])
    return (labels, offsets) if batched else (labels[0], offsets[0])


def detection_loss(cls_logits: Tensor, reg_preds: Tensor, targets: TargetsLike, params: FocalLossParams) -> Tensor:
    """Focal + L1 loss normalised by the number of positive anchors.

    ``cls_logits`` is ``(A, K)`` or ``(N, A, K)`` pre-sigmoid scores and
    ``reg_preds`` the matching ``(..., A, 4)`` offsets; anchor order must be
    that of the targets. Ignored anchors contribute nothing. Returns a scalar
    Tensor on the active tape.
    """
    z, r = cls_logits.data, reg_preds.data
    batched = z.ndim == 3
    labels, toff = _stack_targets(targets, batched)
    k = z.shape[-1]
    if z.shape[:-1] != labels.shape or r.shape != labels.shape + (4,):
        raise ShapeError(f"detection_loss: logits {z.shape}, offsets {r.shape} vs targets {labels.shape}")

    onehot = labels[..., None] == np.arange(k)
    cls_w = (labels != IGNORE)[..., None].astype(np.float64)
    pos = (labels >= 0)[..., None]
    norm = max(1.0, float(pos.sum()))

    fl, dz = _focal_from_logits(z, onehot, cls_w, params)
    diff = r - toff
    l1 = float(np.abs(diff * pos).sum())
    dr = np.sign(diff) * pos
    value = (fl + l1) / norm

    def vjp(g):
        s = g[0] / norm
        return dz * s, dr * s

    return custom_op(np.array([value]), (cls_logits, reg_preds), vjp, "detection_loss")


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean cross-entropy over a batch of ``(N, K)`` logits."""
    z = logits.data.reshape(len(labels), -1)
    y = np.asarray(labels, dtype=np.int64)
    zs = z - z.max(axis=1, keepdims=True)
    e = np.exp(zs)
    sm = e / e.sum(axis=1, keepdims=True)
    n = len(y)
    value = float((np.log(e.sum(axis=1)) - zs[np.arange(n), y]).sum() / n)
    shape = logits.shape

    def vjp(g):
        d = sm.copy()
        d[np.arange(n), y] -= 1.0
        return ((d * (g[0] / n)).reshape(shape),)

    return custom_op(np.array([value]), (logits,), vjp, "cross_entropy")
