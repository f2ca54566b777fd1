"""Axis-aligned box geometry: IoU, anchor offset coding, clipping and NMS.

Boxes are stored as corners ``(x1, y1, x2, y2)`` in pixels. The scalar
helpers operate on :class:`Box`; the ``*_array`` variants are the vectorized
forms used on dense anchor sets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise ValueError(f"degenerate box {self.as_list()}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)


class BoxOffsets(NamedTuple):
    """Anchor-relative regression target: center shift in anchor units, log size ratio."""

    tx: float
    ty: float
    tw: float
    th: float


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    score: float

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score {self.score} outside [0, 1]")
        if self.class_id < 0:
            raise ValueError(f"negative class id {self.class_id}")


@dataclass(frozen=True)
class GroundTruth:
    box: Box
    class_id: int


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area + b.area - inter)


def encode_offsets(gt: Box, anchor: Box) -> BoxOffsets:
    ax, ay = anchor.center
    gx, gy = gt.center
    aw, ah = anchor.width, anchor.height
    return BoxOffsets((gx - ax) / aw, (gy - ay) / ah, math.log(gt.width / aw), math.log(gt.height / ah))


def decode_offsets(off: BoxOffsets, anchor: Box) -> Box:
    ax, ay = anchor.center
    aw, ah = anchor.width, anchor.height
    return Box.from_center(ax + off.tx * aw, ay + off.ty * ah, aw * math.exp(off.tw), ah * math.exp(off.th))


def clip_to_image(b: Box, width: float, height: float) -> Optional[Box]:
    """Intersect with the frame; ``None`` when nothing of positive area is left."""
    x1, y1 = max(b.x1, 0.0), max(b.y1, 0.0)
    x2, y2 = min(b.x2, float(width)), min(b.y2, float(height))
    if x1 >= x2 or y1 >= y2:
        return None
    return Box(x1, y1, x2, y2)


def detection_sort_key(d: Detection) -> tuple:
    return (-d.score, d.class_id, d.box.x1, d.box.y1)


def nms(dets: Iterable[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-class suppression; a box is dropped when IoU > threshold."""
    remaining = sorted(dets, key=detection_sort_key)
    if not remaining:
        return []
    coords = np.array([d.box.as_list() for d in remaining])
    classes = np.array([d.class_id for d in remaining])
    alive = np.ones(len(remaining), dtype=bool)
    kept = []
    for i in range(len(remaining)):
        if not alive[i]:
            continue
        kept.append(remaining[i])
        rest = alive & (classes == classes[i])
        rest[: i + 1] = False
        if rest.any():
            ov = iou_array(coords[i:i + 1], coords[rest])[0]
            alive[np.flatnonzero(rest)[ov > iou_threshold]] = False
    return kept


# ---------------------------------------------------------------------------
# vectorized forms, boxes as (n, 4) float arrays

def iou_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU matrix of shape (len(a), len(b))."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    return inter / (area_a[:, None] + area_b[None, :] - inter)


def encode_array(gt: np.ndarray, anchors: np.ndarray) -> np.ndarray:
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    ax, ay = (anchors[:, 0] + anchors[:, 2]) / 2.0, (anchors[:, 1] + anchors[:, 3]) / 2.0
    gw, gh = gt[:, 2] - gt[:, 0], gt[:, 3] - gt[:, 1]
    gx, gy = (gt[:, 0] + gt[:, 2]) / 2.0, (gt[:, 1] + gt[:, 3]) / 2.0
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=1)


def decode_array(off: np.ndarray, anchors: np.ndarray, max_log_ratio: float = math.log(1000.0 / 16)) -> np.ndarray:
    aw, ah = anchors[:, 2] - anchors[:, 0], anchors[:, 3] - anchors[:, 1]
    ax, ay = (anchors[:, 0] + anchors[:, 2]) / 2.0, (anchors[:, 1] + anchors[:, 3]) / 2.0
    cx, cy = ax + off[:, 0] * aw, ay + off[:, 1] * ah
    # cap exp() so untrained heads cannot produce overflowing sizes
    w = aw * np.exp(np.minimum(off[:, 2], max_log_ratio))
    h = ah * np.exp(np.minimum(off[:, 3], max_log_ratio))
    return np.stack([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0], axis=1)


def boxes_from(items: Sequence[Box]) -> np.ndarray:
    if not items:
        return np.zeros((0, 4))
    return np.array([b.as_list() for b in items], dtype=np.float64)
