"""Dense anchor grids over the pyramid levels.

Every feature cell gets 9 anchors (3 aspect ratios x 3 scales) centred on
the cell's footprint in the input image. Ordering, which the model heads
must follow, is level -> row -> column -> ratio -> scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

DEFAULT_RATIOS = (0.5, 1.0, 2.0)
DEFAULT_SCALES = (1.0, 2.0 ** (1.0 / 3.0), 2.0 ** (2.0 / 3.0))


@dataclass(frozen=True)
class AnchorConfig:
    """``levels`` holds ``(stride, base_size)`` pairs; ratios are height/width."""

    levels: tuple[tuple[int, float], ...] = ((8, 32.0), (16, 64.0), (32, 128.0))
    ratios: tuple[float, ...] = DEFAULT_RATIOS
    scales: tuple[float, ...] = DEFAULT_SCALES

    def __post_init__(self):
        strides = [s for s, _ in self.levels]
        if not strides or any(b >= a for a, b in zip(strides[1:], strides)):
            raise ValueError(f"strides must be strictly increasing, got {strides}")
        if len(self.ratios) != 3 or len(self.scales) != 3:
            raise ValueError("exactly 3 ratios and 3 scales are required")
        if min(self.ratios) <= 0 or min(self.scales) <= 0 or min(b for _, b in self.levels) <= 0:
            raise ValueError("ratios, scales and base sizes must be positive")

    @property
    def num_per_cell(self) -> int:
        return len(self.ratios) * len(self.scales)

    @property
    def strides(self) -> tuple[int, ...]:
        return tuple(s for s, _ in self.levels)

    @classmethod
    def from_strides(cls, strides=(8, 16, 32), base_multiplier: float = 4.0, **kw) -> "AnchorConfig":
        return cls(levels=tuple((int(s), float(base_multiplier * s)) for s in strides), **kw)

    def to_dict(self) -> dict:
        return {"levels": [list(lv) for lv in self.levels], "ratios": list(self.ratios), "scales": list(self.scales)}

    @classmethod
    def from_dict(cls, d: dict) -> "AnchorConfig":
        return cls(
            levels=tuple((int(s), float(b)) for s, b in d["levels"]),
            ratios=tuple(float(r) for r in d["ratios"]),
            scales=tuple(float(s) for s in d["scales"]),
        )


@dataclass
class AnchorSet:
    """Anchors of all levels, concatenated, plus per-level bookkeeping."""

    extents: list[tuple[int, int]]
    boxes: np.ndarray
    valid: np.ndarray
    level_slices: list[slice] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def centers(self) -> np.ndarray:
        return np.stack([(self.boxes[:, 0] + self.boxes[:, 2]) / 2.0, (self.boxes[:, 1] + self.boxes[:, 3]) / 2.0], axis=1)


def cell_shapes(cfg: AnchorConfig) -> np.ndarray:
    """(9, 2) array of anchor (width, height), ratio-major."""
    return np.array([(s / np.sqrt(r), s * np.sqrt(r)) for r in cfg.ratios for s in cfg.scales])


def generate_pyramid(cfg: AnchorConfig, image_w: int, image_h: int) -> AnchorSet:
    for stride in cfg.strides:
        if image_w % stride or image_h % stride:
            raise ValueError(f"image {image_w}x{image_h} is not divisible by stride {stride}")
    shapes = cell_shapes(cfg)
    extents, chunks, slices = [], [], []
    start = 0
    for stride, base in cfg.levels:
        fh, fw = image_h // stride, image_w // stride
        cy, cx = np.meshgrid((np.arange(fh) + 0.5) * stride, (np.arange(fw) + 0.5) * stride, indexing="ij")
        centers = np.stack([cx.reshape(-1), cy.reshape(-1)], axis=1)
        half = shapes * base / 2.0
        lo = centers[:, None, :] - half[None, :, :]
        hi = centers[:, None, :] + half[None, :, :]
        chunks.append(np.concatenate([lo, hi], axis=2).reshape(-1, 4))
        extents.append((fh, fw))
        slices.append(slice(start, start + fh * fw * len(shapes)))
        start += fh * fw * len(shapes)
    boxes = np.concatenate(chunks, axis=0)
    return AnchorSet(extents, boxes, np.ones(len(boxes), dtype=bool), slices)


def filter_valid(anchors: AnchorSet, image_w: int, image_h: int) -> AnchorSet:
    """Mark anchors whose centre falls outside ``[0, w) x [0, h)`` as invalid."""
    c = anchors.centers
    inside = (c[:, 0] >= 0) & (c[:, 0] < image_w) & (c[:, 1] >= 0) & (c[:, 1] < image_h)
    return AnchorSet(anchors.extents, anchors.boxes, anchors.valid & inside, anchors.level_slices)


@lru_cache(maxsize=16)
def _cached(cfg: AnchorConfig, image_w: int, image_h: int) -> AnchorSet:
    aset = filter_valid(generate_pyramid(cfg, image_w, image_h), image_w, image_h)
    aset.boxes.setflags(write=False)
    aset.valid.setflags(write=False)
    return aset


def anchors_for(cfg: AnchorConfig, image_w: int, image_h: int) -> AnchorSet:
    """Generated-and-filtered anchors, cached per (config, size); read-only arrays."""
    return _cached(cfg, image_w, image_h)
