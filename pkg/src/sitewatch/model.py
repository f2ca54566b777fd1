"""Residual backbone, feature pyramid, twin detection subnets and scene head.

Layout of one forward pass for a 128x128 input::

    stem (conv s2, pool)        -> 32x32
    stage1 (residual, pool)     -> 16x16   C3, stride 8
    stage2                      ->  8x8    C4, stride 16
    stage3                      ->  4x4    C5, stride 32
    lateral 1x1 + top-down upsample/add + 3x3 smoothing -> P3, P4, P5
    cls/reg subnets, shared over P3..P5
    scene head: global average of C5 -> 1x1 conv
"""
from __future__ import annotations

import math
import zlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .anchors import AnchorConfig, anchors_for
from .boxes import Box, Detection, clip_to_image, decode_array, nms
from .tensor import Tensor

HEADS = ("detection", "scene_classification", "both")
# Options named for completeness; only the first of each is realized.
BACKBONES = ("resnet", "squeezenet", "densenet")
DETECTORS = ("retinanet", "yolov3", "tinyyolov3")

DEFAULT_CLASSES = ("worker", "vehicle", "excavator")
SCENE_LABELS = ("empty", "unattended_equipment", "workers_present")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    input_size: int = 128
    in_channels: int = 3
    backbone_channels: tuple[int, int, int] = (16, 32, 64)
    fpn_channels: int = 64
    subnet_hidden_layers: int = 2
    subnet_channels: int = 64
    class_names: tuple[str, ...] = DEFAULT_CLASSES
    scene_names: tuple[str, ...] = SCENE_LABELS
    anchor_cfg: AnchorConfig = field(default_factory=AnchorConfig)
    head: str = "both"
    prior_prob: float = 0.01
    backbone: str = "resnet"
    detector: str = "retinanet"

    def __post_init__(self):
        size = self.input_size
        if size < 1 or size & (size - 1):
            raise ConfigError(f"input_size must be a power of two, got {size}")
        if size % max(self.anchor_cfg.strides):
            raise ConfigError(f"input_size {size} not divisible by stride {max(self.anchor_cfg.strides)}")
        if tuple(self.anchor_cfg.strides) != (8, 16, 32):
            raise ConfigError(f"the backbone taps strides (8, 16, 32), anchors use {self.anchor_cfg.strides}")
        if len(self.backbone_channels) != 3:
            raise ConfigError("backbone_channels needs 3 stage widths")
        if self.num_classes < 1:
            raise ConfigError("at least one detection class is required")
        if self.head not in HEADS:
            raise ConfigError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.backbone != "resnet" or self.detector != "retinanet":
            raise ConfigError(f"backbone {self.backbone!r} / detector {self.detector!r} not implemented")
        if not 0 < self.prior_prob < 1:
            raise ConfigError("prior_prob must lie in (0, 1)")

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def has_detection(self) -> bool:
        return self.head in ("detection", "both")

    @property
    def has_scene(self) -> bool:
        return self.head in ("scene_classification", "both")

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "in_channels": self.in_channels,
            "backbone_channels": list(self.backbone_channels),
            "fpn_channels": self.fpn_channels,
            "subnet_hidden_layers": self.subnet_hidden_layers,
            "subnet_channels": self.subnet_channels,
            "class_names": list(self.class_names),
            "scene_names": list(self.scene_names),
            "anchor_cfg": self.anchor_cfg.to_dict(),
            "head": self.head,
            "prior_prob": self.prior_prob,
            "backbone": self.backbone,
            "detector": self.detector,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["anchor_cfg"] = AnchorConfig.from_dict(d["anchor_cfg"])
        for key in ("backbone_channels", "class_names", "scene_names"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class HeadOutputs:
    """Raw batched outputs, anchors concatenated over levels."""

    cls_logits: Optional[Tensor]  # (N, A, K)
    box_offsets: Optional[Tensor]  # (N, A, 4)
    scene_logits: Optional[Tensor]  # (N, K_scene)


def _param_rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode())])


class Model:
    """Parameters in a fixed order plus the forward passes over them.

    Each parameter is initialised from its own generator keyed on
    ``(seed, name)``, so any subset can be re-initialised reproducibly.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self._init: dict[str, tuple] = {}
        self._declare()
        for name in self.params:
            self.reinit(name, seed)

    # -- parameter declaration ------------------------------------------------

    def _conv(self, name: str, cin: int, cout: int, k: int, init: str = "he", bias: float = 0.0):
        self.params[f"{name}.weight"] = Tensor(np.zeros((cout, cin, k, k)), f"{name}.weight", True)
        self.params[f"{name}.bias"] = Tensor(np.zeros(cout), f"{name}.bias", True)
        self._init[f"{name}.weight"] = (init, cin * k * k)
        self._init[f"{name}.bias"] = ("const", bias)

    def _declare(self):
        cfg = self.cfg
        c0, c1, c2 = cfg.backbone_channels
        self._conv("backbone.stem", cfg.in_channels, c0, 3)
        prev = c0
        for i, c in enumerate(cfg.backbone_channels, start=1):
            self._conv(f"backbone.stage{i}.proj", prev, c, 3)
            self._conv(f"backbone.stage{i}.conv1", c, c, 3)
            self._conv(f"backbone.stage{i}.conv2", c, c, 3, init="he_half")
            prev = c
        if cfg.has_detection:
            f = cfg.fpn_channels
            for i, c in enumerate(cfg.backbone_channels, start=1):
                self._conv(f"fpn.lateral{i}", c, f, 1, init="lecun")
                self._conv(f"fpn.smooth{i}", f, f, 3, init="lecun")
            a = cfg.anchor_cfg.num_per_cell
            prior_bias = -math.log((1 - cfg.prior_prob) / cfg.prior_prob)
            for head, outputs, bias, init in (("cls_subnet", a * cfg.num_classes, prior_bias, "prior"),
                                              ("reg_subnet", a * 4, 0.0, "small")):
                cin = f
                for j in range(1, cfg.subnet_hidden_layers + 1):
                    self._conv(f"{head}.conv{j}", cin, cfg.subnet_channels, 3)
                    cin = cfg.subnet_channels
                self._conv(f"{head}.final", cin, outputs, 3, init=init, bias=bias)
        if cfg.has_scene:
            self._conv("scene_head", c2, len(cfg.scene_names), 1, init="zero")

    def reinit(self, name: str, seed: int) -> None:
        kind, arg = self._init[name]
        p = self.params[name]
        rng = _param_rng(seed, name)
        if kind == "const":
            p.data = np.full(p.shape, float(arg))
        elif kind == "zero":
            p.data = np.zeros(p.shape)
        elif kind == "small":
            p.data = rng.normal(0.0, 0.01, p.shape)
        elif kind == "prior":
            # narrow enough that every initial probability stays near prior_prob
            p.data = rng.normal(0.0, 0.003, p.shape)
        else:
            std = {"he": math.sqrt(2.0 / arg), "he_half": 0.5 * math.sqrt(2.0 / arg), "lecun": math.sqrt(1.0 / arg)}[kind]
            p.data = rng.normal(0.0, std, p.shape)

    def layer_names(self) -> list[str]:
        return list(OrderedDict.fromkeys(n.rsplit(".", 1)[0] for n in self.params))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, p.data.copy()) for k, p in self.params.items())

    # -- forward -----------------------------------------------------------------

    def _apply(self, name: str, x: Tensor, stride: int = 1, relu: bool = False) -> Tensor:
        w = self.params[f"{name}.weight"]
        y = T.conv2d(x, w, self.params[f"{name}.bias"], stride=stride, pad=w.shape[-1] // 2)
        return T.relu(y) if relu else y

    def backbone(self, x: Tensor) -> list[Tensor]:
        x = T.maxpool2(self._apply("backbone.stem", x, stride=2, relu=True))
        taps = []
        for i in range(1, 4):
            h = self._apply(f"backbone.stage{i}.proj", x, relu=True)
            r = self._apply(f"backbone.stage{i}.conv2", self._apply(f"backbone.stage{i}.conv1", h, relu=True))
            x = T.maxpool2(T.relu(T.add(h, r)))
            taps.append(x)
        return taps

    def pyramid(self, taps: Sequence[Tensor]) -> list[Tensor]:
        lat = [self._apply(f"fpn.lateral{i}", c) for i, c in enumerate(taps, start=1)]
        merged = [lat[-1]]
        for l in reversed(lat[:-1]):
            merged.insert(0, T.add(l, T.upsample_nearest2(merged[0])))
        return [self._apply(f"fpn.smooth{i}", m) for i, m in enumerate(merged, start=1)]

    def _subnet(self, head: str, p: Tensor, per_anchor: int) -> Tensor:
        x = p
        for j in range(1, self.cfg.subnet_hidden_layers + 1):
            x = self._apply(f"{head}.conv{j}", x, relu=True)
        x = self._apply(f"{head}.final", x)
        n, _, fh, fw = x.shape
        a = self.cfg.anchor_cfg.num_per_cell
        # channel a*per + k -> rows ordered (y, x, anchor)
        x = T.reshape(x, (n, a, per_anchor, fh, fw))
        x = T.transpose(x, (0, 3, 4, 1, 2))
        return T.reshape(x, (n, fh * fw * a, per_anchor))

    def heads(self, images) -> HeadOutputs:
        x = _as_batch(images, self.cfg)
        taps = self.backbone(x)
        cls = reg = scene = None
        if self.cfg.has_detection:
            levels = self.pyramid(taps)
            k = self.cfg.num_classes
            cls = T.concat([self._subnet("cls_subnet", p, k) for p in levels], axis=1)
            reg = T.concat([self._subnet("reg_subnet", p, 4) for p in levels], axis=1)
        if self.cfg.has_scene:
            pooled = T.global_avg(taps[-1])
            s = self._apply("scene_head", pooled)
            scene = T.reshape(s, (s.shape[0], s.shape[1]))
        return HeadOutputs(cls, reg, scene)

    def level_slices(self):
        size = self.cfg.input_size
        return anchors_for(self.cfg.anchor_cfg, size, size).level_slices


class ShapeMismatch(ValueError):
    pass


def _as_batch(images, cfg: ModelConfig) -> Tensor:
    x = images if isinstance(images, Tensor) else Tensor(images)
    if x.data.ndim == 3:
        x = Tensor(x.data[None])
    if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
        raise ShapeMismatch(
            f"expected N x {cfg.in_channels} x {cfg.input_size} x {cfg.input_size} input, got {x.shape}"
        )
    return x


def build_model(cfg: ModelConfig, seed: int = 0) -> Model:
    return Model(cfg, seed)


def forward_detect(m: Model, image) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-level ``(probs (A_l, K), offsets (A_l, 4))`` for a single image."""
    if not m.cfg.has_detection:
        raise ConfigError("model was built without a detection head")
    out = m.heads(image)
    if out.cls_logits.shape[0] != 1:
        raise ShapeMismatch("forward_detect takes a single image")
    probs = T.sigmoid(out.cls_logits).data[0]
    offs = out.box_offsets.data[0]
    return [(probs[s], offs[s]) for s in m.level_slices()]


def forward_scene(m: Model, image) -> np.ndarray:
    if not m.cfg.has_scene:
        raise ConfigError("model was built without a scene-classification head")
    return m.heads(image).scene_logits.data[0]


def postprocess(
    m: Model, probs: np.ndarray, offsets: np.ndarray, score_thr: float, nms_thr: float, max_dets: int,
    pre_nms_topk: int = 1000,
) -> list[Detection]:
    """Turn one image's dense ``(A, K)`` probabilities and offsets into detections."""
    size = m.cfg.input_size
    aset = anchors_for(m.cfg.anchor_cfg, size, size)
    probs = np.clip(probs, 1e-7, 1.0 - 1e-7)
    probs = np.where(aset.valid[:, None], probs, 0.0)
    a_idx, k_idx = np.nonzero(probs >= score_thr)
    if a_idx.size == 0:
        return []
    scores = probs[a_idx, k_idx]
    if scores.size > pre_nms_topk:
        keep = np.argsort(-scores, kind="stable")[:pre_nms_topk]
        a_idx, k_idx, scores = a_idx[keep], k_idx[keep], scores[keep]
    decoded = decode_array(offsets[a_idx], aset.boxes[a_idx])
    dets = []
    for (x1, y1, x2, y2), k, s in zip(decoded, k_idx, scores):
        if not (x1 < x2 and y1 < y2):
            continue
        box = clip_to_image(Box(float(x1), float(y1), float(x2), float(y2)), size, size)
        if box is not None:
            dets.append(Detection(box, int(k), float(s)))
    return nms(dets, nms_thr)[:max_dets]


def predict(m: Model, image, score_thr: float = 0.3, nms_thr: float = 0.5, max_dets: int = 100) -> list[Detection]:
    if not m.cfg.has_detection:
        raise ConfigError("model was built without a detection head")
    out = m.heads(image)
    probs = T.stable_sigmoid(out.cls_logits.data[0])
    return postprocess(m, probs, out.box_offsets.data[0], score_thr, nms_thr, max_dets)


def predict_batch(m: Model, images: np.ndarray, score_thr: float = 0.05, nms_thr: float = 0.5,
                  max_dets: int = 100, batch_size: int = 16):
    """Detections and scene logits for a stack of images."""
    dets, scenes = [], []
    for start in range(0, len(images), batch_size):
        out = m.heads(np.asarray(images[start:start + batch_size]))
        if out.cls_logits is not None:
            probs = T.stable_sigmoid(out.cls_logits.data)
            for i in range(probs.shape[0]):
                dets.append(postprocess(m, probs[i], out.box_offsets.data[i], score_thr, nms_thr, max_dets))
        if out.scene_logits is not None:
            scenes.extend(out.scene_logits.data)
    return dets, scenes
