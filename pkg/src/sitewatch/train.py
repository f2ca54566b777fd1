"""SGD training, layer freezing for transfer learning, and random search."""
from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import tensor as T
from .anchors import anchors_for
from .boxes import Box, GroundTruth
from .data import Annotation
from .evalkit import EvalResult, mean_ap, scene_confusion
from .model import Model, ModelConfig, build_model, predict_batch
from .targets import AnchorTargets, FocalLossParams, detection_loss, match_anchors, softmax_cross_entropy

log = logging.getLogger(__name__)

Dataset = Sequence[tuple[np.ndarray, Annotation]]


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    momentum: float = 0.9
    epochs: int = 12
    batch_size: int = 8
    alpha: float = 0.25
    gamma: float = 2.0
    pos_thr: float = 0.5
    neg_thr: float = 0.4
    seed: int = 0
    scene_weight: float = 1.0
    hflip: bool = True
    clip_norm: Optional[float] = 10.0
    warmup_steps: int = 100

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be >= 1")
        if self.pos_thr < self.neg_thr:
            raise ValueError("pos_thr must be >= neg_thr")

    @property
    def focal(self) -> FocalLossParams:
        return FocalLossParams(self.alpha, self.gamma)


# ---------------------------------------------------------------------------
# freezing

@dataclass(frozen=True)
class FreezePlan:
    """Selects the trainable parameters by name; everything else is frozen."""

    name: str
    predicate: Callable[[str], bool]

    def trainable(self, names) -> list[str]:
        return [n for n in names if self.predicate(n)]


def _prefixed(*prefixes: str) -> Callable[[str], bool]:
    return lambda n: n.startswith(prefixes)


FREEZE_PLANS = {
    "all": FreezePlan("all", lambda n: True),
    # small dataset: only the last layer of each head is re-learned
    "head-only": FreezePlan("head-only", _prefixed("cls_subnet.final.", "reg_subnet.final.", "scene_head.")),
    # larger dataset: the last few layers (subnets and pyramid)
    "head+fpn": FreezePlan("head+fpn", _prefixed("cls_subnet.", "reg_subnet.", "scene_head.", "fpn.")),
}


def apply_freeze(m: Model, plan: FreezePlan, seed: Optional[int] = None, reinit: bool = True) -> Model:
    """Mark ``plan``'s parameters trainable (re-initialised from ``seed``) and freeze the rest."""
    chosen = set(plan.trainable(m.params))
    if not chosen:
        raise ValueError(f"freeze plan {plan.name!r} selects no parameters")
    for name, p in m.params.items():
        p.requires_grad = name in chosen
        if name in chosen and reinit and plan.name != "all":
            m.reinit(name, m.seed if seed is None else seed)
    return m


def trainable_names(m: Model) -> list[str]:
    return [n for n, p in m.params.items() if p.requires_grad]


# ---------------------------------------------------------------------------
# optimizer

def sgd_step(m: Model, grads: Mapping[str, T.Tensor], cfg: TrainConfig, velocity: dict,
             lr: Optional[float] = None) -> tuple[Model, dict]:
    """Momentum SGD: ``v = momentum*v - lr*g; p = p + v`` on trainable parameters only."""
    lr = cfg.learning_rate if lr is None else lr
    for name, p in m.params.items():
        if not p.requires_grad:
            continue
        if name not in grads:
            raise KeyError(f"no gradient for trainable parameter {name!r}")
        v = velocity.get(name)
        g = grads[name].data
        v = -lr * g if v is None else cfg.momentum * v - lr * g
        velocity[name] = v
        p.data = p.data + v
    return m, velocity


def _clip(grads: dict[str, T.Tensor], max_norm: Optional[float]) -> float:
    total = math.sqrt(sum(float(np.vdot(g.data, g.data)) for g in grads.values()))
    if max_norm is not None and total > max_norm:
        scale = max_norm / total
        for k, g in grads.items():
            grads[k] = T.Tensor(g.data * scale)
    return total


# ---------------------------------------------------------------------------
# training

@dataclass
class PreparedSet:
    images: np.ndarray
    targets: list[AnchorTargets]
    scene: np.ndarray
    names: list[str]
    flipped_targets: Optional[list[AnchorTargets]] = None


def _flip_annotation_gts(gts, width: int):
    return [GroundTruth(Box(width - g.box.x2, g.box.y1, width - g.box.x1, g.box.y2), g.class_id) for g in gts]


def prepare(m: Model, data: Dataset, cfg: TrainConfig, with_flips: bool = False) -> PreparedSet:
    size = m.cfg.input_size
    aset = anchors_for(m.cfg.anchor_cfg, size, size)
    images = np.stack([img for img, _ in data])
    targets, flipped = [], []
    for _, ann in data:
        gts = ann.ground_truths(m.cfg.class_names)
        targets.append(match_anchors(aset, gts, cfg.pos_thr, cfg.neg_thr))
        if with_flips:
            flipped.append(match_anchors(aset, _flip_annotation_gts(gts, size), cfg.pos_thr, cfg.neg_thr))
    scene_index = {s: i for i, s in enumerate(m.cfg.scene_names)}
    scene = np.array([scene_index.get(ann.scene_label, 0) for _, ann in data], dtype=np.int64)
    return PreparedSet(images, targets, scene, [ann.image for _, ann in data], flipped if with_flips else None)


def batch_loss(m: Model, images: np.ndarray, targets, scene: np.ndarray, cfg: TrainConfig) -> T.Tensor:
    out = m.heads(images)
    parts = []
    if out.cls_logits is not None:
        parts.append(detection_loss(out.cls_logits, out.box_offsets, targets, cfg.focal))
    if out.scene_logits is not None:
        ce = softmax_cross_entropy(out.scene_logits, scene)
        if cfg.scene_weight != 1.0:
            ce = T.mul(ce, T.Tensor([cfg.scene_weight]))
        parts.append(ce)
    loss = parts[0]
    for p in parts[1:]:
        loss = T.add(loss, p)
    return loss


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_map: Optional[float]
    seconds: float
    scene_accuracy: Optional[float] = None

    def to_json(self) -> dict:
        d = {"epoch": self.epoch, "train_loss": self.train_loss, "val_map": self.val_map, "seconds": self.seconds}
        if self.scene_accuracy is not None:
            d["scene_accuracy"] = self.scene_accuracy
        return d


def evaluate(m: Model, data: Dataset, score_thr: float = 0.05, nms_thr: float = 0.5, iou_thr: float = 0.5):
    """mAP (and scene accuracy when the scene head exists) over ``data``."""
    images = np.stack([img for img, _ in data])
    dets, scenes = predict_batch(m, images, score_thr=score_thr, nms_thr=nms_thr)
    result = None
    if m.cfg.has_detection:
        gts = [ann.ground_truths(m.cfg.class_names) for _, ann in data]
        result = mean_ap(dets, gts, iou_thr, m.cfg.class_names)
    if m.cfg.has_scene:
        index = {s: i for i, s in enumerate(m.cfg.scene_names)}
        preds = [int(np.argmax(s)) for s in scenes]
        truths = [index[ann.scene_label] for _, ann in data]
        acc, counts = scene_confusion(preds, truths, len(m.cfg.scene_names))
        if result is None:
            result = EvalResult([], 0.0, iou_thr)
        result.scene_accuracy, result.confusion = acc, counts
    return result


def train_detector(
    m: Model,
    dataset: Dataset,
    cfg: TrainConfig,
    val: Optional[Dataset] = None,
    log_path=None,
    max_steps: Optional[int] = None,
    on_epoch: Optional[Callable[[EpochLog], None]] = None,
) -> tuple[Model, list[EpochLog]]:
    """Train in place; deterministic for a fixed (seed, dataset, config).

    Raises :class:`TrainingError` naming the batch if a loss is non-finite.
    """
    if not dataset:
        raise ValueError("empty training set")
    prep = prepare(m, dataset, cfg, with_flips=cfg.hflip)
    n = len(prep.targets)
    velocity: dict = {}
    logs: list[EpochLog] = []
    step = 0
    sink = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            rng = np.random.default_rng([cfg.seed, epoch])
            order = rng.permutation(n)
            flips = rng.random(n) < 0.5 if cfg.hflip else np.zeros(n, dtype=bool)
            losses = []
            for b, start in enumerate(range(0, n, cfg.batch_size)):
                idx = order[start:start + cfg.batch_size]
                imgs = prep.images[idx].copy()
                tg = []
                for j, i in enumerate(idx):
                    if flips[i]:
                        imgs[j] = imgs[j][:, :, ::-1]
                        tg.append(prep.flipped_targets[i])
                    else:
                        tg.append(prep.targets[i])
                with T.GradientTape() as tape:
                    loss = batch_loss(m, imgs, tg, prep.scene[idx], cfg)
                value = loss.item()
                if not math.isfinite(value):
                    names = [prep.names[i] for i in idx]
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b} (images {names})")
                grads = T.backward(tape, loss, [p for p in m.params.values() if p.requires_grad])
                _clip(grads, cfg.clip_norm)
                lr = cfg.learning_rate * min(1.0, (step + 1) / cfg.warmup_steps) if cfg.warmup_steps else None
                sgd_step(m, grads, cfg, velocity, lr=lr)
                losses.append(value)
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            val_map = scene_acc = None
            if val:
                res = evaluate(m, val)
                val_map = res.map if m.cfg.has_detection else None
                scene_acc = res.scene_accuracy
            entry = EpochLog(epoch, float(np.mean(losses)), val_map, round(time.perf_counter() - t0, 3), scene_acc)
            logs.append(entry)
            log.info("epoch %d loss %.4f val_map %s", epoch, entry.train_loss, val_map)
            if sink:
                sink.write(json.dumps(entry.to_json()) + "\n")
                sink.flush()
            if on_epoch:
                on_epoch(entry)
            if max_steps is not None and step >= max_steps:
                break
    finally:
        if sink:
            sink.close()
    return m, logs


# ---------------------------------------------------------------------------
# random hyper-parameter search

@dataclass(frozen=True)
class SearchSpace:
    lr: tuple[float, float] = (1e-3, 3e-2)
    gammas: tuple[float, ...] = (0.0, 1.0, 2.0, 5.0)
    alpha: tuple[float, float] = (0.1, 0.9)
    pos_thr: tuple[float, float] = (0.4, 0.6)
    neg_thr: tuple[float, float] = (0.3, 0.5)

    def sample(self, rng: np.random.Generator) -> dict:
        lr = float(math.exp(rng.uniform(math.log(self.lr[0]), math.log(self.lr[1]))))
        gamma = float(self.gammas[int(rng.integers(len(self.gammas)))])
        alpha = float(rng.uniform(*self.alpha))
        pos = float(rng.uniform(*self.pos_thr))
        neg = float(min(rng.uniform(*self.neg_thr), pos))
        return {"lr": lr, "gamma": gamma, "alpha": alpha, "pos_thr": pos, "neg_thr": neg}


@dataclass
class TrialResult:
    trial: int
    lr: float
    gamma: float
    alpha: float
    pos_thr: float
    neg_thr: float
    val_map: float
    error: Optional[str] = None

    def to_json(self) -> dict:
        d = asdict(self)
        if d["error"] is None:
            del d["error"]
        return d


def _run_trial(args) -> TrialResult:
    trial, params, model_cfg, base, budget_epochs, train_set, val_set, seed = args
    cfg = replace(base, learning_rate=params["lr"], gamma=params["gamma"], alpha=params["alpha"],
                  pos_thr=params["pos_thr"], neg_thr=params["neg_thr"], epochs=budget_epochs, seed=seed + trial)
    m = build_model(model_cfg, seed + trial)
    try:
        train_detector(m, train_set, cfg)
        score = evaluate(m, val_set).map
        err = None
    except TrainingError as exc:
        score, err = 0.0, str(exc)
    return TrialResult(trial, val_map=float(score), error=err, **params)


def random_hpo(
    train_set: Dataset,
    val_set: Dataset,
    model_cfg: ModelConfig,
    trials: int,
    budget_epochs: int,
    seed: int = 0,
    space: SearchSpace = SearchSpace(),
    base: TrainConfig = TrainConfig(),
    workers: int = 1,
    report_path=None,
) -> list[TrialResult]:
    """Sample ``trials`` configurations, train each briefly, rank by validation mAP."""
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    jobs = [(t, space.sample(rng), model_cfg, base, budget_epochs, train_set, val_set, seed) for t in range(trials)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_run_trial, jobs))
    else:
        results = [_run_trial(j) for j in jobs]
    ranked = sorted(results, key=lambda r: (-r.val_map, r.trial))
    if report_path:
        with open(report_path, "w", encoding="utf-8") as fh:
            for r in ranked:
                fh.write(json.dumps(r.to_json()) + "\n")
    return ranked
