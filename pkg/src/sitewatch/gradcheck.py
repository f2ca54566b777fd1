"""Finite-difference verification of the autodiff engine on random problems."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .targets import IGNORE, NEGATIVE, AnchorTargets, FocalLossParams, detection_loss
from .tensor import GradCheckReport, Tensor, finite_diff_check


def _param(rng, name, shape, scale=0.5):
    return Tensor(rng.normal(0.0, scale, shape), name, True)


def random_network(seed: int):
    """A random conv net of at most 4 conv layers and 8 channels.

    Returns ``(params, loss_fn)``; the loss is a fixed random projection of
    the output so every parameter gets an O(1) gradient.
    """
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 3))
    c = int(rng.integers(1, 4))
    size = int(rng.choice([4, 6, 8]))
    x = Tensor(rng.normal(0.0, 1.0, (n, c, size, size)))
    depth = int(rng.integers(2, 5))
    params: dict[str, Tensor] = {}
    plan = []
    cin, h = c, size
    for i in range(depth):
        cout = int(rng.integers(1, 9))
        k = int(rng.choice([1, 3]))
        stride = 2 if (h >= 4 and rng.random() < 0.25) else 1
        pad = k // 2 if rng.random() < 0.8 else 0
        ho = (h + 2 * pad - k) // stride + 1
        if ho < 1:
            pad, stride, ho = k // 2, 1, h
        params[f"l{i}.weight"] = _param(rng, f"l{i}.weight", (cout, cin, k, k), 1.0 / np.sqrt(cin * k * k))
        params[f"l{i}.bias"] = _param(rng, f"l{i}.bias", (cout,), 0.1)
        act = str(rng.choice(["relu", "sigmoid", "none"]))
        extra = "none"
        if ho >= 2 and ho % 2 == 0 and rng.random() < 0.3:
            extra = "maxpool2"
        elif ho <= 4 and rng.random() < 0.2:
            extra = "upsample_nearest2"
        residual = cout == cin and stride == 1 and ho == h and rng.random() < 0.5
        plan.append((i, stride, pad, act, extra, residual))
        cin = cout
        h = ho // 2 if extra == "maxpool2" else ho * 2 if extra == "upsample_nearest2" else ho
    head_avg = rng.random() < 0.3
    out_shape = (n, cin, 1, 1) if head_avg else (n, cin, h, h)
    proj = Tensor(rng.normal(0.0, 1.0, out_shape))

    def loss_fn(ps):
        y = x
        for i, stride, pad, act, extra, residual in plan:
            z = T.conv2d(y, ps[f"l{i}.weight"], ps[f"l{i}.bias"], stride=stride, pad=pad)
            if act != "none":
                z = T.activation(z, act)
            if residual:
                z = T.add(z, y)
            if extra != "none":
                z = T.pool_or_resample(z, extra)
            y = z
        if head_avg:
            y = T.global_avg(y)
        return T.sum_all(T.mul(y, proj))

    return params, loss_fn


def random_loss_instance(seed: int, anchors: int = 50, classes: int = 3):
    """Random logits/offsets leaves and targets for ``detection_loss``."""
    rng = np.random.default_rng(seed)
    logits = Tensor(rng.normal(0.0, 2.0, (anchors, classes)), "cls_logits", True)
    offsets = Tensor(rng.normal(0.0, 0.5, (anchors, 4)), "box_offsets", True)
    draw = rng.random(anchors)
    labels = np.where(draw < 0.2, rng.integers(0, classes, anchors), np.where(draw < 0.3, IGNORE, NEGATIVE))
    labels[0] = 0  # at least one positive
    targets = AnchorTargets(labels.astype(np.int64), rng.normal(0.0, 0.5, (anchors, 4)),
                            np.where(labels >= 0, 0, -1))
    params = FocalLossParams(alpha=float(rng.uniform(0.1, 0.9)), gamma=float(rng.choice([0.0, 1.0, 2.0, 5.0])))

    def loss_fn(ps):
        return detection_loss(ps["cls_logits"], ps["box_offsets"], targets, params)

    return {"cls_logits": logits, "box_offsets": offsets}, loss_fn


@dataclass
class SuiteResult:
    network_reports: list[GradCheckReport]
    loss_reports: list[GradCheckReport]

    @property
    def max_rel_err(self) -> float:
        return max(r.max_rel_err for r in self.network_reports + self.loss_reports)

    def to_json(self) -> dict:
        return {
            "networks": len(self.network_reports),
            "loss_instances": len(self.loss_reports),
            "max_rel_err": self.max_rel_err,
            "max_rel_err_networks": max((r.max_rel_err for r in self.network_reports), default=0.0),
            "max_rel_err_loss": max((r.max_rel_err for r in self.loss_reports), default=0.0),
            "entries_checked": sum(r.checked for r in self.network_reports + self.loss_reports),
            "entries_excluded": sum(r.excluded for r in self.network_reports + self.loss_reports),
        }


def run_suite(networks: int = 20, loss_instances: int = 10, h: float = 1e-5, seed: int = 0) -> SuiteResult:
    nets = []
    for i in range(networks):
        params, fn = random_network(seed * 1000 + i)
        nets.append(finite_diff_check(fn, params, h=h))
    losses = []
    for i in range(loss_instances):
        params, fn = random_loss_instance(seed * 1000 + i)
        losses.append(finite_diff_check(fn, params, h=h))
    return SuiteResult(nets, losses)
