import json
import math

import numpy as np
import pytest

from sitewatch import tensor as T
from sitewatch import train as tr
from sitewatch.data import SceneSpec, generate_split
from sitewatch.model import ModelConfig, build_model, forward_detect
from sitewatch.train import (
    FREEZE_PLANS, FreezePlan, SearchSpace, TrainConfig, TrainingError, apply_freeze, random_hpo, sgd_step,
    train_detector, trainable_names,
)

SMALL_SPEC = SceneSpec(image_size=32, min_objects=1, max_objects=2)


@pytest.fixture(scope="module")
def small_set():
    return generate_split(SMALL_SPEC, 0, 6)


def snapshot(m):
    return {n: p.data.tobytes() for n, p in m.params.items()}


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"learning_rate": 0}, {"momentum": 1.0}, {"momentum": -0.1}, {"epochs": 0}, {"batch_size": 0},
        {"pos_thr": 0.3, "neg_thr": 0.4},
    ])
    def test_rejected(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)


class TestSGD:
    def one_param_model(self, tiny_cfg, value):
        m = build_model(tiny_cfg, 0)
        for p in m.params.values():
            p.requires_grad = False
        p = m.params["scene_head.bias"]
        p.requires_grad = True
        p.data = np.full(p.shape, value)
        return m, p

    def test_arithmetic(self, tiny_cfg):
        m, p = self.one_param_model(tiny_cfg, 1.0)
        sgd_step(m, {"scene_head.bias": T.Tensor(np.full(p.shape, 2.0))}, TrainConfig(momentum=0.0, learning_rate=0.1), {})
        np.testing.assert_allclose(p.data, 0.8, rtol=0, atol=1e-15)

    def test_momentum_accumulates(self, tiny_cfg):
        m, p = self.one_param_model(tiny_cfg, 0.0)
        cfg = TrainConfig(momentum=0.5, learning_rate=1.0)
        g = {"scene_head.bias": T.Tensor(np.ones(p.shape))}
        vel = {}
        sgd_step(m, g, cfg, vel)
        sgd_step(m, g, cfg, vel)
        # v1 = -1, v2 = 0.5 * -1 - 1
        np.testing.assert_array_equal(p.data, np.full(p.shape, -2.5))

    def test_zero_gradient(self, tiny_model):
        before = snapshot(tiny_model)
        grads = {n: T.Tensor(np.zeros(p.shape)) for n, p in tiny_model.params.items()}
        sgd_step(tiny_model, grads, TrainConfig(), {})
        assert snapshot(tiny_model) == before

    def test_frozen_untouched(self, tiny_cfg):
        m = build_model(tiny_cfg, 1)
        apply_freeze(m, FREEZE_PLANS["head-only"])
        before = snapshot(m)
        grads = {n: T.Tensor(np.ones(p.shape)) for n, p in m.params.items()}
        sgd_step(m, grads, TrainConfig(), {})
        after = snapshot(m)
        for n, p in m.params.items():
            assert (after[n] == before[n]) != p.requires_grad

    def test_lr_zero_identity(self, tiny_cfg, rng):
        m = build_model(tiny_cfg, 2)
        before = snapshot(m)
        grads = {n: T.Tensor(rng.normal(size=p.shape)) for n, p in m.params.items()}
        vel = {}
        for _ in range(3):
            sgd_step(m, grads, TrainConfig(momentum=0.0), vel, lr=0.0)
        assert snapshot(m) == before

    def test_missing_gradient(self, tiny_model):
        with pytest.raises(KeyError, match="no gradient"):
            sgd_step(tiny_model, {}, TrainConfig(), {})


class TestFreeze:
    def test_plans_select_expected_layers(self, tiny_cfg):
        m = build_model(tiny_cfg, 0)
        apply_freeze(m, FREEZE_PLANS["head-only"])
        assert {n.rsplit(".", 1)[0] for n in trainable_names(m)} == {"cls_subnet.final", "reg_subnet.final", "scene_head"}
        apply_freeze(m, FREEZE_PLANS["head+fpn"])
        names = trainable_names(m)
        assert any(n.startswith("fpn.") for n in names) and not any(n.startswith("backbone.") for n in names)
        apply_freeze(m, FREEZE_PLANS["all"])
        assert trainable_names(m) == list(m.params)

    def test_empty_plan_rejected(self, tiny_model):
        with pytest.raises(ValueError):
            apply_freeze(tiny_model, FreezePlan("none", lambda n: False))

    def test_reinit_restores_prior(self, default_model):
        m = build_model(default_model.cfg, 0)
        m.params["cls_subnet.final.bias"].data[:] = 3.0
        m.params["cls_subnet.final.weight"].data[:] = 0.5
        apply_freeze(m, FREEZE_PLANS["head-only"], seed=4)
        np.testing.assert_array_equal(m.params["cls_subnet.final.bias"].data, -math.log(99))
        x = np.random.default_rng(0).random((3, 128, 128))
        for probs, _ in forward_detect(m, x):
            assert np.all(np.abs(probs - 0.01) <= 0.005)

    def test_frozen_bit_identical_after_training(self, tiny_cfg, small_set):
        m = build_model(tiny_cfg, 0)
        apply_freeze(m, FREEZE_PLANS["head-only"])
        frozen = {n: p.data.tobytes() for n, p in m.params.items() if not p.requires_grad}
        train_detector(m, small_set, TrainConfig(batch_size=2, epochs=5, warmup_steps=0), max_steps=10)
        for n, raw in frozen.items():
            assert m.params[n].data.tobytes() == raw
        assert any(m.params[n].data.tobytes() != raw for n, raw in snapshot(build_model(tiny_cfg, 0)).items()
                   if n in trainable_names(m))


class TestTrain:
    def test_empty_dataset(self, tiny_model):
        with pytest.raises(ValueError):
            train_detector(tiny_model, [], TrainConfig())

    def test_deterministic(self, tiny_cfg, small_set, tmp_path):
        cfg = TrainConfig(batch_size=4, epochs=2, warmup_steps=2)
        a, la = train_detector(build_model(tiny_cfg, 0), small_set, cfg, val=small_set, log_path=tmp_path / "a")
        b, lb = train_detector(build_model(tiny_cfg, 0), small_set, cfg, val=small_set, log_path=tmp_path / "b")
        assert snapshot(a) == snapshot(b)
        assert [x.train_loss for x in la] == [x.train_loss for x in lb]
        assert [x.val_map for x in la] == [x.val_map for x in lb]

    def test_log_lines(self, tiny_cfg, small_set, tmp_path):
        path = tmp_path / "log.ndjson"
        _, logs = train_detector(build_model(tiny_cfg, 0), small_set, TrainConfig(batch_size=3, epochs=2),
                                 val=small_set, log_path=path)
        rows = [json.loads(line) for line in path.read_text().splitlines()]
        assert [r["epoch"] for r in rows] == [1, 2]
        assert all({"train_loss", "val_map", "scene_accuracy"} <= set(r) for r in rows)
        assert rows[0]["train_loss"] == logs[0].train_loss

    def test_non_finite_names_batch(self, tiny_cfg, small_set):
        m = build_model(tiny_cfg, 0)
        m.params["cls_subnet.final.bias"].data[:] = np.nan
        with pytest.raises(TrainingError, match="batch 0.*scene_"):
            train_detector(m, small_set, TrainConfig(batch_size=2))

    def test_max_steps(self, tiny_cfg, small_set):
        calls = []
        train_detector(build_model(tiny_cfg, 0), small_set, TrainConfig(batch_size=1, epochs=10), max_steps=3,
                       on_epoch=calls.append)
        assert len(calls) == 1


@pytest.fixture(scope="module")
def sets():
    return generate_split(SMALL_SPEC, 0, 4), generate_split(SMALL_SPEC, 100, 3)


@pytest.fixture(scope="module")
def cfg():
    return ModelConfig(input_size=32, backbone_channels=(4, 4, 4), fpn_channels=4, subnet_channels=4)


class TestHPO:
    def test_single_trial(self, sets, cfg):
        report = random_hpo(*sets, cfg, trials=1, budget_epochs=1, seed=5)
        assert len(report) == 1
        assert report[0].trial == 0
        assert report[0].to_json() == {**SearchSpace().sample(np.random.default_rng(5)), "trial": 0,
                                       "val_map": report[0].val_map}

    def test_ranking_and_determinism(self, sets, cfg, tmp_path):
        a = random_hpo(*sets, cfg, trials=3, budget_epochs=1, seed=1, report_path=tmp_path / "r.ndjson")
        b = random_hpo(*sets, cfg, trials=3, budget_epochs=1, seed=1)
        assert [r.to_json() for r in a] == [r.to_json() for r in b]
        assert all(a[0].val_map >= r.val_map for r in a)
        assert sorted(r.trial for r in a) == [0, 1, 2]
        rows = [json.loads(line) for line in (tmp_path / "r.ndjson").read_text().splitlines()]
        assert rows == [r.to_json() for r in a]

    def test_space(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            s = SearchSpace().sample(rng)
            assert 1e-3 <= s["lr"] <= 3e-2 and s["gamma"] in (0, 1, 2, 5) and 0.1 <= s["alpha"] <= 0.9
            assert s["neg_thr"] <= s["pos_thr"]

    def test_failed_trial_kept(self, sets, cfg, monkeypatch):
        real = tr.train_detector

        def flaky(m, data, c, **kw):
            if c.seed == 1:
                raise TrainingError("non-finite loss nan")
            return real(m, data, c, **kw)

        monkeypatch.setattr(tr, "train_detector", flaky)
        report = random_hpo(*sets, cfg, trials=2, budget_epochs=1, seed=0)
        failed = [r for r in report if r.error]
        assert len(report) == 2 and len(failed) == 1
        assert failed[0].val_map == 0.0 and failed[0].trial == 1

    def test_zero_trials(self, sets, cfg):
        with pytest.raises(ValueError):
            random_hpo(*sets, cfg, trials=0, budget_epochs=1)
