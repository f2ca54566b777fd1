import math

import numpy as np
import pytest

from sitewatch import tensor as T
from sitewatch.anchors import AnchorConfig, anchors_for
from sitewatch.boxes import iou
from sitewatch.model import (
    ConfigError, ModelConfig, ShapeMismatch, build_model, forward_detect, forward_scene, predict, predict_batch,
)
from sitewatch.targets import FocalLossParams, detection_loss


def image(cfg, seed=0):
    return np.random.default_rng(seed).random((cfg.in_channels, cfg.input_size, cfg.input_size))


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.num_classes == 3 and cfg.subnet_channels == 64 and cfg.head == "both"

    @pytest.mark.parametrize("kw", [
        {"input_size": 100}, {"input_size": 16}, {"head": "segmentation"}, {"class_names": ()},
        {"backbone": "densenet"}, {"detector": "yolov3"}, {"anchor_cfg": AnchorConfig.from_strides((4, 8, 16))},
        {"backbone_channels": (8, 8)},
    ])
    def test_rejected(self, kw):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)

    def test_dict_round_trip(self):
        cfg = ModelConfig(input_size=64, class_names=("a", "b"), head="detection")
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestBuild:
    def test_same_seed_same_parameters(self, tiny_cfg):
        a, b = build_model(tiny_cfg, 5), build_model(tiny_cfg, 5)
        for name in a.params:
            assert a.params[name].data.tobytes() == b.params[name].data.tobytes()

    def test_different_seed_differs(self, tiny_cfg):
        a, b = build_model(tiny_cfg, 5), build_model(tiny_cfg, 6)
        assert a.params["backbone.stem.weight"].data.tobytes() != b.params["backbone.stem.weight"].data.tobytes()

    def test_prior_bias(self, default_model):
        bias = default_model.params["cls_subnet.final.bias"].data
        assert bias.shape == (27,)
        assert np.all(bias == -math.log(99))

    def test_head_widths(self, default_model):
        p = default_model.params
        assert p["cls_subnet.final.weight"].shape == (9 * 3, 64, 3, 3)
        assert p["reg_subnet.final.weight"].shape == (9 * 4, 64, 3, 3)
        assert p["cls_subnet.conv1.weight"].shape[0] == 64

    def test_scene_only_has_no_pyramid(self):
        m = build_model(ModelConfig(input_size=32, head="scene_classification"), 0)
        assert not any(n.startswith(("fpn.", "cls_subnet.", "reg_subnet.")) for n in m.params)


class TestShapes:
    def test_level_shapes(self):
        cfg = ModelConfig(input_size=32)
        levels = forward_detect(build_model(cfg, 0), image(cfg))
        # stride 8 on 32 pixels: 4x4 cells
        probs, offs = levels[0]
        assert probs.size == 4 * 4 * 9 * 3 == 432
        assert offs.size == 4 * 4 * 9 * 4 == 576
        for (p, o), s in zip(levels, (8, 16, 32)):
            cells = (32 // s) ** 2
            assert p.shape == (cells * 9, 3) and o.shape == (cells * 9, 4)

    def test_pyramid_widths_and_extents(self, tiny_model, tiny_cfg):
        taps = tiny_model.backbone(T.Tensor(image(tiny_cfg)[None]))
        levels = tiny_model.pyramid(taps)
        assert [t.shape[2] for t in taps] == [4, 2, 1]
        assert len({p.shape[1] for p in levels}) == 1
        for hi, lo in zip(levels, levels[1:]):
            assert hi.shape[2:] == (2 * lo.shape[2], 2 * lo.shape[3])

    def test_probabilities_in_range(self, tiny_model, tiny_cfg):
        for probs, _ in forward_detect(tiny_model, image(tiny_cfg)):
            assert probs.min() >= 0 and probs.max() <= 1

    def test_fresh_model_outputs_prior(self, default_model):
        for probs, _ in forward_detect(default_model, image(default_model.cfg, 1)):
            assert np.all(np.abs(probs - 0.01) <= 0.005)

    def test_extent_mismatch(self, tiny_model):
        with pytest.raises(ShapeMismatch):
            forward_detect(tiny_model, np.zeros((3, 64, 64)))
        with pytest.raises(ShapeMismatch):
            forward_detect(tiny_model, np.zeros((1, 32, 32)))

    def test_anchor_order_matches_generator(self, tiny_cfg):
        # zero weights and a bias that encodes the anchor index in each
        # channel: row r of the output must then carry index r mod 9
        m = build_model(tiny_cfg, 0)
        k = tiny_cfg.num_classes
        m.params["cls_subnet.final.weight"].data[:] = 0.0
        m.params["cls_subnet.final.bias"].data = np.repeat(np.arange(9.0), k)
        logits = m.heads(image(tiny_cfg)[None]).cls_logits.data[0]
        aset = anchors_for(tiny_cfg.anchor_cfg, 32, 32)
        assert len(logits) == len(aset)
        assert [s.stop - s.start for s in m.level_slices()] == [144, 36, 9]
        np.testing.assert_array_equal(logits[:, 0], np.arange(len(aset)) % 9)

    def test_subnet_weights_shared_across_levels(self, tiny_model, tiny_cfg):
        with T.GradientTape() as tape:
            tiny_model.heads(image(tiny_cfg)[None])
        for name in ("cls_subnet.final.weight", "reg_subnet.conv1.weight"):
            param = tiny_model.params[name]
            uses = [n for n in tape.nodes if n.op == "conv2d" and any(p is param for p in n.parents)]
            assert len(uses) == 3


class TestScene:
    def test_zero_head_zero_logits(self, tiny_model):
        np.testing.assert_array_equal(forward_scene(tiny_model, np.zeros((3, 32, 32))), np.zeros(3))

    def test_deterministic_and_finite(self, tiny_model, tiny_cfg):
        m = build_model(tiny_cfg, 3)
        m.params["scene_head.weight"].data = np.random.default_rng(0).normal(size=m.params["scene_head.weight"].shape)
        x = image(tiny_cfg, 4)
        a, b = forward_scene(m, x), forward_scene(m, x.copy())
        assert np.all(np.isfinite(a))
        assert a.tobytes() == b.tobytes()

    def test_disabled(self):
        m = build_model(ModelConfig(input_size=32, head="detection"), 0)
        with pytest.raises(ConfigError):
            forward_scene(m, np.zeros((3, 32, 32)))


class TestPredict:
    def test_threshold_one_gives_nothing(self, default_model):
        assert predict(default_model, image(default_model.cfg), score_thr=1.0) == []

    def test_sorted_and_capped(self, default_model):
        dets = predict(default_model, image(default_model.cfg), score_thr=0.005, nms_thr=0.5, max_dets=7)
        assert 0 < len(dets) <= 7
        scores = [d.score for d in dets]
        assert scores == sorted(scores, reverse=True)
        for d in dets:
            assert 0 <= d.box.x1 < d.box.x2 <= 128 and 0 <= d.box.y1 < d.box.y2 <= 128

    def test_batch_matches_single(self, tiny_model, tiny_cfg):
        imgs = np.stack([image(tiny_cfg, s) for s in range(3)])
        dets, scenes = predict_batch(tiny_model, imgs, score_thr=0.005)
        for i in range(3):
            single = predict(tiny_model, imgs[i], score_thr=0.005)
            # BLAS blocking differs with batch size, so compare to rounding level
            assert [d.class_id for d in single] == [d.class_id for d in dets[i]]
            for a, b in zip(single, dets[i]):
                assert a.score == pytest.approx(b.score, rel=1e-12)
                assert a.box.as_list() == pytest.approx(b.box.as_list(), abs=1e-9)
        assert len(scenes) == 3

    def test_deterministic(self, tiny_model, tiny_cfg):
        x = image(tiny_cfg, 9)
        a = tiny_model.heads(x[None]).cls_logits.data
        b = tiny_model.heads(x[None]).cls_logits.data
        assert a.tobytes() == b.tobytes()


class TestOverfit:
    def test_loss_below_target(self, overfit):
        m, img, _, targets = overfit
        out = m.heads(img[None])
        loss = detection_loss(out.cls_logits, out.box_offsets, targets, FocalLossParams())
        assert loss.item() < 0.01

    def test_single_correct_detection(self, overfit):
        m, img, ann, _ = overfit
        dets = predict(m, img)
        assert len(dets) == 1
        gt = ann.ground_truths(m.cfg.class_names)[0]
        assert dets[0].class_id == gt.class_id
        assert iou(dets[0].box, gt.box) > 0.8
