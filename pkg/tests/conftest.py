import sys

import numpy as np
import pytest

from sitewatch.data import SceneSpec, synth_scene
from sitewatch.model import ModelConfig, build_model
from sitewatch.train import TrainConfig, prepare, train_detector

# one clearly visible worker, nothing else
SINGLE_WORKER = SceneSpec(min_objects=1, max_objects=1, class_mix=(1, 0, 0, 0, 0))


@pytest.fixture(scope="session")
def tiny_cfg():
    return ModelConfig(input_size=32, backbone_channels=(4, 4, 4), fpn_channels=4, subnet_channels=4)


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    return build_model(tiny_cfg, seed=3)


@pytest.fixture(scope="session")
def default_model():
    return build_model(ModelConfig(), seed=0)


@pytest.fixture(scope="session")
def overfit():
    """A detection-only model overfit on one single-worker scene.

    200 steps in total: 150 at the default rate, then 50 at a tenth of it,
    so the L1 term settles instead of bouncing around its minimum.
    """
    img, ann = synth_scene(SINGLE_WORKER, 0)
    m = build_model(ModelConfig(head="detection"), seed=0)
    data = [(img, ann)]
    first = TrainConfig(batch_size=1, epochs=150, hflip=False, warmup_steps=20)
    train_detector(m, data, first)
    train_detector(m, data, TrainConfig(batch_size=1, epochs=50, hflip=False, warmup_steps=0, learning_rate=1e-3))
    targets = prepare(m, data, first).targets
    return m, img, ann, targets


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    acceptance = sys.modules.get("test_acceptance")
    results = getattr(acceptance, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        ok, title, detail = results[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}  [{detail}]")
