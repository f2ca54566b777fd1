"""Acceptance suite: one test per criterion.

Each test records its outcome in ``RESULTS``; the conftest hook prints one
PASS/FAIL line per criterion at the end of the run. Criteria 1, 10 and 11
share one full-scale training run.
"""
import json
import math
import socket
import time
from contextlib import contextmanager

import numpy as np
import pytest

from sitewatch import checkpoint as ck
from sitewatch import tensor as T
from sitewatch.anchors import AnchorConfig, filter_valid, generate_pyramid
from sitewatch.boxes import Box, decode_offsets, encode_offsets, nms
from sitewatch.data import SceneSpec, encode_pnm, generate_split, synth_scene, to_uint8
from sitewatch.evalkit import mean_ap
from sitewatch.gradcheck import run_suite
from sitewatch.model import ModelConfig, build_model
from sitewatch.service import Service, ServiceConfig, frame_message, read_events
from sitewatch.targets import PROB_EPS, FocalLossParams, focal_loss
from sitewatch.train import FREEZE_PLANS, TrainConfig, apply_freeze, evaluate, sgd_step, train_detector
from test_anchors import random_config
from test_boxes import random_dets, reference_nms
from test_evalkit import EXPECTED_INSTANCES, enumerate_instances, reference_map

RESULTS = {}

SEED = 7
TRAIN_RANGE = (0, 500)
HELD_OUT_RANGE = (500, 100)


@contextmanager
def criterion(n, title):
    detail = {}
    try:
        yield detail
    except BaseException:
        RESULTS[n] = (False, title, ", ".join(f"{k}={v}" for k, v in detail.items()) or "raised")
        raise
    RESULTS[n] = (True, title, ", ".join(f"{k}={v}" for k, v in detail.items()))


def full_run(tmp_dir):
    """Default-config training on 500 scenes, scored on the 100 that follow."""
    t0 = time.perf_counter()
    spec = SceneSpec(seed=SEED)
    train = generate_split(spec, *TRAIN_RANGE)
    held_out = generate_split(spec, *HELD_OUT_RANGE)
    m = build_model(ModelConfig(head="both"), seed=0)
    log_path = tmp_dir / "train_log.ndjson"
    m, logs = train_detector(m, train, TrainConfig(), val=held_out, log_path=log_path)
    result = evaluate(m, held_out)
    return {"model": m, "logs": logs, "result": result, "seconds": time.perf_counter() - t0,
            "train": train, "held_out": held_out, "log_path": log_path}


@pytest.fixture(scope="module")
def run_a(tmp_path_factory):
    return full_run(tmp_path_factory.mktemp("run_a"))


@pytest.mark.slow
def test_c01_synthetic_detection_accuracy(run_a):
    with criterion(1, "held-out mAP@0.5 >= 0.90 and scene accuracy >= 0.90 within 20 min") as d:
        res = run_a["result"]
        d["mAP"] = round(res.map, 4)
        d["scene_acc"] = round(res.scene_accuracy, 4)
        d["minutes"] = round(run_a["seconds"] / 60, 2)
        assert run_a["model"].cfg.class_names == ("worker", "vehicle", "excavator")
        assert res.map >= 0.90
        assert res.scene_accuracy >= 0.90
        assert run_a["seconds"] <= 20 * 60
        logs = run_a["logs"]
        d["loss"] = f"{logs[0].train_loss:.3f}->{logs[-1].train_loss:.3f}"
        assert logs[-1].train_loss < logs[0].train_loss


@pytest.mark.slow
def test_head_only_transfer_improves_on_untrained_head(run_a):
    m = ck.load(ck.save(run_a["model"]))
    apply_freeze(m, FREEZE_PLANS["head-only"], seed=1)
    before = evaluate(m, run_a["held_out"]).map
    train_detector(m, run_a["train"], TrainConfig(epochs=1))
    after = evaluate(m, run_a["held_out"]).map
    assert after > before


def test_c02_gradient_suite():
    with criterion(2, "finite differences: 20 networks + 10 loss instances, max rel err < 1e-6 within 2 min") as d:
        t0 = time.perf_counter()
        res = run_suite(networks=20, loss_instances=10, h=1e-5, seed=0)
        elapsed = time.perf_counter() - t0
        d["max_rel_err"] = f"{res.max_rel_err:.2e}"
        d["seconds"] = round(elapsed, 1)
        assert len(res.network_reports) == 20 and len(res.loss_reports) == 10
        assert res.max_rel_err < 1e-6
        assert elapsed <= 120


def test_c03_focal_degeneracy():
    with criterion(3, "FL(gamma=0) equals alpha-weighted CE to 1e-12; FL <= CE for gamma in {1,2,5}") as d:
        rng = np.random.default_rng(2024)
        p = rng.uniform(PROB_EPS, 1 - PROB_EPS, 10_000)
        y = rng.integers(0, 2, 10_000)
        a = rng.uniform(0.01, 1.0, 10_000)
        worst = 0.0
        for pi, yi, ai in zip(p, y, a):
            ce = -ai * math.log(pi) if yi == 1 else -(1 - ai) * math.log(1 - pi)
            worst = max(worst, abs(focal_loss(float(pi), int(yi), FocalLossParams(float(ai), 0.0)) - ce))
        d["max_abs_diff"] = f"{worst:.1e}"
        assert worst < 1e-12
        for g in (1.0, 2.0, 5.0):
            fl = focal_loss(p, np.ones_like(y), FocalLossParams(1.0, g))
            assert np.all(fl <= -np.log(p))


def test_c04_nms_oracle():
    with criterion(4, "NMS equals O(n^2) reference on 1000 instances (<=12 boxes, 3 classes)") as d:
        rng = np.random.default_rng(4)
        mismatches = 0
        for _ in range(1000):
            dets = random_dets(rng, int(rng.integers(0, 13)), classes=3)
            thr = float(rng.uniform(0.1, 0.9))
            mismatches += nms(dets, thr) != reference_nms(dets, thr)
        d["mismatches"] = mismatches
        assert mismatches == 0


def test_c05_encode_decode():
    with criterion(5, "decode(encode(gt, a), a) within 1e-9 over 1e4 pairs") as d:
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(10_000):
            gx, gy, ax, ay = rng.uniform(-50, 150, 4)
            gw, gh, aw, ah = rng.uniform(1, 100, 4)
            gt, anchor = Box(gx, gy, gx + gw, gy + gh), Box(ax, ay, ax + aw, ay + ah)
            back = decode_offsets(encode_offsets(gt, anchor), anchor)
            worst = max(worst, max(abs(u - v) for u, v in zip(back.as_list(), gt.as_list())))
        d["max_err"] = f"{worst:.1e}"
        assert worst < 1e-9


def test_c06_ap_oracle():
    with criterion(6, "mean_ap equals exhaustive reference exactly (<=6 dets, <=3 gts, grid scores)") as d:
        checked = mismatches = 0
        for dets, gts, k in enumerate_instances():
            checked += 1
            mismatches += mean_ap([dets], [gts], 0.5, ["x", "y"][:k]).map != reference_map(dets, gts, 0.5, k)
        d["instances"] = checked
        d["mismatches"] = mismatches
        assert checked == EXPECTED_INSTANCES
        assert mismatches == 0


def test_c07_anchor_counts():
    with criterion(7, "64x64 with strides 8/16/32 gives 756 anchors, none filtered; 50 random configs inside") as d:
        aset = filter_valid(generate_pyramid(AnchorConfig.from_strides((8, 16, 32)), 64, 64), 64, 64)
        d["anchors"] = len(aset)
        d["filtered"] = int((~aset.valid).sum())
        assert len(aset) == 756 and aset.valid.all()
        rng = np.random.default_rng(7)
        for _ in range(50):
            cfg, w, h = random_config(rng)
            a = filter_valid(generate_pyramid(cfg, w, h), w, h)
            c = a.centers[a.valid]
            assert np.all((c[:, 0] > 0) & (c[:, 0] < w) & (c[:, 1] > 0) & (c[:, 1] < h))


def test_c08_freeze_contract():
    with criterion(8, "head-only plan: frozen parameters bit-identical after 10 steps; lr 0 is identity") as d:
        data = generate_split(SceneSpec(seed=SEED), 0, 16)
        m = build_model(ModelConfig(), seed=0)
        apply_freeze(m, FREEZE_PLANS["head-only"], seed=0)
        frozen = {n: p.data.tobytes() for n, p in m.params.items() if not p.requires_grad}
        trained = {n: p.data.tobytes() for n, p in m.params.items() if p.requires_grad}
        train_detector(m, data, TrainConfig(batch_size=2, epochs=2), max_steps=10)
        changed = [n for n, raw in frozen.items() if m.params[n].data.tobytes() != raw]
        d["frozen"] = len(frozen)
        d["changed_frozen"] = len(changed)
        assert not changed
        assert any(m.params[n].data.tobytes() != raw for n, raw in trained.items())

        rng = np.random.default_rng(8)
        before = {n: p.data.tobytes() for n, p in m.params.items()}
        grads = {n: T.Tensor(rng.normal(size=p.shape)) for n, p in m.params.items() if p.requires_grad}
        sgd_step(m, grads, TrainConfig(), {}, lr=0.0)
        assert all(m.params[n].data.tobytes() == raw for n, raw in before.items())


@pytest.mark.slow
def test_c09_checkpoint_round_trip(run_a):
    with criterion(9, "save/load/forward bit-identical on 5 inputs; truncation and corruption give distinct errors") as d:
        m = run_a["model"]
        blob = ck.save(m)
        back = ck.load(blob)
        rng = np.random.default_rng(9)
        for _ in range(5):
            x = rng.random((1, 3, 128, 128))
            a, b = m.heads(x), back.heads(x)
            for u, v in ((a.cls_logits, b.cls_logits), (a.box_offsets, b.box_offsets), (a.scene_logits, b.scene_logits)):
                assert u.data.tobytes() == v.data.tobytes()

        def header_edit(fn):
            hlen = int.from_bytes(blob[6:14], "little")
            header = json.loads(blob[14:14 + hlen])
            start = 14 + hlen + (-(14 + hlen)) % 8
            fn(header)
            raw = json.dumps(header).encode()
            head = ck.MAGIC + len(raw).to_bytes(8, "little") + raw
            return head + b"\0" * ((-len(head)) % 8) + blob[start:]

        def past_end(h):
            h["manifest"][0]["offset"] = h["payload_bytes"]

        def overlap(h):
            h["manifest"][1]["offset"] = h["manifest"][0]["offset"]

        def version(h):
            h["format_version"] = 99

        cases = {
            "truncated": (blob[:-1], ck.TruncatedError),
            "bad_magic": (b"NOTCKP" + blob[6:], ck.BadMagicError),
            "offset_past_end": (header_edit(past_end), ck.ManifestBoundsError),
            "overlap": (header_edit(overlap), ck.ManifestOverlapError),
            "version": (header_edit(version), ck.VersionError),
        }
        seen = set()
        for name, (bad, kind) in cases.items():
            with pytest.raises(kind) as info:
                ck.load(bad)
            seen.add(type(info.value))
        d["error_kinds"] = len(seen)
        assert len(seen) == len(cases)


@pytest.mark.slow
def test_c10_service_end_to_end(run_a, tmp_path):
    with criterion(10, "100 frames from 2 sources: 100 events in order, 1 corrupt frame gives 1 error, within 1 min") as d:
        frames = [encode_pnm(to_uint8(synth_scene(SceneSpec(seed=SEED), 2000 + i)[0])) for i in range(100)]
        log_path = tmp_path / "events.ndjson"
        svc = Service(run_a["model"], ServiceConfig(log_path=str(log_path), queue_size=256))
        port = svc.start()
        t0 = time.perf_counter()
        ids = {"camA": 0, "camB": 0}
        sent = {"camA": [], "camB": []}
        with socket.create_connection(("127.0.0.1", port)) as sock:
            for i, payload in enumerate(frames):
                src = ("camA", "camB")[i % 2]
                if i == 50:
                    sock.sendall(frame_message("camA", ids["camA"], b"P6\n128 128\n255\n" + b"\x00" * 10))
                    ids["camA"] += 1
                sock.sendall(frame_message(src, ids[src], payload))
                sent[src].append(ids[src])
                ids[src] += 1
        deadline = time.monotonic() + 60
        while time.monotonic() < deadline and svc.processed + svc.errors < 101:
            time.sleep(0.05)
        svc.stop()
        elapsed = time.perf_counter() - t0
        lines = log_path.read_text().splitlines()
        events = [json.loads(line) for line in lines]
        detections = [e for e in events if "detections" in e]
        errors = [e for e in events if "error" in e]
        d["events"] = len(detections)
        d["errors"] = len(errors)
        d["dropped"] = svc.queue.dropped
        d["seconds"] = round(elapsed, 1)
        assert read_events(log_path) == events
        assert len(detections) == 100
        assert len(errors) == 1 and errors[0]["source"] == "camA"
        for src in ("camA", "camB"):
            assert [e["frame_id"] for e in detections if e["source"] == src] == sent[src]
        assert elapsed <= 60


@pytest.mark.slow
def test_c11_determinism(run_a, tmp_path):
    with criterion(11, "repeat of the criterion-1 run: bit-identical checkpoint and identical metric logs") as d:
        run_b = full_run(tmp_path)
        same_ckpt = ck.save(run_a["model"]) == ck.save(run_b["model"])

        def metrics(path):
            rows = [json.loads(line) for line in path.read_text().splitlines()]
            return [{k: v for k, v in r.items() if k != "seconds"} for r in rows]

        same_logs = metrics(run_a["log_path"]) == metrics(run_b["log_path"])
        d["checkpoint_identical"] = same_ckpt
        d["logs_identical"] = same_logs
        assert same_ckpt
        assert same_logs
        assert run_a["result"].to_json() == run_b["result"].to_json()
