"""Command-line entry points.

Every subcommand prints one JSON document on stdout; diagnostics go to
stderr. Exit codes: 0 ok, 1 check failed, 2 usage, 3 input data,
4 checkpoint, 5 training, 6 service.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint
from .boxes import Box, Detection
from .data import VOCABULARY, DataError, SceneSpec, decode_pnm, encode_pnm, load_dataset, synth_dataset
from .evalkit import mean_ap
from .model import ConfigError, ModelConfig, ShapeMismatch, build_model
from .service import ServiceConfig, ServiceError, Thresholds, process_frame, serve
from .train import FREEZE_PLANS, TrainConfig, TrainingError, apply_freeze, evaluate, random_hpo, train_detector

EXIT_OK, EXIT_CHECK, EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT, EXIT_TRAIN, EXIT_SERVICE = 0, 1, 2, 3, 4, 5, 6


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj) + "\n")
    sys.stdout.flush()


def _csv(text: str, cast=str):
    return tuple(cast(t) for t in text.split(",") if t.strip())


def _model_config(args) -> ModelConfig:
    return ModelConfig(input_size=args.size, class_names=_csv(args.classes), head=args.head)


def _load_model(path):
    return checkpoint.load_file(path)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    mix = _csv(args.class_mix, float) if args.class_mix else SceneSpec.class_mix
    spec = SceneSpec(seed=args.seed, image_size=args.size, min_objects=args.min_objects,
                     max_objects=args.max_objects, class_mix=mix, grayscale=args.grayscale)
    manifest = synth_dataset(spec, args.n, args.out, start=args.start)
    _emit({"manifest": str(manifest), "images": args.n, "spec": spec.to_dict()})
    return EXIT_OK


def cmd_train(args) -> int:
    train = load_dataset(args.train_manifest)
    val = load_dataset(args.val_manifest) if args.val_manifest else None
    if args.init:
        model = _load_model(args.init)
    else:
        model = build_model(_model_config(args), args.seed)
    if args.freeze != "all":
        apply_freeze(model, FREEZE_PLANS[args.freeze], seed=args.seed)
    cfg = TrainConfig(learning_rate=args.lr, momentum=args.momentum, epochs=args.epochs, batch_size=args.batch_size,
                      alpha=args.alpha, gamma=args.gamma, seed=args.seed)
    model, logs = train_detector(model, train, cfg, val=val, log_path=args.log)
    checkpoint.save_file(model, args.checkpoint)
    _emit({"checkpoint": args.checkpoint, "epochs": [e.to_json() for e in logs]})
    return EXIT_OK


def _read_predictions(path, class_names):
    """NDJSON lines ``{"image": name, "detections": [{"class", "score", "bbox"}]}``."""
    index = {c: i for i, c in enumerate(class_names)}
    preds = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                preds[rec["image"]] = [Detection(Box(*map(float, d["bbox"])), index[d["class"]], float(d["score"]))
                                       for d in rec["detections"]]
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: bad prediction record: {exc!r}") from None
    return preds


def cmd_eval(args) -> int:
    data = load_dataset(args.manifest)
    if args.predictions:
        names = _csv(args.classes)
        preds = _read_predictions(args.predictions, names)
        dets = [preds.get(ann.image, []) for _, ann in data]
        gts = [ann.ground_truths(names) for _, ann in data]
        result = mean_ap(dets, gts, args.iou_thr, names)
    else:
        if not args.checkpoint:
            raise DataError("eval needs --checkpoint or --predictions")
        model = _load_model(args.checkpoint)
        result = evaluate(model, data, iou_thr=args.iou_thr)
    _emit(result.to_json())
    return EXIT_OK


def cmd_hpo(args) -> int:
    train = load_dataset(args.train_manifest)
    val = load_dataset(args.val_manifest)
    base = TrainConfig(batch_size=args.batch_size, seed=args.seed)
    ranked = random_hpo(train, val, _model_config(args), args.trials, args.budget_epochs, seed=args.seed,
                        base=base, workers=args.workers, report_path=args.report)
    _emit({"trials": [r.to_json() for r in ranked]})
    return EXIT_OK


def _draw_outline(img: np.ndarray, box: Box, color) -> None:
    h, w = img.shape[:2]
    x1, y1 = int(max(0, box.x1)), int(max(0, box.y1))
    x2, y2 = int(min(w - 1, box.x2 - 1)), int(min(h - 1, box.y2 - 1))
    img[y1, x1:x2 + 1] = color
    img[y2, x1:x2 + 1] = color
    img[y1:y2 + 1, x1] = color
    img[y1:y2 + 1, x2] = color


PALETTE = [(255, 0, 0), (0, 255, 0), (0, 128, 255), (255, 0, 255), (255, 255, 0)]


def cmd_detect(args) -> int:
    model = _load_model(args.checkpoint)
    try:
        raw = Path(args.image).read_bytes()
    except OSError as exc:
        raise DataError(f"{args.image}: {exc.strerror}") from None
    th = Thresholds(args.score_thr, args.nms_thr, args.max_dets)
    event = process_frame(model, raw, args.source, 0, th)
    if "error" in event:
        raise DataError(event["error"])
    if args.annotate:
        img = decode_pnm(raw)
        if img.shape[2] == 1:
            img = np.repeat(img, 3, axis=2)
        names = model.cfg.class_names
        for d in event["detections"]:
            _draw_outline(img, Box(*d["bbox"]), PALETTE[names.index(d["class"]) % len(PALETTE)])
        Path(args.annotate).write_bytes(encode_pnm(img))
    _emit(event)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    result = run_suite(args.networks, args.instances, h=args.h, seed=args.seed)
    report = result.to_json()
    report["tolerance"] = args.tol
    report["passed"] = result.max_rel_err < args.tol
    _emit(report)
    return EXIT_OK if report["passed"] else EXIT_CHECK


def cmd_serve(args) -> int:
    if (args.watch is None) == (args.port is None):
        raise ServiceError("serve needs exactly one of --watch DIR or --port N")
    model = _load_model(args.checkpoint)
    cfg = ServiceConfig(
        mode="watch_dir" if args.watch else "stream_listen",
        host=args.host, port=args.port or 0, watch_dir=args.watch, checkpoint=args.checkpoint,
        log_path=args.log, thresholds=Thresholds(args.score_thr, args.nms_thr, args.max_dets),
        queue_size=args.queue_size,
    )

    def ready(port):
        print(json.dumps({"serving": cfg.mode, "port": port, "watch": cfg.watch_dir, "log": cfg.log_path}),
              file=sys.stderr, flush=True)

    serve(model, cfg, ready)
    _emit({"stopped": True, "log": cfg.log_path})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def _common_model(p):
    p.add_argument("--classes", default="worker,vehicle,excavator", help="comma-separated detection classes")
    p.add_argument("--size", type=int, default=128, help="square input size (power of two)")
    p.add_argument("--head", default="both", choices=["detection", "scene_classification", "both"])


def _thresholds(p):
    p.add_argument("--score-thr", type=float, default=0.3)
    p.add_argument("--nms-thr", type=float, default=0.5)
    p.add_argument("--max-dets", type=int, default=100)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sitewatch", description="Construction-site object detection toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--start", type=int, default=0, help="index of the first scene")
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--min-objects", type=int, default=0)
    p.add_argument("--max-objects", type=int, default=3)
    p.add_argument("--class-mix", help=f"weights over {','.join(VOCABULARY)}")
    p.add_argument("--grayscale", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest")
    p.add_argument("--checkpoint", required=True, help="output checkpoint path")
    p.add_argument("--init", help="start from this checkpoint (transfer learning)")
    p.add_argument("--freeze", default="all", choices=sorted(FREEZE_PLANS))
    p.add_argument("--epochs", type=int, default=TrainConfig.epochs)
    p.add_argument("--lr", type=float, default=TrainConfig.learning_rate)
    p.add_argument("--momentum", type=float, default=TrainConfig.momentum)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--alpha", type=float, default=TrainConfig.alpha)
    p.add_argument("--gamma", type=float, default=TrainConfig.gamma)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="append per-epoch NDJSON here")
    _common_model(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or a predictions file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="NDJSON predictions instead of running a model")
    p.add_argument("--classes", default="worker,vehicle,excavator")
    p.add_argument("--iou-thr", type=float, default=0.5)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("hpo", help="random hyper-parameter search")
    p.add_argument("--train-manifest", required=True)
    p.add_argument("--val-manifest", required=True)
    p.add_argument("--trials", type=int, default=8)
    p.add_argument("--budget-epochs", type=int, default=2)
    p.add_argument("--batch-size", type=int, default=TrainConfig.batch_size)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", help="write ranked NDJSON report here")
    _common_model(p)
    p.set_defaults(fn=cmd_hpo)

    p = sub.add_parser("detect", help="run detection on one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--annotate", help="write a PPM copy with box outlines")
    p.add_argument("--source", default="cli")
    _thresholds(p)
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("gradcheck", help="finite-difference check of the autodiff engine")
    p.add_argument("--networks", type=int, default=20)
    p.add_argument("--instances", type=int, default=10)
    p.add_argument("--h", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("serve", help="run the ingestion service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--watch", help="directory to watch for *.ppm / *.pgm")
    p.add_argument("--port", type=int, help="TCP port for the frame stream")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--log", default="events.ndjson")
    p.add_argument("--queue-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    _thresholds(p)
    p.set_defaults(fn=cmd_serve)
    return parser


ERRORS = (
    (checkpoint.CheckpointError, EXIT_CHECKPOINT, "checkpoint"),
    (DataError, EXIT_DATA, "data"),
    (ShapeMismatch, EXIT_DATA, "data"),
    (TrainingError, EXIT_TRAIN, "training"),
    (ServiceError, EXIT_SERVICE, "service"),
    (ConfigError, EXIT_DATA, "config"),
)


def run_cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:
        for kind, code, label in ERRORS:
            if isinstance(exc, kind):
                print(f"error[{label}]: {exc}", file=sys.stderr)
                return code
        if isinstance(exc, (ValueError, OSError)):
            print(f"error[input]: {exc}", file=sys.stderr)
            return EXIT_DATA
        raise


def main() -> None:
    sys.exit(run_cli())
