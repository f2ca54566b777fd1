"""Frame ingestion, per-frame inference, captions and the event log.

Ingestion threads (one per stream connection, or one directory watcher) push
frames into a bounded queue that drops its oldest entry when full. A single
worker owns the model and the log writer, so events leave in queue order and
per-source ordering is the arrival ordering.

Stream protocol, repeated per frame::

    FRAME <source> <frame_id> <byte_len>\\n
    <byte_len bytes of a binary PPM/PGM image>
"""
from __future__ import annotations

import collections
import json
import logging
import os
import re
import signal
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .boxes import Detection
from .data import decode_pnm
from .model import Model, forward_scene, predict

log = logging.getLogger(__name__)

MAX_HEADER = 512
MAX_FRAME_BYTES = 64 << 20
HEADER_RE = re.compile(rb"FRAME (\S{1,128}) (\d{1,18}) (\d{1,12})\n\Z")


class ServiceError(RuntimeError):
    pass


def now_ms() -> int:
    return int(time.time() * 1000)


# ---------------------------------------------------------------------------
# captions

_PLURAL = {"worker": "workers", "hardhat": "hardhats", "vehicle": "vehicles", "excavator": "excavators",
           "barrier": "barriers"}


def _plural(name: str, n: int) -> str:
    return name if n == 1 else _PLURAL.get(name, name + "s")


def _location(box, width: float, height: float) -> str:
    cx, cy = box.center
    h = ("left", "center", "right")[min(2, int(3 * cx / width))]
    v = ("top", "center", "bottom")[min(2, int(3 * cy / height))]
    return "center" if h == v == "center" else f"{h}-{v}"


def hardhat_wearers(workers: Sequence[Detection], hardhats: Sequence[Detection]) -> int:
    """Workers with at least one hardhat centred in the upper third of their box."""
    count = 0
    for w in workers:
        b = w.box
        top = b.y1 + b.height / 3.0
        for hh in hardhats:
            cx, cy = hh.box.center
            if b.x1 <= cx <= b.x2 and b.y1 <= cy <= top:
                count += 1
                break
    return count


def compose_caption(dets: Sequence[Detection], scene_label: Optional[str], class_names: Sequence[str],
                    width: float = 128, height: float = 128) -> str:
    """Template caption, e.g. ``"2 workers (1 with hardhat) at left-top; scene: workers_present"``."""
    if not dets:
        return "no activity detected"
    ordered = sorted(dets, key=lambda d: (d.class_id, d.box.x1, d.box.y1, d.box.x2, d.box.y2, -d.score))
    by_class: dict[str, list[Detection]] = collections.defaultdict(list)
    for d in ordered:
        by_class[class_names[d.class_id]].append(d)
    workers, hardhats = by_class.get("worker", []), by_class.get("hardhat", [])
    grid = ["left-top", "center-top", "right-top", "left-center", "center", "right-center",
            "left-bottom", "center-bottom", "right-bottom"]
    parts = []
    for name in class_names:
        group = by_class.get(name)
        if not group or (name == "hardhat" and workers):
            continue
        text = f"{len(group)} {_plural(name, len(group))}"
        if name == "worker" and hardhats:
            text += f" ({hardhat_wearers(workers, hardhats)} with hardhat)"
        places = sorted({_location(d.box, width, height) for d in group}, key=grid.index)
        text += " at " + " and ".join(places)
        parts.append(text)
    caption = ", ".join(parts)
    if scene_label:
        caption += f"; scene: {scene_label}"
    return caption


# ---------------------------------------------------------------------------
# event log

class EventLog:
    """Append-only NDJSON file; each event is one write of one full line, then fsync."""

    def __init__(self, path):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._fd = os.open(self.path, os.O_WRONLY | os.O_APPEND | os.O_CREAT, 0o644)

    def append(self, event: dict) -> None:
        line = (json.dumps(event, separators=(", ", ": ")) + "\n").encode("utf-8")
        with self._lock:
            os.write(self._fd, line)
            os.fsync(self._fd)

    def close(self) -> None:
        with self._lock:
            if self._fd >= 0:
                os.close(self._fd)
                self._fd = -1


def read_events(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# per-frame processing

@dataclass(frozen=True)
class Thresholds:
    score_thr: float = 0.3
    nms_thr: float = 0.5
    max_dets: int = 100


def _fit_image(img: np.ndarray, model: Model) -> tuple[np.ndarray, Optional[list[int]]]:
    """(H, W, C) uint8 -> (C, S, S) floats; nearest-neighbour resize if needed."""
    cfg = model.cfg
    h, w, c = img.shape
    if c != cfg.in_channels:
        if c == 1:
            img = np.repeat(img, cfg.in_channels, axis=2)
        elif cfg.in_channels == 1:
            img = np.round(img.astype(np.float64) @ np.array([0.299, 0.587, 0.114])).astype(np.uint8)[:, :, None]
        else:
            raise ValueError(f"cannot map {c} channels onto {cfg.in_channels}")
    resized = None
    s = cfg.input_size
    if (h, w) != (s, s):
        rows = np.minimum((np.arange(s) * h) // s, h - 1)
        cols = np.minimum((np.arange(s) * w) // s, w - 1)
        img = img[rows][:, cols]
        resized = [w, h]
    return img.transpose(2, 0, 1) / 255.0, resized


def detection_json(d: Detection, class_names: Sequence[str], scale=(1.0, 1.0)) -> dict:
    sx, sy = scale
    b = d.box
    return {"class": class_names[d.class_id], "score": round(d.score, 6),
            "bbox": [round(b.x1 * sx, 3), round(b.y1 * sy, 3), round(b.x2 * sx, 3), round(b.y2 * sy, 3)]}


def process_frame(model: Model, frame, source: str, frame_id: int, thresholds: Thresholds = Thresholds(),
                  log_to: Optional[EventLog] = None) -> dict:
    """Detect, classify and caption one frame; the event is logged before returning.

    ``frame`` is encoded PPM/PGM bytes or an (H, W, C) uint8 array. Failures
    produce an ``{"error": ...}`` event instead of raising.
    """
    event = {"ts": now_ms(), "source": source, "frame_id": int(frame_id)}
    try:
        img = decode_pnm(frame) if isinstance(frame, (bytes, bytearray, memoryview)) else np.asarray(frame)
        if img.ndim == 2:
            img = img[:, :, None]
        x, resized = _fit_image(img, model)
        cfg = model.cfg
        dets = predict(model, x, thresholds.score_thr, thresholds.nms_thr, thresholds.max_dets) if cfg.has_detection else []
        scene = None
        if cfg.has_scene:
            scene = cfg.scene_names[int(np.argmax(forward_scene(model, x)))]
        size = cfg.input_size
        scale = (1.0, 1.0) if resized is None else (resized[0] / size, resized[1] / size)
        event["detections"] = [detection_json(d, cfg.class_names, scale) for d in dets]
        event["scene_label"] = scene
        event["caption"] = compose_caption(dets, scene, cfg.class_names, size, size)
        if resized is not None:
            event["resized_from"] = resized
    except Exception as exc:  # any per-frame failure becomes an error event
        event["error"] = f"{type(exc).__name__}: {exc}"
    if log_to is not None:
        log_to.append(event)
    return event


# ---------------------------------------------------------------------------
# queue and service

@dataclass
class Frame:
    source: str
    frame_id: int
    payload: Optional[bytes]
    error: Optional[str] = None


class DropOldestQueue:
    """Bounded FIFO; a put on a full queue evicts the oldest item."""

    def __init__(self, maxsize: int = 64):
        if maxsize < 1:
            raise ValueError("queue size must be >= 1")
        self.maxsize = maxsize
        self._items: collections.deque = collections.deque()
        self._cond = threading.Condition()
        self.dropped = 0
        self.received = 0

    def put(self, item) -> None:
        with self._cond:
            if len(self._items) >= self.maxsize:
                self._items.popleft()
                self.dropped += 1
            self._items.append(item)
            self.received += 1
            self._cond.notify()

    def get(self, timeout: Optional[float] = None):
        with self._cond:
            if not self._cond.wait_for(lambda: self._items, timeout):
                return None
            return self._items.popleft()

    def __len__(self) -> int:
        with self._cond:
            return len(self._items)


@dataclass
class ServiceConfig:
    mode: str = "stream_listen"  # or "watch_dir"
    host: str = "127.0.0.1"
    port: int = 0
    watch_dir: Optional[str] = None
    watch_source: str = "watch"
    checkpoint: Optional[str] = None
    log_path: str = "events.ndjson"
    thresholds: Thresholds = field(default_factory=Thresholds)
    queue_size: int = 64
    stats_interval: float = 10.0
    poll_interval: float = 0.2


class _FrameHandler(socketserver.StreamRequestHandler):
    def handle(self):
        svc: Service = self.server.service  # type: ignore[attr-defined]
        peer = "%s:%s" % self.client_address[:2]
        while not svc.stopping.is_set():
            line = self.rfile.readline(MAX_HEADER)
            if not line:
                return
            m = HEADER_RE.match(line)
            if m is None:
                svc.report_error(f"peer:{peer}", None, f"malformed header {line[:64]!r}; connection closed")
                return
            source, frame_id, size = m.group(1).decode("ascii", "replace"), int(m.group(2)), int(m.group(3))
            if size > MAX_FRAME_BYTES:
                svc.report_error(source, frame_id, f"frame of {size} bytes exceeds limit; connection closed")
                return
            payload = self.rfile.read(size)
            if len(payload) < size:
                svc.report_error(source, frame_id, f"connection ended after {len(payload)} of {size} payload bytes")
                return
            svc.queue.put(Frame(source, frame_id, payload))


class _Server(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True


class Service:
    """Running ingestion + inference pipeline. Use :meth:`start` / :meth:`stop`."""

    def __init__(self, model: Model, cfg: ServiceConfig):
        self.model = model
        self.cfg = cfg
        self.queue = DropOldestQueue(cfg.queue_size)
        self.log = EventLog(cfg.log_path)
        self.stopping = threading.Event()
        self._idle = threading.Event()
        self._threads: list[threading.Thread] = []
        self._server: Optional[_Server] = None
        self._last_id: dict[str, int] = {}
        self.processed = 0
        self.errors = 0
        self._reported_drops = 0

    # errors discovered by ingestion threads go through the queue so that
    # the worker stays the only log writer
    def report_error(self, source: str, frame_id: Optional[int], message: str) -> None:
        self.queue.put(Frame(source, -1 if frame_id is None else frame_id, None, message))

    def start(self) -> Optional[int]:
        """Start threads; returns the bound port in stream mode."""
        port = None
        if self.cfg.mode == "stream_listen":
            try:
                self._server = _Server((self.cfg.host, self.cfg.port), _FrameHandler)
            except OSError as exc:
                self.log.close()
                raise ServiceError(f"cannot bind {self.cfg.host}:{self.cfg.port}: {exc.strerror}") from None
            self._server.service = self  # type: ignore[attr-defined]
            port = self._server.server_address[1]
            self._spawn(self._server.serve_forever, "ingest-stream")
        elif self.cfg.mode == "watch_dir":
            d = Path(self.cfg.watch_dir or ".")
            if not d.is_dir() or not os.access(d, os.R_OK):
                self.log.close()
                raise ServiceError(f"watch directory {d} is not readable")
            self._spawn(self._watch, "ingest-watch")
        else:
            raise ServiceError(f"unknown mode {self.cfg.mode!r}")
        self._spawn(self._work, "inference")
        return port

    def _spawn(self, fn, name):
        t = threading.Thread(target=fn, name=name, daemon=True)
        t.start()
        self._threads.append(t)

    def _watch(self):
        d = Path(self.cfg.watch_dir)
        seen: set[str] = set()
        sizes: dict[str, int] = {}
        frame_id = 0
        while not self.stopping.is_set():
            names = sorted(p.name for p in d.iterdir() if p.suffix in (".ppm", ".pgm") and p.name not in seen)
            for name in names:
                path = d / name
                try:
                    size = path.stat().st_size
                except OSError:
                    continue
                # wait for the size to settle so half-written files are not read
                if sizes.get(name) != size or size == 0:
                    sizes[name] = size
                    break
                seen.add(name)
                sizes.pop(name, None)
                try:
                    payload = path.read_bytes()
                except OSError as exc:
                    self.report_error(self.cfg.watch_source, frame_id, f"{path}: {exc.strerror}")
                else:
                    self.queue.put(Frame(self.cfg.watch_source, frame_id, payload))
                frame_id += 1
            self.stopping.wait(self.cfg.poll_interval)

    def _stats_event(self) -> dict:
        return {"ts": now_ms(), "stats": {"received": self.queue.received, "processed": self.processed,
                                          "errors": self.errors, "dropped": self.queue.dropped}}

    def _work(self):
        last_stats = time.monotonic()
        while True:
            frame = self.queue.get(timeout=0.05)
            if frame is None:
                self._idle.set()
                if self.stopping.is_set():
                    break
            else:
                self._idle.clear()
                self._handle(frame)
            if time.monotonic() - last_stats >= self.cfg.stats_interval and self.queue.dropped != self._reported_drops:
                self._reported_drops = self.queue.dropped
                self.log.append(self._stats_event())
                last_stats = time.monotonic()

    def _handle(self, frame: Frame) -> None:
        if frame.error is not None:
            self.errors += 1
            event = {"ts": now_ms(), "source": frame.source, "error": frame.error}
            if frame.frame_id >= 0:
                event["frame_id"] = frame.frame_id
            self.log.append(event)
            return
        last = self._last_id.get(frame.source)
        if last is not None and frame.frame_id <= last:
            self.errors += 1
            self.log.append({"ts": now_ms(), "source": frame.source, "frame_id": frame.frame_id,
                             "error": f"frame_id {frame.frame_id} not after {last}; dropped"})
            return
        event = process_frame(self.model, frame.payload, frame.source, frame.frame_id, self.cfg.thresholds, self.log)
        if "error" in event:
            self.errors += 1
        else:
            self._last_id[frame.source] = frame.frame_id
            self.processed += 1

    def wait_idle(self, timeout: float = 30.0) -> bool:
        """Block until the queue is drained and the worker is idle."""
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if len(self.queue) == 0 and self._idle.wait(0.05) and len(self.queue) == 0:
                return True
        return False

    def stop(self, drain: bool = True, timeout: float = 30.0) -> None:
        if drain:
            self.wait_idle(timeout)
        self.stopping.set()
        if self._server is not None:
            self._server.shutdown()
            self._server.server_close()
        for t in self._threads:
            t.join(timeout)
        if self.queue.dropped:
            self.log.append(self._stats_event())
        self.log.close()


def serve(model: Model, cfg: ServiceConfig, ready=None) -> None:
    """Run until interrupted by SIGINT or SIGTERM, then drain and stop."""

    def _interrupt(signum, frame):
        raise KeyboardInterrupt

    if threading.current_thread() is threading.main_thread():
        signal.signal(signal.SIGTERM, _interrupt)
    svc = Service(model, cfg)
    port = svc.start()
    if ready is not None:
        ready(port)
    try:
        while True:
            time.sleep(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        svc.stop(drain=True, timeout=5.0)


def frame_message(source: str, frame_id: int, payload: bytes) -> bytes:
    return f"FRAME {source} {frame_id} {len(payload)}\n".encode("ascii") + payload


def send_frames(host: str, port: int, frames: Sequence[tuple[str, int, bytes]]) -> None:
    """Client helper: stream frames over one connection."""
    with socket.create_connection((host, port)) as sock:
        for source, frame_id, payload in frames:
            sock.sendall(frame_message(source, frame_id, payload))
