"""Synthetic construction-site scenes, the NDJSON manifest, and PPM/PGM I/O.

A scene is fully determined by ``(spec.seed, index)``. Objects are drawn
from simple shapes over a textured ground; each annotation box is the tight
bounding box of the object's own rendered mask.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .boxes import Box, GroundTruth, iou

VOCABULARY = ("worker", "hardhat", "vehicle", "excavator", "barrier")
SCENE_LABELS = ("empty", "unattended_equipment", "workers_present")
EQUIPMENT = ("vehicle", "excavator")


class DataError(ValueError):
    """Schema or file-format problem, with location context in the message."""


class PnmFormatError(DataError):
    pass


# ---------------------------------------------------------------------------
# annotations

@dataclass(frozen=True)
class ObjectAnnotation:
    cls: str
    box: Box


@dataclass
class Annotation:
    image: str
    width: int
    height: int
    objects: list[ObjectAnnotation]
    scene_label: str
    placement_failures: int = 0

    def validate(self) -> None:
        for o in self.objects:
            if o.cls not in VOCABULARY:
                raise DataError(f"unknown class {o.cls!r}")
            b = o.box
            if b.x1 < 0 or b.y1 < 0 or b.x2 > self.width or b.y2 > self.height:
                raise DataError(f"box {b.as_list()} outside {self.width}x{self.height} image")
        if self.scene_label not in SCENE_LABELS:
            raise DataError(f"unknown scene label {self.scene_label!r}")

    def to_json(self) -> dict:
        d = {
            "image": self.image,
            "width": self.width,
            "height": self.height,
            "objects": [{"class": o.cls, "bbox": o.box.as_list()} for o in self.objects],
            "scene_label": self.scene_label,
        }
        if self.placement_failures:
            d["placement_failures"] = self.placement_failures
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Annotation":
        try:
            objects = []
            for o in d["objects"]:
                bbox = [float(v) for v in o["bbox"]]
                if len(bbox) != 4:
                    raise DataError(f"bbox needs 4 numbers, got {bbox}")
                try:
                    box = Box(*bbox)
                except ValueError as exc:
                    raise DataError(str(exc)) from None
                objects.append(ObjectAnnotation(str(o["class"]), box))
            ann = cls(str(d["image"]), int(d["width"]), int(d["height"]), objects, str(d["scene_label"]),
                      int(d.get("placement_failures", 0)))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed annotation: {exc!r}") from None
        ann.validate()
        return ann

    def ground_truths(self, class_names: Sequence[str]) -> list[GroundTruth]:
        """Objects restricted to ``class_names``, as class-indexed ground truth."""
        index = {c: i for i, c in enumerate(class_names)}
        return [GroundTruth(o.box, index[o.cls]) for o in self.objects if o.cls in index]


def scene_label_for(classes: Sequence[str]) -> str:
    if not classes:
        return "empty"
    if "worker" not in classes and any(c in EQUIPMENT for c in classes):
        return "unattended_equipment"
    return "workers_present"


# ---------------------------------------------------------------------------
# scene specification and rendering

@dataclass(frozen=True)
class SceneSpec:
    seed: int = 7
    image_size: int = 128
    min_objects: int = 0
    max_objects: int = 3
    class_mix: tuple[float, ...] = (1.0, 0.0, 1.0, 1.0, 0.0)  # weights over VOCABULARY
    brightness: tuple[float, float] = (0.75, 1.25)
    noise: float = 0.03
    max_iou: float = 0.4
    grayscale: bool = False
    max_retries: int = 30

    def __post_init__(self):
        s = self.image_size
        if s < 16 or s & (s - 1):
            raise ValueError(f"image_size must be a power of two >= 16, got {s}")
        if not 0 <= self.min_objects <= self.max_objects:
            raise ValueError("object-count range is empty")
        if len(self.class_mix) != len(VOCABULARY) or min(self.class_mix) < 0 or sum(self.class_mix) <= 0:
            raise ValueError(f"class_mix needs {len(VOCABULARY)} non-negative weights with positive sum")
        if not 0 < self.brightness[0] <= self.brightness[1]:
            raise ValueError("brightness range must be positive and ordered")
        if self.noise < 0 or not 0 < self.max_iou <= 1:
            raise ValueError("invalid noise amplitude or max_iou")

    @property
    def channels(self) -> int:
        return 1 if self.grayscale else 3

    @property
    def extension(self) -> str:
        return ".pgm" if self.grayscale else ".ppm"

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class RenderedScene:
    image: np.ndarray  # (C, H, W) floats on the 8-bit grid, i/255
    annotation: Annotation
    masks: list[np.ndarray] = field(default_factory=list)


class _Canvas:
    def __init__(self, size: int):
        self.size = size
        c = np.arange(size) + 0.5
        self.yy, self.xx = np.meshgrid(c, c, indexing="ij")
        self.rgb = np.zeros((size, size, 3))

    def rect(self, x1, y1, x2, y2):
        return (self.xx >= x1) & (self.xx < x2) & (self.yy >= y1) & (self.yy < y2)

    def disc(self, cx, cy, r):
        return (self.xx - cx) ** 2 + (self.yy - cy) ** 2 <= r * r

    def capsule(self, cx, y1, y2, r):
        """Vertical stadium of radius r spanning y1..y2 (end caps included)."""
        cy = np.clip(self.yy, y1 + r, y2 - r)
        return (self.xx - cx) ** 2 + (self.yy - cy) ** 2 <= r * r

    def segment(self, ax, ay, bx, by, r):
        dx, dy = bx - ax, by - ay
        t = np.clip(((self.xx - ax) * dx + (self.yy - ay) * dy) / (dx * dx + dy * dy), 0.0, 1.0)
        return (self.xx - ax - t * dx) ** 2 + (self.yy - ay - t * dy) ** 2 <= r * r

    def paint(self, mask, color):
        self.rgb[mask] = color


def _jitter(rng, color, amount=0.06):
    return np.clip(np.asarray(color) + rng.uniform(-amount, amount, 3), 0.0, 1.0)


def _extent(cls: str, rng: np.random.Generator, unit: float) -> tuple[float, float]:
    """Sampled (width, height) of an object's bounding box."""
    if cls in ("worker", "hardhat"):
        return rng.uniform(16, 24) * unit, rng.uniform(38, 56) * unit
    if cls == "vehicle":
        return rng.uniform(42, 66) * unit, rng.uniform(22, 32) * unit
    if cls == "excavator":
        return rng.uniform(48, 70) * unit, rng.uniform(40, 58) * unit
    return rng.uniform(32, 60) * unit, rng.uniform(6, 10) * unit


def _draw(canvas: _Canvas, cls: str, x: float, y: float, w: float, h: float, rng) -> list[tuple[str, np.ndarray]]:
    """Draw one object inside box (x, y, w, h); returns (class, mask) pairs."""
    if cls in ("worker", "hardhat"):
        r_head = 0.3 * w
        cx = x + w / 2
        head_cy = y + r_head + (0.12 * w if cls == "hardhat" else 0.0)
        body_top = head_cy + r_head * 0.9
        body = canvas.capsule(cx, body_top, y + h, w / 2)
        head = canvas.disc(cx, head_cy, r_head)
        canvas.paint(body, _jitter(rng, (0.97, 0.52, 0.08)))
        stripe = body & (np.abs(canvas.yy - (body_top + 0.35 * (y + h - body_top))) < 0.06 * h)
        canvas.paint(stripe, _jitter(rng, (0.85, 0.9, 0.85)))
        canvas.paint(head, _jitter(rng, (0.78, 0.6, 0.46)))
        out = [("worker", body | head)]
        if cls == "hardhat":
            hat = canvas.disc(cx, head_cy, r_head * 1.15) & (canvas.yy <= head_cy) & (canvas.yy >= y)
            canvas.paint(hat, _jitter(rng, (0.98, 0.93, 0.2), 0.03))
            out = [("worker", body | head | hat), ("hardhat", hat)]
        return out
    if cls == "vehicle":
        r = 0.2 * h
        body_bottom = y + h - r
        body = canvas.rect(x, y + 0.35 * h, x + w, body_bottom)
        flip = rng.random() < 0.5
        cab_x1 = x + (0.05 if flip else 0.5) * w
        cab = canvas.rect(cab_x1, y, cab_x1 + 0.45 * w, y + 0.35 * h + 1)
        window = canvas.rect(cab_x1 + 0.08 * w, y + 0.08 * h, cab_x1 + 0.37 * w, y + 0.3 * h)
        wheels = canvas.disc(x + 0.22 * w, body_bottom, r) | canvas.disc(x + 0.78 * w, body_bottom, r)
        color = _jitter(rng, (0.16, 0.36, 0.86))
        canvas.paint(body | cab, color)
        canvas.paint(window, _jitter(rng, (0.75, 0.88, 0.95)))
        canvas.paint(wheels, _jitter(rng, (0.08, 0.08, 0.08), 0.03))
        return [("vehicle", body | cab | wheels)]
    if cls == "excavator":
        facing_right = rng.random() < 0.5
        bw = 0.62 * w
        bx = x if facing_right else x + w - bw
        track = canvas.rect(bx, y + 0.82 * h, bx + bw, y + h)
        body = canvas.rect(bx + 0.06 * bw, y + 0.45 * h, bx + 0.94 * bw, y + 0.82 * h)
        cab = canvas.rect(bx + (0.1 if facing_right else 0.55) * bw, y + 0.25 * h,
                          bx + (0.45 if facing_right else 0.9) * bw, y + 0.46 * h)
        thick = max(1.5, 0.05 * w)
        sx = bx + (0.8 if facing_right else 0.2) * bw
        ex = x + w - thick if facing_right else x + thick
        elbow = (sx + (ex - sx) * 0.55, y + thick)
        tip = (ex, y + 0.6 * h)
        arm = canvas.segment(sx, y + 0.5 * h, elbow[0], elbow[1], thick) | \
            canvas.segment(elbow[0], elbow[1], tip[0], tip[1], thick)
        bucket = canvas.rect(min(tip[0], ex) - thick, tip[1] - thick, max(tip[0], ex) + thick, tip[1] + 2.5 * thick)
        mask = track | body | cab | arm | bucket
        mask &= canvas.rect(x, y, x + w, y + h)
        yellow = _jitter(rng, (0.96, 0.78, 0.08))
        canvas.paint(mask & ~track, yellow)
        canvas.paint(track & mask, _jitter(rng, (0.15, 0.14, 0.12), 0.03))
        canvas.paint(arm & mask, yellow * 0.7)
        return [("excavator", mask)]
    mask = canvas.rect(x, y, x + w, y + h)
    stripes = mask & ((np.floor((canvas.xx - x + canvas.yy) / max(4.0, 0.12 * w)) % 2) == 0)
    canvas.paint(mask, _jitter(rng, (0.95, 0.95, 0.95), 0.03))
    canvas.paint(stripes, _jitter(rng, (0.9, 0.12, 0.1), 0.03))
    return [("barrier", mask)]


def _ground(rng: np.random.Generator, size: int) -> np.ndarray:
    base = _jitter(rng, (0.56, 0.5, 0.42), 0.08)
    coarse = rng.normal(0.0, 0.05, (size // 16 + 1, size // 16 + 1, 1))
    coarse = np.repeat(np.repeat(coarse, 16, axis=0), 16, axis=1)[:size, :size]
    fine = rng.normal(0.0, 0.02, (size, size, 1))
    return np.clip(base + coarse + fine, 0.0, 1.0)


def _mask_box(mask: np.ndarray) -> Optional[Box]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return Box(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))


def render_scene(spec: SceneSpec, index: int) -> RenderedScene:
    rng = np.random.default_rng([spec.seed, index])
    size = spec.image_size
    unit = size / 128.0
    canvas = _Canvas(size)
    canvas.rgb = _ground(rng, size)

    count = int(rng.integers(spec.min_objects, spec.max_objects + 1))
    weights = np.asarray(spec.class_mix, dtype=np.float64)
    weights = weights / weights.sum()
    placed: list[Box] = []
    objects: list[ObjectAnnotation] = []
    masks: list[np.ndarray] = []
    failures = 0
    for _ in range(count):
        cls = VOCABULARY[int(rng.choice(len(VOCABULARY), p=weights))]
        spot = None
        for _attempt in range(spec.max_retries):
            w, h = _extent(cls, rng, unit)
            x = rng.uniform(0, size - w)
            y = rng.uniform(0, size - h)
            cand = Box(x, y, x + w, y + h)
            if all(iou(cand, p) <= spec.max_iou for p in placed):
                spot = cand
                break
        if spot is None:
            failures += 1
            continue
        for name, mask in _draw(canvas, cls, spot.x1, spot.y1, spot.width, spot.height, rng):
            box = _mask_box(mask)
            if box is None:
                continue
            objects.append(ObjectAnnotation(name, box))
            masks.append(mask)
        placed.append(spot)

    gain = rng.uniform(*spec.brightness)
    img = np.clip(canvas.rgb * gain + rng.normal(0.0, spec.noise, canvas.rgb.shape), 0.0, 1.0)
    if spec.grayscale:
        img = img @ np.array([0.299, 0.587, 0.114])[:, None]
    img8 = np.round(img * 255.0).astype(np.uint8)
    name = f"scene_{index:06d}{spec.extension}"
    ann = Annotation(name, size, size, objects, scene_label_for([o.cls for o in objects]), failures)
    return RenderedScene(img8.transpose(2, 0, 1) / 255.0, ann, masks)


def synth_scene(spec: SceneSpec, index: int) -> tuple[np.ndarray, Annotation]:
    """``(image (C, H, W) in [0, 1], annotation)`` for scene ``index``."""
    r = render_scene(spec, index)
    return r.image, r.annotation


# ---------------------------------------------------------------------------
# PPM / PGM

def encode_pnm(img: np.ndarray) -> bytes:
    """Binary P6 for (H, W, 3) or P5 for (H, W) / (H, W, 1) uint8 arrays."""
    img = np.asarray(img)
    if img.dtype != np.uint8:
        raise PnmFormatError(f"expected uint8 pixels, got {img.dtype}")
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise PnmFormatError(f"unsupported pixel array shape {img.shape}")
    h, w = img.shape[:2]
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img).tobytes()


def decode_pnm(data: bytes) -> np.ndarray:
    """Parse binary PPM/PGM bytes into an (H, W, C) uint8 array."""
    if len(data) < 2 or data[:2] not in (b"P5", b"P6"):
        raise PnmFormatError(f"bad magic {data[:2]!r}, expected P5 or P6")
    channels = 3 if data[:2] == b"P6" else 1
    fields: list[int] = []
    pos = 2
    n = len(data)
    while len(fields) < 3:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and data[pos:pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise PnmFormatError("truncated or non-numeric header")
        fields.append(int(data[start:pos]))
    if pos >= n or not data[pos:pos + 1].isspace():
        raise PnmFormatError("missing whitespace after header")
    pos += 1
    w, h, maxval = fields
    if w <= 0 or h <= 0 or not 0 < maxval < 256:
        raise PnmFormatError(f"unsupported header: {w}x{h}, maxval {maxval}")
    need = w * h * channels
    if n - pos < need:
        raise PnmFormatError(f"payload has {n - pos} bytes, need {need}")
    arr = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos).reshape(h, w, channels)
    if maxval != 255:
        arr = np.round(arr.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    return arr.copy()


def read_image(path) -> np.ndarray:
    """Image file as (C, H, W) floats in [0, 1]."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from None
    try:
        return decode_pnm(raw).transpose(2, 0, 1) / 255.0
    except PnmFormatError as exc:
        raise PnmFormatError(f"{path}: {exc}") from None


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(C, H, W) floats in [0, 1] -> (H, W, C) uint8."""
    return np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8).transpose(1, 2, 0)


def write_image(path, image: np.ndarray) -> None:
    Path(path).write_bytes(encode_pnm(to_uint8(image)))


# ---------------------------------------------------------------------------
# datasets on disk

MANIFEST_NAME = "manifest.ndjson"


def synth_dataset(spec: SceneSpec, n: int, out_dir, start: int = 0) -> Path:
    """Render scenes ``start .. start+n-1`` into ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        lines = []
        for index in range(start, start + n):
            r = render_scene(spec, index)
            write_image(out / r.annotation.image, r.image)
            lines.append(json.dumps(r.annotation.to_json(), separators=(", ", ": ")))
        manifest = out / MANIFEST_NAME
        manifest.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{exc.filename or out}: {exc.strerror}") from None
    return manifest


def load_dataset(manifest) -> list[tuple[np.ndarray, Annotation]]:
    manifest = Path(manifest)
    try:
        text = manifest.read_text(encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{manifest}: {exc.strerror}") from None
    items = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            ann = Annotation.from_json(json.loads(line))
        except (json.JSONDecodeError, DataError) as exc:
            raise DataError(f"{manifest}:{lineno}: {exc}") from None
        image = read_image(manifest.parent / ann.image)
        if image.shape[1:] != (ann.height, ann.width):
            raise DataError(f"{manifest}:{lineno}: image is {image.shape[2]}x{image.shape[1]}, "
                            f"annotation says {ann.width}x{ann.height}")
        items.append((image, ann))
    return items


def generate_split(spec: SceneSpec, start: int, n: int) -> list[tuple[np.ndarray, Annotation]]:
    """In-memory equivalent of ``load_dataset(synth_dataset(...))``."""
    return [synth_scene(spec, i) for i in range(start, start + n)]
