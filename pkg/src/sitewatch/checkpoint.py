"""Binary checkpoint format.

Layout::

    b"DEEVA1"
    uint64 LE   header length in bytes
    header      UTF-8 JSON: format_version, seed, config, manifest, payload_bytes
    zero padding up to an 8-byte boundary
    payload     little-endian float64 values; manifest offsets are relative to here
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .model import ConfigError, Model, ModelConfig

MAGIC = b"DEEVA1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class HeaderError(CheckpointError):
    pass


class TruncatedError(CheckpointError):
    """The file ends before the declared header or payload length."""


class ManifestBoundsError(CheckpointError):
    pass


class ManifestOverlapError(CheckpointError):
    pass


class ManifestMismatchError(CheckpointError):
    """Manifest entries do not match the parameters the config implies."""


def save(m: Model) -> bytes:
    manifest, chunks = [], []
    offset = 0
    for name, p in m.params.items():
        raw = np.ascontiguousarray(p.data, dtype="<f8").tobytes()
        manifest.append({"name": name, "shape": list(p.shape), "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "seed": m.seed,
        "config": m.cfg.to_dict(),
        "manifest": manifest,
        "payload_bytes": offset,
    }, sort_keys=True).encode("utf-8")
    head = MAGIC + struct.pack("<Q", len(header)) + header
    pad = (-len(head)) % 8
    return head + b"\0" * pad + b"".join(chunks)


def load(blob: bytes) -> Model:
    if blob[:len(MAGIC)] != MAGIC:
        raise BadMagicError(f"not a checkpoint (magic {blob[:len(MAGIC)]!r})")
    pos = len(MAGIC)
    if len(blob) < pos + 8:
        raise TruncatedError("file ends inside the header length field")
    (hlen,) = struct.unpack_from("<Q", blob, pos)
    pos += 8
    if len(blob) < pos + hlen:
        raise TruncatedError(f"header declares {hlen} bytes, only {len(blob) - pos} present")
    try:
        header = json.loads(blob[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"unreadable header: {exc}") from None
    pos += hlen
    pos += (-pos) % 8

    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"checkpoint format {version!r}, this build reads {FORMAT_VERSION}")
    try:
        cfg = ModelConfig.from_dict(header["config"])
        payload_bytes = int(header["payload_bytes"])
        manifest = [(str(e["name"]), tuple(int(s) for s in e["shape"]), int(e["offset"])) for e in header["manifest"]]
        seed = int(header.get("seed", 0))
    except ConfigError as exc:
        raise HeaderError(f"invalid model config: {exc}") from None
    except (KeyError, TypeError, ValueError) as exc:
        raise HeaderError(f"malformed header: {exc!r}") from None

    spans = []
    for name, shape, offset in manifest:
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset < 0 or offset % 8 or offset + nbytes > payload_bytes:
            raise ManifestBoundsError(f"{name}: bytes [{offset}, {offset + nbytes}) outside payload of {payload_bytes}")
        spans.append((offset, offset + nbytes, name))
    spans.sort()
    for (s0, e0, n0), (s1, e1, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise ManifestOverlapError(f"{n0} [{s0}, {e0}) overlaps {n1} [{s1}, {e1})")

    available = len(blob) - pos
    if available < payload_bytes:
        raise TruncatedError(f"payload has {available} bytes, header declares {payload_bytes}")

    m = Model(cfg, seed)
    expected = {n: p.shape for n, p in m.params.items()}
    got = {n: s for n, s, _ in manifest}
    if expected != got:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        wrong = sorted(n for n in set(expected) & set(got) if expected[n] != got[n])
        raise ManifestMismatchError(f"missing {missing}, unexpected {extra}, wrong shape {wrong}")
    for name, shape, offset in manifest:
        count = int(np.prod(shape, dtype=np.int64))
        m.params[name].data = np.frombuffer(blob, dtype="<f8", count=count, offset=pos + offset).astype(np.float64).reshape(shape)
    return m


def save_file(m: Model, path) -> None:
    Path(path).write_bytes(save(m))


def load_file(path) -> Model:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"{path}: {exc.strerror}") from None
    return load(blob)
