"""Binary feature cache.

File layout (little-endian)::

    b"MQEV"  u16 version
    u16 len + utf-8 encoder_id
    u16 len + utf-8 clip_id
    u32 L, u32 d, f32 frame_rate
    L*d f32 row-major payload
    u32 CRC32 of payload

Files live at ``<root>/<encoder_id>/layer<k>/<preproc-fingerprint>/<clip_id>.mqev``
and are written to a temporary name then renamed, so readers never see a
partial file.
"""

from __future__ import annotations

import os
import re
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .encoder import FeatureMatrix
from .errors import CacheIntegrityError

MAGIC = b"MQEV"
VERSION = 1
_SAFE = re.compile(r"[^A-Za-z0-9._-]")


def _safe(name: str) -> str:
    cleaned = _SAFE.sub("_", name)
    if cleaned != name:
        cleaned += "-" + f"{zlib.crc32(name.encode('utf-8')):08x}"
    return cleaned


def cache_path(root: str | Path, clip_id: str, encoder_id: str, layer: int = -1, fingerprint: str = "raw") -> Path:
    return Path(root) / _safe(encoder_id) / f"layer{layer}" / fingerprint / f"{_safe(clip_id)}.mqev"


def encode(features: FeatureMatrix) -> bytes:
    enc = features.encoder_id.encode("utf-8")
    cid = features.clip_id.encode("utf-8")
    L, d = features.frames.shape
    payload = features.frames.astype("<f4").tobytes(order="C")
    return b"".join([
        MAGIC,
        struct.pack("<H", VERSION),
        struct.pack("<H", len(enc)), enc,
        struct.pack("<H", len(cid)), cid,
        struct.pack("<IIf", L, d, features.frame_rate),
        payload,
        struct.pack("<I", zlib.crc32(payload)),
    ])


def decode(blob: bytes, source: str = "<bytes>") -> FeatureMatrix:
    def fail(why: str) -> CacheIntegrityError:
        return CacheIntegrityError(f"{source}: {why}")

    if len(blob) < 6 or blob[:4] != MAGIC:
        raise fail("bad magic")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise fail(f"unsupported version {version}")
    pos = 6
    try:
        strings = []
        for _ in range(2):
            (n,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            raw = blob[pos : pos + n]
            if len(raw) != n:
                raise fail("truncated header")
            strings.append(raw.decode("utf-8"))
            pos += n
        L, d, rate = struct.unpack_from("<IIf", blob, pos)
        pos += 12
    except struct.error:
        raise fail("truncated header") from None
    size = 4 * L * d
    if len(blob) != pos + size + 4:
        raise fail(f"length {len(blob)} does not match header (expected {pos + size + 4})")
    payload = blob[pos : pos + size]
    (crc,) = struct.unpack_from("<I", blob, pos + size)
    if zlib.crc32(payload) != crc:
        raise fail("payload CRC mismatch")
    frames = np.frombuffer(payload, dtype="<f4").reshape(L, d).astype(np.float32)
    return FeatureMatrix(frames, float(rate), strings[0], strings[1])


def cache_put(features: FeatureMatrix, root: str | Path, layer: int = -1, fingerprint: str = "raw") -> Path:
    path = cache_path(root, features.clip_id, features.encoder_id, layer, fingerprint)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".mqev")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(encode(features))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def cache_get(
    clip_id: str, encoder_id: str, root: str | Path, layer: int = -1, fingerprint: str = "raw"
) -> FeatureMatrix | None:
    path = cache_path(root, clip_id, encoder_id, layer, fingerprint)
    try:
        blob = path.read_bytes()
    except FileNotFoundError:
        return None
    fm = decode(blob, str(path))
    if fm.clip_id != clip_id or fm.encoder_id != encoder_id:
        raise CacheIntegrityError(
            f"{path}: header names ({fm.encoder_id}, {fm.clip_id}), expected ({encoder_id}, {clip_id})"
        )
    return fm


class FeatureCache:
    """Cache handle bound to one (root, encoder, layer, preprocessing) key space."""

    def __init__(self, root: str | Path | None, encoder_id: str, layer: int = -1, fingerprint: str = "raw"):
        self.root = Path(root) if root is not None else None
        self.encoder_id = encoder_id
        self.layer = layer
        self.fingerprint = fingerprint

    @property
    def enabled(self) -> bool:
        return self.root is not None

    def get(self, clip_id: str) -> FeatureMatrix | None:
        if self.root is None:
            return None
        return cache_get(clip_id, self.encoder_id, self.root, self.layer, self.fingerprint)

    def put(self, features: FeatureMatrix) -> Path | None:
        if self.root is None:
            return None
        return cache_put(features, self.root, self.layer, self.fingerprint)

    def __contains__(self, clip_id: str) -> bool:
        return self.root is not None and cache_path(
            self.root, clip_id, self.encoder_id, self.layer, self.fingerprint
        ).is_file()
