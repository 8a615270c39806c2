"""Versioned binary caches for features, models and distance matrices.

Every record is: magic, format version, config fingerprint, payload,
CRC32. A fingerprint mismatch means the cache was produced under a
different feature configuration or pipeline version and is rejected
rather than silently reused.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
import zlib
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .features import MfccConfig, MfccMatrix
from .gaussian import GaussianModel
from .mutual_proximity import DistanceKind, DistanceMatrix

PIPELINE_VERSION = 1
FORMAT_VERSION = 1

MAGIC_FEATURES = b"HRFC"
MAGIC_MODELS = b"HRGM"
MAGIC_DISTANCE = b"HRDM"


class CacheError(Exception):
    """Cache record unreadable, corrupt, or of the wrong format."""


class StaleCacheError(CacheError):
    """Cache was written under a different configuration fingerprint."""


def config_fingerprint(cfg: MfccConfig) -> str:
    blob = json.dumps({"mfcc": asdict(cfg), "pipeline": PIPELINE_VERSION}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _read_str(buf: io.BytesIO) -> str:
    (length,) = struct.unpack("<I", buf.read(4))
    return buf.read(length).decode("utf-8")


def _write_record(path: Path, magic: bytes, fingerprint: str, payload: bytes) -> None:
    body = struct.pack("<I", FORMAT_VERSION) + _pack_str(fingerprint) + payload
    crc = zlib.crc32(body) & 0xFFFFFFFF
    path.write_bytes(magic + body + struct.pack("<I", crc))


def _read_record(path: Path, magic: bytes, expect_fingerprint: str | None) -> io.BytesIO:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CacheError(f"cannot read cache file {path}: {exc}") from exc
    if len(raw) < 12 or raw[:4] != magic:
        raise CacheError(f"{path}: wrong or missing magic bytes")
    body, (crc,) = raw[4:-4], struct.unpack("<I", raw[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc:
        raise CacheError(f"{path}: checksum mismatch")
    buf = io.BytesIO(body)
    (version,) = struct.unpack("<I", buf.read(4))
    if version != FORMAT_VERSION:
        raise CacheError(f"{path}: unsupported format version {version}")
    fingerprint = _read_str(buf)
    if expect_fingerprint is not None and fingerprint != expect_fingerprint:
        raise StaleCacheError(f"{path}: cache fingerprint does not match the configuration")
    return buf


def write_features(path: str | Path, feats: MfccMatrix, fingerprint: str) -> None:
    t, n_mfcc = feats.frames.shape
    payload = _pack_str(feats.clip_id) + struct.pack("<II", t, n_mfcc)
    payload += np.ascontiguousarray(feats.frames).tobytes()
    _write_record(Path(path), MAGIC_FEATURES, fingerprint, payload)


def read_features(path: str | Path, expect_fingerprint: str | None = None) -> MfccMatrix:
    buf = _read_record(Path(path), MAGIC_FEATURES, expect_fingerprint)
    clip_id = _read_str(buf)
    t, n_mfcc = struct.unpack("<II", buf.read(8))
    frames = np.frombuffer(buf.read(t * n_mfcc * 8), dtype=np.float64).reshape(t, n_mfcc)
    return MfccMatrix(frames, clip_id)


def write_models(path: str | Path, models: list[GaussianModel], fingerprint: str) -> None:
    parts = [struct.pack("<I", len(models))]
    for model in models:
        parts.append(_pack_str(model.clip_id))
        parts.append(struct.pack("<I", model.dim))
        parts.append(np.ascontiguousarray(model.mean).tobytes())
        parts.append(np.ascontiguousarray(model.cov).tobytes())
    _write_record(Path(path), MAGIC_MODELS, fingerprint, b"".join(parts))


def read_models(path: str | Path, expect_fingerprint: str | None = None) -> list[GaussianModel]:
    buf = _read_record(Path(path), MAGIC_MODELS, expect_fingerprint)
    (count,) = struct.unpack("<I", buf.read(4))
    models = []
    for _ in range(count):
        clip_id = _read_str(buf)
        (dim,) = struct.unpack("<I", buf.read(4))
        mean = np.frombuffer(buf.read(dim * 8), dtype=np.float64)
        cov = np.frombuffer(buf.read(dim * dim * 8), dtype=np.float64).reshape(dim, dim)
        models.append(GaussianModel(mean, cov, clip_id))
    return models


def write_distance(path: str | Path, d: DistanceMatrix, fingerprint: str) -> None:
    payload = [struct.pack("<I", d.n), _pack_str(d.kind.value)]
    payload.extend(_pack_str(clip_id) for clip_id in d.ids)
    payload.append(np.ascontiguousarray(d.values).tobytes())
    _write_record(Path(path), MAGIC_DISTANCE, fingerprint, b"".join(payload))


def read_distance(path: str | Path, expect_fingerprint: str | None = None) -> DistanceMatrix:
    buf = _read_record(Path(path), MAGIC_DISTANCE, expect_fingerprint)
    (n,) = struct.unpack("<I", buf.read(4))
    kind = DistanceKind(_read_str(buf))
    ids = tuple(_read_str(buf) for _ in range(n))
    values = np.frombuffer(buf.read(n * n * 8), dtype=np.float64).reshape(n, n)
    return DistanceMatrix(values, ids, kind)
