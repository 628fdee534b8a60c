"""Versioned little-endian binary formats and the plain-text prediction format.

PKDW (parameters)::

    b"PKDW" | u32 version | u32 count
    per parameter: u32 name_len | name (UTF-8) | u32 rank | u64 dims[rank] | f64 values

PKDV (dataset)::

    b"PKDV" | u32 version | u32 n_videos
    per video: u32 id | u32 L | u32 raw_dim | u16 labels[L] | f64 frames[L*raw_dim]

PKDF (features)::

    b"PKDF" | u32 version | u32 n_videos
    per video: u32 id | u32 L | u32 feature_dim | f64 features[L*feature_dim]

Predictions: one line per video, ``video_id,label label label ...``.
"""
from __future__ import annotations

import io
import struct
from pathlib import Path
from typing import BinaryIO, Iterable

import numpy as np

from .errors import FormatError
from .nn import ParameterSet

VERSION = 1


def _read(f: BinaryIO, n: int) -> bytes:
    b = f.read(n)
    if len(b) != n:
        raise FormatError("unexpected end of file")
    return b


def _u32(f) -> int:
    return struct.unpack("<I", _read(f, 4))[0]


def _f64(f, count: int) -> np.ndarray:
    return np.frombuffer(_read(f, 8 * count), dtype="<f8").astype(np.float64)


def _header(f: BinaryIO, magic: bytes) -> int:
    got = _read(f, 4)
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    version = _u32(f)
    if version != VERSION:
        raise FormatError(f"{magic.decode()} version {version} is not supported (this reader handles {VERSION})")
    return _u32(f)


# -- parameters ----------------------------------------------------------------
def params_to_bytes(params: ParameterSet) -> bytes:
    buf = io.BytesIO()
    buf.write(b"PKDW" + struct.pack("<II", VERSION, len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)) + raw)
        buf.write(struct.pack("<I", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}Q", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    return buf.getvalue()


def params_from_bytes(blob: bytes) -> ParameterSet:
    f = io.BytesIO(blob)
    count = _header(f, b"PKDW")
    out = ParameterSet()
    for _ in range(count):
        name = _read(f, _u32(f)).decode("utf-8")
        rank = _u32(f)
        dims = struct.unpack(f"<{rank}Q", _read(f, 8 * rank))
        n = int(np.prod(dims)) if rank else 1
        out.add(name, _f64(f, n).reshape(dims))
    return out


def save_params(path, params: ParameterSet) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> ParameterSet:
    return params_from_bytes(Path(path).read_bytes())


# -- datasets / features ------------------------------------------------------------
def write_dataset(path, videos) -> None:
    with open(path, "wb") as f:
        f.write(b"PKDV" + struct.pack("<II", VERSION, len(videos)))
        for v in videos:
            L, d = v.frames.shape
            f.write(struct.pack("<III", v.video_id, L, d))
            f.write(np.asarray(v.labels, dtype="<u2").tobytes())
            f.write(np.ascontiguousarray(v.frames, dtype="<f8").tobytes())


def read_dataset(path):
    from .data import VideoSample

    videos = []
    with open(path, "rb") as f:
        n = _header(f, b"PKDV")
        for _ in range(n):
            vid, L, d = struct.unpack("<III", _read(f, 12))
            labels = np.frombuffer(_read(f, 2 * L), dtype="<u2").astype(np.int64)
            frames = _f64(f, L * d).reshape(L, d)
            videos.append(VideoSample(vid, frames, labels))
    return videos


def write_features(path, items: Iterable[tuple[int, np.ndarray]]) -> None:
    items = list(items)
    with open(path, "wb") as f:
        f.write(b"PKDF" + struct.pack("<II", VERSION, len(items)))
        for vid, feats in items:
            L, d = feats.shape
            f.write(struct.pack("<III", vid, L, d))
            f.write(np.ascontiguousarray(feats, dtype="<f8").tobytes())


def read_features(path) -> list[tuple[int, np.ndarray]]:
    out = []
    with open(path, "rb") as f:
        n = _header(f, b"PKDF")
        for _ in range(n):
            vid, L, d = struct.unpack("<III", _read(f, 12))
            out.append((vid, _f64(f, L * d).reshape(L, d)))
    return out


# -- predictions ---------------------------------------------------------------
def write_predictions(path, preds: Iterable[tuple[int, np.ndarray]]) -> None:
    lines = [f"{vid}," + " ".join(str(int(c)) for c in labels) for vid, labels in preds]
    Path(path).write_text("\n".join(lines) + "\n")


def read_predictions(path) -> list[tuple[int, np.ndarray]]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        try:
            vid, rest = line.split(",", 1)
            out.append((int(vid), np.array([int(c) for c in rest.split()], dtype=np.int64)))
        except ValueError as exc:
            raise FormatError(f"{path}:{lineno}: malformed prediction line") from exc
    return out
