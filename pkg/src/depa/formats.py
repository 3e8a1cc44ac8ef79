"""Binary containers shared across stages.

Spectrogram block::

    b"SPEC" | version u32 | S u32 | F u32 | S*F float32 (row-major, little endian)

Named-array container (encoder-decoder and detector checkpoints)::

    b"DEPA" | version u32 | section tag (4 bytes) | meta length u32 | meta JSON
    | n_arrays u32 | per array: name length u32, name, rank u32, dims u32*rank, float32 data
    | crc32 u32 of everything before it

Embedding file: sequence of ``response_index u32 | dim u32 | dim float32``.
"""

from __future__ import annotations

import io
import json
import struct
import zlib
from typing import BinaryIO, Dict, Iterator, List, Tuple

import numpy as np

SPEC_MAGIC = b"SPEC"
SPEC_VERSION = 1
CONTAINER_MAGIC = b"DEPA"
CONTAINER_VERSION = 1

_U32 = struct.Struct("<I")


class FormatError(ValueError):
    pass


def _read_exact(f: BinaryIO, n: int) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError("truncated file")
    return buf


def _read_u32(f: BinaryIO) -> int:
    return _U32.unpack(_read_exact(f, 4))[0]


def _write_str(f: BinaryIO, s: str) -> None:
    raw = s.encode("utf-8")
    f.write(_U32.pack(len(raw)))
    f.write(raw)


def _read_str(f: BinaryIO) -> str:
    return _read_exact(f, _read_u32(f)).decode("utf-8")


def write_matrix(f: BinaryIO, m: np.ndarray) -> None:
    m = np.asarray(m)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    f.write(SPEC_MAGIC)
    f.write(struct.pack("<III", SPEC_VERSION, m.shape[0], m.shape[1]))
    f.write(np.ascontiguousarray(m, dtype="<f4").tobytes())


def read_matrix(f: BinaryIO) -> np.ndarray:
    if _read_exact(f, 4) != SPEC_MAGIC:
        raise FormatError("bad spectrogram block magic")
    version, s, n_feat = struct.unpack("<III", _read_exact(f, 12))
    if version != SPEC_VERSION:
        raise FormatError(f"unsupported spectrogram block version {version}")
    data = _read_exact(f, 4 * s * n_feat)
    return np.frombuffer(data, dtype="<f4").reshape(s, n_feat).astype(np.float32)


def save_matrix(path, m: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_matrix(f, m)


def load_matrix(path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_matrix(f)


# training-pair archive -------------------------------------------------------

def write_pairs(f: BinaryIO, samples) -> int:
    n = 0
    for s in samples:
        _write_str(f, s.clip_id)
        f.write(_U32.pack(s.sample_index))
        write_matrix(f, s.context)
        write_matrix(f, s.center)
        n += 1
    return n


def iter_pairs(f: BinaryIO) -> Iterator[Tuple[str, int, np.ndarray, np.ndarray]]:
    while True:
        head = f.read(4)
        if not head:
            return
        if len(head) != 4:
            raise FormatError("truncated file")
        clip_id = _read_exact(f, _U32.unpack(head)[0]).decode("utf-8")
        index = _read_u32(f)
        yield clip_id, index, read_matrix(f), read_matrix(f)


def pairs_to_bytes(samples) -> bytes:
    buf = io.BytesIO()
    write_pairs(buf, samples)
    return buf.getvalue()


# named-array container -------------------------------------------------------

def write_container(f: BinaryIO, section: bytes, meta: dict, arrays: Dict[str, np.ndarray]) -> None:
    if len(section) != 4:
        raise ValueError("section tag must be 4 bytes")
    buf = io.BytesIO()
    buf.write(CONTAINER_MAGIC)
    buf.write(_U32.pack(CONTAINER_VERSION))
    buf.write(section)
    _write_str(buf, json.dumps(meta, sort_keys=True))
    buf.write(_U32.pack(len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        _write_str(buf, name)
        buf.write(_U32.pack(arr.ndim))
        for d in arr.shape:
            buf.write(_U32.pack(d))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    payload = buf.getvalue()
    f.write(payload)
    f.write(_U32.pack(zlib.crc32(payload)))


def read_container(f: BinaryIO, section: bytes | None = None) -> Tuple[bytes, dict, Dict[str, np.ndarray]]:
    raw = f.read()
    if len(raw) < 4 or raw[:4] != CONTAINER_MAGIC:
        raise FormatError("bad checkpoint")
    if len(raw) < 16:
        raise FormatError("truncated file")
    body, crc = raw[:-4], _U32.unpack(raw[-4:])[0]
    g = io.BytesIO(body)
    g.read(4)
    version = _read_u32(g)
    if version != CONTAINER_VERSION:
        raise FormatError(f"checkpoint version {version} not supported (expected {CONTAINER_VERSION})")
    tag = _read_exact(g, 4)
    if section is not None and tag != section:
        raise FormatError(f"checkpoint section {tag!r}, expected {section!r}")
    meta = json.loads(_read_str(g))
    arrays: Dict[str, np.ndarray] = {}
    for _ in range(_read_u32(g)):
        name = _read_str(g)
        shape = tuple(_read_u32(g) for _ in range(_read_u32(g)))
        count = int(np.prod(shape)) if shape else 1
        arrays[name] = np.frombuffer(_read_exact(g, 4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if g.read(1):
        raise FormatError("trailing bytes in checkpoint")
    if zlib.crc32(body) != crc:
        raise FormatError("checkpoint checksum mismatch")
    return tag, meta, arrays


# embedding records -----------------------------------------------------------

def write_embeddings(path, vectors: List[np.ndarray], indices: List[int] | None = None) -> None:
    indices = list(range(len(vectors))) if indices is None else list(indices)
    with open(path, "wb") as f:
        for idx, v in zip(indices, vectors):
            v = np.asarray(v, dtype="<f4").reshape(-1)
            f.write(struct.pack("<II", idx, v.size))
            f.write(v.tobytes())


def read_embeddings(path) -> Tuple[List[int], np.ndarray]:
    indices, rows = [], []
    with open(path, "rb") as f:
        while True:
            head = f.read(8)
            if not head:
                break
            if len(head) != 8:
                raise FormatError("truncated file")
            idx, dim = struct.unpack("<II", head)
            indices.append(idx)
            rows.append(np.frombuffer(_read_exact(f, 4 * dim), dtype="<f4").astype(np.float32))
    if not rows:
        return indices, np.zeros((0, 0), dtype=np.float32)
    return indices, np.stack(rows)


def load_frame_features(path) -> np.ndarray:
    """Frame-level feature matrix from a headerless CSV or a SPEC block file."""
    with open(path, "rb") as f:
        head = f.read(4)
    if head == SPEC_MAGIC:
        return load_matrix(path).astype(np.float64)
    # genfromtxt maps empty cells and "nan" to NaN; cleaning happens at pooling time
    return np.genfromtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
