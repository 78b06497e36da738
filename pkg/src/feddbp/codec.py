"""Little-endian binary framing for round messages.

Layout::

    b"FDBP" | version:u16 | direction:u8 | round:u32 | section*

Every section is ``length:u32`` followed by ``length`` body bytes.  Upload
messages carry the sections ``client, prototypes, scores, n_k``; download
messages carry ``client, prototypes``.

* client      -- ``client_id:u32``
* prototypes  -- ``kind:u8 | C:u32 | d:u32 | coverage bitmap | C*d f64``
* scores      -- ``C:u32 | d:u32 | coverage bitmap | C counts:u64 | C*d f64``
* n_k         -- ``u64``

Coverage bitmaps use ``ceil(C/8)`` bytes, bit ``c % 8`` of byte ``c // 8``.
Matrices are row-major; absent rows are written as zeros.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Union

import numpy as np

from .client import ClientUpload
from .errors import CodecError
from .prototypes import ImportanceScores, PrototypeKind, PrototypeSet

MAGIC = b"FDBP"
VERSION = 1
_HEADER = struct.Struct("<4sHBI")
_U32 = struct.Struct("<I")
_U64 = struct.Struct("<Q")


class Direction(IntEnum):
    UPLOAD = 0
    DOWNLOAD = 1


@dataclass(frozen=True)
class Download:
    client_id: int
    prototypes: PrototypeSet


@dataclass(frozen=True)
class RoundMessage:
    direction: Direction
    round_index: int
    payload: Union[ClientUpload, Download]

    def __post_init__(self):
        expected = ClientUpload if self.direction == Direction.UPLOAD else Download
        if not isinstance(self.payload, expected):
            raise TypeError(f"{self.direction.name} message needs a {expected.__name__} payload")


def _bitmap(mask: np.ndarray) -> bytes:
    return np.packbits(mask.astype(np.uint8), bitorder="little").tobytes()


def _section(body: bytes) -> bytes:
    return _U32.pack(len(body)) + body


def _encode_prototypes(p: PrototypeSet) -> bytes:
    C, d = p.vectors.shape
    return (struct.pack("<BII", p.kind.value, C, d) + _bitmap(p.present)
            + np.ascontiguousarray(p.vectors, dtype="<f8").tobytes())


def _encode_scores(s: ImportanceScores) -> bytes:
    C, d = s.scores.shape
    return (struct.pack("<II", C, d) + _bitmap(s.present)
            + np.ascontiguousarray(s.counts, dtype="<u8").tobytes()
            + np.ascontiguousarray(s.scores, dtype="<f8").tobytes())


def encode(msg: RoundMessage) -> bytes:
    out = [_HEADER.pack(MAGIC, VERSION, int(msg.direction), int(msg.round_index))]
    p = msg.payload
    out.append(_section(_U32.pack(p.client_id)))
    out.append(_section(_encode_prototypes(p.prototypes)))
    if msg.direction == Direction.UPLOAD:
        out.append(_section(_encode_scores(p.scores)))
        out.append(_section(_U64.pack(p.n_k)))
    return b"".join(out)


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = memoryview(buf)
        self.pos = 0
        self.base = 0
        self.name = None

    def take(self, n: int, section: str | None, what: str) -> memoryview:
        if self.pos + n > len(self.buf):
            raise CodecError(f"truncated payload: needed {n} bytes for {what}, "
                             f"{len(self.buf) - self.pos} left", self.base + self.pos, section)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def section(self, name: str) -> "_Reader":
        start = self.pos
        (length,) = _U32.unpack(self.take(4, name, "section length"))
        body = _Reader(bytes(self.take(length, name, "section body")))
        body.base = start + 4
        body.name = name
        return body


def _finish(r: _Reader) -> None:
    if r.pos != len(r.buf):
        raise CodecError(f"{len(r.buf) - r.pos} unexpected trailing bytes", r.base + r.pos, r.name)


def _bitmap_from(r: _Reader, C: int, name: str) -> np.ndarray:
    raw = np.frombuffer(r.take((C + 7) // 8, name, "coverage bitmap"), dtype=np.uint8)
    return np.unpackbits(raw, bitorder="little")[:C].astype(bool)


def _matrix(r: _Reader, C: int, d: int, name: str) -> np.ndarray:
    raw = r.take(8 * C * d, name, "matrix")
    return np.frombuffer(raw, dtype="<f8").reshape(C, d).astype(np.float64)


def _decode_prototypes(r: _Reader) -> PrototypeSet:
    kind, C, d = struct.unpack("<BII", r.take(9, "prototypes", "matrix header"))
    try:
        kind = PrototypeKind(kind)
    except ValueError:
        raise CodecError(f"unknown prototype kind {kind}", r.base, "prototypes") from None
    present = _bitmap_from(r, C, "prototypes")
    vectors = _matrix(r, C, d, "prototypes")
    _finish(r)
    return PrototypeSet(vectors, present, kind)


def _decode_scores(r: _Reader) -> ImportanceScores:
    C, d = struct.unpack("<II", r.take(8, "scores", "matrix header"))
    present = _bitmap_from(r, C, "scores")
    counts = np.frombuffer(r.take(8 * C, "scores", "class counts"), dtype="<u8").astype(np.int64)
    scores = _matrix(r, C, d, "scores")
    _finish(r)
    if not np.array_equal(present, counts > 0):
        raise CodecError("coverage bitmap disagrees with class counts", r.base, "scores")
    return ImportanceScores(scores, counts)


def decode(data: bytes) -> RoundMessage:
    r = _Reader(bytes(data))
    magic, version, direction, round_index = _HEADER.unpack(r.take(_HEADER.size, "header", "header"))
    if magic != MAGIC:
        raise CodecError(f"bad magic {bytes(magic)!r}", 0, "header")
    if version != VERSION:
        raise CodecError(f"unsupported version {version} (expected {VERSION})", 4, "header")
    try:
        direction = Direction(direction)
    except ValueError:
        raise CodecError(f"unknown direction {direction}", 6, "header") from None

    sec = r.section("client")
    (client_id,) = _U32.unpack(sec.take(4, "client", "client id"))
    _finish(sec)
    protos = _decode_prototypes(r.section("prototypes"))
    if direction == Direction.UPLOAD:
        scores = _decode_scores(r.section("scores"))
        sec = r.section("n_k")
        (n_k,) = _U64.unpack(sec.take(8, "n_k", "sample count"))
        _finish(sec)
        payload = ClientUpload(client_id, protos, scores, n_k)
    else:
        payload = Download(client_id, protos)
    _finish(r)
    return RoundMessage(direction, round_index, payload)
