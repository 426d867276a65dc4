"""Shard files of edit triplets, clip extraction and source mixing.

Shard layout (all little-endian)::

    header   "EVD1" | u32 version=1 | u64 record_count
    record   u32 instruction_len | utf-8 bytes
             u32 T, C, H, W | f32[T*C*H*W] video_in
             u32 T, C, H, W | f32[T*C*H*W] video_out
             u8 source_tag (0 image_synth, 1 openworld) | u64 seed
             u32 crc32(record body above)
"""
from __future__ import annotations

import struct
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

from .augment import EditTriplet, SOURCE_TAGS
from .numkit import GOLDEN_GAMMA, MASK64, Rng, splitmix64

MAGIC = b"EVD1"
VERSION = 1
HEADER = struct.Struct("<4sIQ")
MAX_INSTRUCTION_BYTES = 4096

# nominal frame-rate -> stride over the source clip
FPS_TO_STRIDE = {8: 1, 6: 2, 4: 3}


class CorruptShardError(ValueError):
    def __init__(self, message: str, record: int | None = None):
        super().__init__(message if record is None else f"record {record}: {message}")
        self.record = record


def derive_seed(master: int, index: int) -> int:
    """Per-record seed: ``splitmix64(master ^ (index * 0x9E3779B97F4A7C15 mod 2**64))``."""
    return splitmix64((int(master) ^ ((int(index) * GOLDEN_GAMMA) & MASK64)) & MASK64)


# ---------------------------------------------------------------------------
# encoding


def encode_record(rec: EditTriplet) -> bytes:
    text = rec.instruction.encode("utf-8")
    if len(text) > MAX_INSTRUCTION_BYTES:
        raise ValueError(f"instruction is {len(text)} bytes, limit is {MAX_INSTRUCTION_BYTES}")
    for name, v in (("video_in", rec.video_in), ("video_out", rec.video_out)):
        if not np.all(np.isfinite(v)):
            raise ValueError(f"{name} contains non-finite pixels")
    parts = [struct.pack("<I", len(text)), text]
    for v in (rec.video_in, rec.video_out):
        parts.append(struct.pack("<4I", *v.shape))
        parts.append(np.ascontiguousarray(v, dtype="<f4").tobytes())
    parts.append(struct.pack("<BQ", SOURCE_TAGS.index(rec.source_tag), int(rec.seed)))
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, buf: memoryview, pos: int, index: int):
        self.buf, self.pos, self.index = buf, pos, index

    def take(self, n: int) -> memoryview:
        if self.pos + n > len(self.buf):
            raise CorruptShardError("truncated record", self.index)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def _decode_record(r: _Reader, check_crc: bool = True) -> tuple[EditTriplet | None, bool]:
    start = r.pos
    (n,) = r.unpack("<I")
    if n > MAX_INSTRUCTION_BYTES:
        raise CorruptShardError(f"instruction length {n} exceeds {MAX_INSTRUCTION_BYTES}", r.index)
    text = bytes(r.take(n))
    videos = []
    for _ in range(2):
        dims = r.unpack("<4I")
        count = int(np.prod(dims, dtype=np.int64))
        if min(dims) < 1:
            raise CorruptShardError(f"invalid video dims {dims}", r.index)
        raw = r.take(4 * count)
        videos.append(np.frombuffer(raw, dtype="<f4").astype(np.float32).reshape(dims))
    tag, seed = r.unpack("<BQ")
    body = r.buf[start:r.pos]
    (crc,) = r.unpack("<I")
    crc_ok = zlib.crc32(body) == crc
    if check_crc and not crc_ok:
        raise CorruptShardError("CRC mismatch", r.index)
    if tag >= len(SOURCE_TAGS):
        raise CorruptShardError(f"unknown source tag {tag}", r.index)
    try:
        instruction = text.decode("utf-8")
        rec = EditTriplet(videos[0], instruction, videos[1], SOURCE_TAGS[tag], seed)
    except ValueError as exc:
        if check_crc:
            raise CorruptShardError(str(exc), r.index) from exc
        return None, crc_ok
    return rec, crc_ok


# ---------------------------------------------------------------------------
# shard io


def write_shard(path: str | Path, records: Sequence[EditTriplet], workers: int = 1) -> int:
    """Write ``records`` in order; encoding may use ``workers`` threads, bytes do not change."""
    records = list(records)
    if workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            blobs = list(pool.map(encode_record, records))
    else:
        blobs = [encode_record(r) for r in records]
    with open(path, "wb") as fh:
        fh.write(HEADER.pack(MAGIC, VERSION, len(blobs)))
        for b in blobs:
            fh.write(b)
    return len(blobs)


def _open(path: str | Path) -> tuple[memoryview, int]:
    data = memoryview(Path(path).read_bytes())
    if len(data) < HEADER.size:
        raise CorruptShardError("file shorter than shard header")
    magic, version, count = HEADER.unpack(data[:HEADER.size])
    if magic != MAGIC:
        raise CorruptShardError(f"bad magic {bytes(magic)!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CorruptShardError(f"unsupported shard version {version}")
    return data, count


def read_shard(path: str | Path) -> list[EditTriplet]:
    data, count = _open(path)
    r = _Reader(data, HEADER.size, 0)
    out = []
    for i in range(count):
        r.index = i
        rec, _ = _decode_record(r)
        out.append(rec)
    if r.pos != len(data):
        raise CorruptShardError(f"{len(data) - r.pos} trailing bytes after {count} records")
    return out


@dataclass
class RecordStatus:
    index: int
    crc_ok: bool
    record: EditTriplet | None
    error: str | None = None


def scan_shard(path: str | Path) -> tuple[int, list[RecordStatus]]:
    """Read every record without aborting on CRC errors; used by ``inspect``."""
    data, count = _open(path)
    r = _Reader(data, HEADER.size, 0)
    statuses = []
    for i in range(count):
        r.index = i
        try:
            rec, ok = _decode_record(r, check_crc=False)
        except CorruptShardError as exc:
            statuses.append(RecordStatus(i, False, None, str(exc)))
            break
        statuses.append(RecordStatus(i, ok, rec, None if ok else "CRC mismatch"))
    return count, statuses


# ---------------------------------------------------------------------------
# parallel generation


def build_records(make: Callable[[int, int], EditTriplet], n: int, master_seed: int,
                  workers: int = 1) -> list[EditTriplet]:
    """Call ``make(index, derive_seed(master_seed, index))`` for each index.

    Results are placed by index, so the output does not depend on ``workers``.
    """
    seeds = [derive_seed(master_seed, i) for i in range(n)]
    if workers <= 1:
        return [make(i, s) for i, s in enumerate(seeds)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(make, range(n), seeds))


# ---------------------------------------------------------------------------
# clips


@dataclass(frozen=True)
class ClipSpec:
    start: int = 0
    stride: int = 1
    clip_len: int = 8

    def indices(self) -> list[int]:
        return [self.start + i * self.stride for i in range(self.clip_len)]

    def check(self, n_frames: int) -> None:
        if self.clip_len < 1 or self.stride < 1 or self.start < 0:
            raise ValueError(f"invalid clip spec {self}")
        last = self.start + (self.clip_len - 1) * self.stride
        if last >= n_frames:
            raise IndexError(f"clip needs frame {last} but source has {n_frames}")


def extract_clip(video: np.ndarray, spec: ClipSpec) -> np.ndarray:
    spec.check(len(video))
    return video[spec.indices()]


def extract_triplet_clip(rec: EditTriplet, spec: ClipSpec) -> EditTriplet:
    """Same ``(start, stride)`` applied to both videos."""
    return EditTriplet(extract_clip(rec.video_in, spec), rec.instruction, extract_clip(rec.video_out, spec),
                       rec.source_tag, rec.seed)


def sample_clip_spec(rng: Rng, n_frames: int, clip_len: int = 8,
                     strides: Sequence[int] = tuple(FPS_TO_STRIDE.values())) -> ClipSpec:
    """Pick a stride among those that fit, then a uniform start."""
    fitting = [s for s in strides if (clip_len - 1) * s < n_frames]
    if not fitting:
        raise IndexError(f"no stride in {list(strides)} fits a {clip_len}-frame clip in {n_frames} frames")
    stride = fitting[rng.integers(len(fitting))]
    start = rng.integers(n_frames - (clip_len - 1) * stride)
    return ClipSpec(start, stride, clip_len)


# ---------------------------------------------------------------------------
# mixing


@dataclass
class MixedSampler:
    """Infinite stream of ``(label, record)`` drawn from two sources at ``a:b``.

    Label 0 is ``source_a``.  Each draw consumes one Bernoulli uniform then one
    index uniform from the sampler's own generator.
    """

    source_a: Sequence
    source_b: Sequence
    ratio: tuple[int, int] = (5, 1)
    seed: int = 0
    _rng: Rng = field(init=False, repr=False)

    def __post_init__(self):
        a, b = self.ratio
        if a < 1 or b < 1:
            raise ValueError(f"ratio components must be >= 1, got {a}:{b}")
        if len(self.source_a) == 0 or len(self.source_b) == 0:
            raise ValueError("both sources must be non-empty")
        self._p_a = a / (a + b)
        self._rng = Rng(self.seed)

    def draw(self):
        label = 0 if self._rng.random() < self._p_a else 1
        src = self.source_a if label == 0 else self.source_b
        return label, src[self._rng.integers(len(src))]

    def __iter__(self) -> Iterator:
        while True:
            yield self.draw()


def mixed_sampler(source_a: Sequence, source_b: Sequence, ratio_a_to_b: tuple[int, int] = (5, 1),
                  seed: int = 0) -> Iterator:
    return iter(MixedSampler(source_a, source_b, tuple(ratio_a_to_b), seed))


def parse_ratio(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(":"))
    except ValueError:
        raise ValueError(f"ratio must look like A:B, got {text!r}") from None
    if a < 1 or b < 1:
        raise ValueError(f"ratio components must be >= 1, got {text!r}")
    return a, b
