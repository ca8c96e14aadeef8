"""Bit-packed, disk-backed storage for binary frame sequences.

A single-photon camera emits one bit per pixel per exposure, at rates that
make byte-per-pixel storage (let alone decoded caches) infeasible. Frames
are therefore packed 8 pixels per byte, MSB first, rows padded to byte
boundaries, and read back through a memory map: random pixel access touches
exactly one byte, and uniform minibatch sampling never decodes more than the
requested batch.

File layout (little-endian):

    offset  size  field
    0       8     magic "QRFBIN01"
    8       4     u32 version (currently 1)
    12      4     u32 width
    16      4     u32 height
    20      8     u64 frame_count
    28      8     f64 frame_rate_hz
    36      8     f64 tau_s
    44      ...   payload: frame_count x height x ceil(width/8) bytes
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import InputError, StoreError
from . import rng as _rng

STORE_MAGIC = b"QRFBIN01"
STORE_VERSION = 1
HEADER_STRUCT = struct.Struct("<8sIIIQdd")
HEADER_SIZE = HEADER_STRUCT.size


@dataclass
class BinaryFrame:
    """One binary exposure: (height, width) array of {0, 1}."""

    bits: np.ndarray

    def __post_init__(self):
        self.bits = np.asarray(self.bits)
        if self.bits.ndim != 2:
            raise InputError("frame bits must be a 2-D array")
        if self.bits.dtype != np.uint8:
            if not np.isin(self.bits, (0, 1)).all():
                raise InputError("frame bits must be 0 or 1")
            self.bits = self.bits.astype(np.uint8)
        elif self.bits.size and self.bits.max() > 1:
            raise InputError("frame bits must be 0 or 1")

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass(frozen=True)
class DefectMask:
    """Dead pixels read constant 0; hot pixels read constant 1."""

    dead: np.ndarray
    hot: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "dead", np.asarray(self.dead, dtype=bool))
        object.__setattr__(self, "hot", np.asarray(self.hot, dtype=bool))
        if self.dead.shape != self.hot.shape:
            raise InputError("dead and hot masks must share a shape")
        if np.any(self.dead & self.hot):
            raise InputError("a pixel cannot be both dead and hot")

    @classmethod
    def empty(cls, shape) -> "DefectMask":
        return cls(np.zeros(shape, dtype=bool), np.zeros(shape, dtype=bool))

    @property
    def any_defect(self) -> np.ndarray:
        return self.dead | self.hot


@dataclass
class PixelSample:
    """One minibatch element: a (frame, pixel) coordinate and its bit."""

    frame_index: int
    pixel: tuple
    value: int


class PixelSampleBatch:
    """Column-oriented batch of PixelSamples (vector access via attributes)."""

    def __init__(self, frames, rows, cols, values):
        self.frames = np.asarray(frames, dtype=np.int64)
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.uint8)

    def __len__(self) -> int:
        return self.frames.size

    def __getitem__(self, i) -> PixelSample:
        return PixelSample(int(self.frames[i]), (int(self.rows[i]), int(self.cols[i])),
                           int(self.values[i]))

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


@dataclass
class DecodeStats:
    """Accounting hook: how much pixel data readers have materialized."""

    pixels_decoded: int = 0
    bytes_read: int = 0
    peak_pixels_per_call: int = 0

    def record(self, pixels: int, bytes_read: int) -> None:
        self.pixels_decoded += pixels
        self.bytes_read += bytes_read
        self.peak_pixels_per_call = max(self.peak_pixels_per_call, pixels)


def bytes_per_row(width: int) -> int:
    return (width + 7) // 8


def pack_frame_bits(bits: np.ndarray) -> np.ndarray:
    """(h, w) {0,1} -> (h, ceil(w/8)) packed bytes, MSB first."""
    return np.packbits(bits, axis=-1)


def unpack_frame_bytes(raw: np.ndarray, width: int) -> np.ndarray:
    """(h, ceil(w/8)) packed bytes -> (h, w) bits."""
    return np.unpackbits(raw, axis=-1)[:, :width]


class BinaryFrameStore:
    """Read-only view of a packed store file.

    The payload is memory-mapped, so concurrent readers can share one
    instance; nothing here mutates after ``open``. Writing goes through
    ``pack`` / ``pack_stream``.
    """

    def __init__(self, path, header, mmap):
        self.path = path
        (self.width, self.height, self.frame_count,
         self.frame_rate, self.tau) = header
        self._mmap = mmap
        self.stats = DecodeStats()

    # -- lifecycle ----------------------------------------------------------

    @classmethod
    def open(cls, path) -> "BinaryFrameStore":
        size = os.path.getsize(path)
        if size < HEADER_SIZE:
            raise StoreError(f"{path}: too small to hold a store header")
        with open(path, "rb") as f:
            magic, version, width, height, frame_count, frame_rate, tau = (
                HEADER_STRUCT.unpack(f.read(HEADER_SIZE)))
        if magic != STORE_MAGIC:
            raise StoreError(f"{path}: bad magic {magic!r}")
        if version != STORE_VERSION:
            raise StoreError(f"{path}: unsupported version {version}")
        if frame_rate <= 0 or tau <= 0:
            raise StoreError(f"{path}: header frame_rate and tau must be positive")
        expected = frame_count * height * bytes_per_row(width)
        if size - HEADER_SIZE != expected:
            raise StoreError(
                f"{path}: payload is {size - HEADER_SIZE} bytes, expected {expected}")
        mmap = np.memmap(path, dtype=np.uint8, mode="r", offset=HEADER_SIZE)
        return cls(path, (width, height, frame_count, frame_rate, tau), mmap)

    def close(self) -> None:
        self._mmap = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
        return False

    # -- geometry -----------------------------------------------------------

    @property
    def bytes_per_row(self) -> int:
        return bytes_per_row(self.width)

    @property
    def frame_bytes(self) -> int:
        return self.height * self.bytes_per_row

    @property
    def payload_bytes(self) -> int:
        return self.frame_count * self.frame_bytes

    @property
    def duration_s(self) -> float:
        return self.frame_count / self.frame_rate

    def _check_index(self, frame_index, row=None, col=None) -> None:
        f = np.asarray(frame_index)
        if np.any(f < 0) or np.any(f >= self.frame_count):
            raise InputError("frame index out of range")
        if row is not None:
            r = np.asarray(row)
            if np.any(r < 0) or np.any(r >= self.height):
                raise InputError("pixel row out of range")
        if col is not None:
            c = np.asarray(col)
            if np.any(c < 0) or np.any(c >= self.width):
                raise InputError("pixel column out of range")

    # -- reads --------------------------------------------------------------

    def read_pixel(self, frame_index: int, row: int, col: int) -> int:
        """One packed bit, via a single byte read of the memory map."""
        self._check_index(frame_index, row, col)
        offset = frame_index * self.frame_bytes + row * self.bytes_per_row + (col >> 3)
        byte = int(self._mmap[offset])
        self.stats.record(1, 1)
        return (byte >> (7 - (col & 7))) & 1

    def read_pixels(self, frames, rows, cols) -> np.ndarray:
        """Vectorized read_pixel over index arrays."""
        frames = np.asarray(frames, dtype=np.int64)
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        self._check_index(frames, rows, cols)
        offsets = frames * self.frame_bytes + rows * self.bytes_per_row + (cols >> 3)
        raw = self._mmap[offsets]
        self.stats.record(frames.size, frames.size)
        return (raw >> (7 - (cols & 7)).astype(np.uint8)) & 1

    def read_frame(self, frame_index: int) -> BinaryFrame:
        self._check_index(frame_index)
        start = frame_index * self.frame_bytes
        raw = np.array(self._mmap[start:start + self.frame_bytes]).reshape(
            self.height, self.bytes_per_row)
        self.stats.record(self.height * self.width, self.frame_bytes)
        return BinaryFrame(unpack_frame_bytes(raw, self.width))

    def frames(self):
        for i in range(self.frame_count):
            yield self.read_frame(i)

    def unpack_all(self) -> np.ndarray:
        """Fully decoded (frame_count, height, width) bit array. Small stores only."""
        raw = np.array(self._mmap).reshape(self.frame_count, self.height,
                                           self.bytes_per_row)
        self.stats.record(self.frame_count * self.height * self.width,
                          self.payload_bytes)
        return np.unpackbits(raw, axis=-1)[:, :, :self.width]

    # -- sampling -----------------------------------------------------------

    def sample_uniform(self, batch_size: int, rng_seed: int) -> PixelSampleBatch:
        """I.i.d. uniform (frame, pixel) samples with their bits.

        Draws indices directly from a counter-based stream (no shuffling, no
        decoded cache), so memory stays at batch_size decoded pixels.
        """
        if batch_size < 1:
            raise InputError("batch_size must be >= 1")
        if self.frame_count == 0:
            raise InputError("cannot sample from an empty store")
        gen = _rng.philox(rng_seed, "store-sample")
        frames = gen.integers(0, self.frame_count, batch_size)
        rows = gen.integers(0, self.height, batch_size)
        cols = gen.integers(0, self.width, batch_size)
        values = self.read_pixels(frames, rows, cols)
        return PixelSampleBatch(frames, rows, cols, values)

    def read_throughput(self, n_reads: int = 200_000, rng_seed: int = 0) -> float:
        """Microbenchmark: random single-pixel reads per second.

        Bit-packing keeps 8 pixels per byte, so random access touches an
        8x smaller working set than byte-per-pixel storage; this hook
        measures the effect without asserting any number.
        """
        import time

        gen = _rng.philox(rng_seed, "store-bench")
        frames = gen.integers(0, self.frame_count, n_reads)
        rows = gen.integers(0, self.height, n_reads)
        cols = gen.integers(0, self.width, n_reads)
        start = time.perf_counter()
        self.read_pixels(frames, rows, cols)
        return n_reads / (time.perf_counter() - start)

    def virtual_exposure(self, start_frame: int, n: int) -> np.ndarray:
        """Mean of n consecutive frames as a float image in [0, 1]."""
        if n < 1:
            raise InputError("virtual exposure needs n >= 1")
        if start_frame < 0 or start_frame + n > self.frame_count:
            raise InputError("virtual exposure window out of range")
        acc = np.zeros((self.height, self.width), dtype=np.float64)
        chunk = max(1, min(n, (1 << 22) // max(self.frame_bytes, 1)))
        for begin in range(start_frame, start_frame + n, chunk):
            count = min(chunk, start_frame + n - begin)
            lo = begin * self.frame_bytes
            raw = np.array(self._mmap[lo:lo + count * self.frame_bytes]).reshape(
                count, self.height, self.bytes_per_row)
            bits = np.unpackbits(raw, axis=-1)[:, :, :self.width]
            acc += bits.sum(axis=0, dtype=np.float64)
            self.stats.record(count * self.height * self.width,
                              count * self.frame_bytes)
        return acc / n


# ---------------------------------------------------------------------------
# Writing
# ---------------------------------------------------------------------------


def _write_header(f, width, height, frame_count, frame_rate, tau) -> None:
    if frame_rate <= 0 or tau <= 0:
        raise InputError("store frame_rate and tau must be positive")
    f.write(HEADER_STRUCT.pack(STORE_MAGIC, STORE_VERSION, width, height,
                               frame_count, frame_rate, tau))


def pack(frames, path, frame_rate: float, tau: float) -> BinaryFrameStore:
    """Pack an iterable of BinaryFrames (or (h, w) bit arrays) into a store file.

    Streams frame by frame; the frame count is patched into the header at the
    end, so generators are fine. Returns the opened store.
    """
    count = 0
    width = height = None
    with open(path, "wb") as f:
        _write_header(f, 0, 0, 0, frame_rate, tau)
        for frame in frames:
            bits = frame.bits if isinstance(frame, BinaryFrame) else np.asarray(frame)
            if width is None:
                height, width = bits.shape
            elif bits.shape != (height, width):
                raise InputError("all frames in a store must share dimensions")
            f.write(pack_frame_bits(bits.astype(np.uint8)).tobytes())
            count += 1
        if width is None:
            raise InputError("cannot pack an empty frame sequence")
        f.seek(0)
        _write_header(f, width, height, count, frame_rate, tau)
    return BinaryFrameStore.open(path)


def unpack(store: BinaryFrameStore) -> np.ndarray:
    """Decode a whole store to a (frames, height, width) bit array."""
    return store.unpack_all()


# Module-level delegates mirroring the store methods.


def read_pixel(store: BinaryFrameStore, frame_index: int, row: int, col: int) -> int:
    return store.read_pixel(frame_index, row, col)


def sample_uniform(store: BinaryFrameStore, batch_size: int, rng_seed: int) -> PixelSampleBatch:
    return store.sample_uniform(batch_size, rng_seed)


def virtual_exposure(store: BinaryFrameStore, start_frame: int, n: int) -> np.ndarray:
    return store.virtual_exposure(start_frame, n)


# ---------------------------------------------------------------------------
# Defect correction and readout utilities
# ---------------------------------------------------------------------------


def _inpaint_bits(bits: np.ndarray, mask: DefectMask) -> np.ndarray:
    defect = mask.any_defect
    if defect.shape != bits.shape:
        raise InputError("defect mask dimensions must match the frame")
    if not defect.any():
        return bits.copy()
    valid = (~defect).astype(np.int64)
    values = bits.astype(np.int64) * valid
    h, w = bits.shape
    ones = np.zeros((h, w), dtype=np.int64)
    count = np.zeros((h, w), dtype=np.int64)
    padded_v = np.pad(values, 1)
    padded_c = np.pad(valid, 1)
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            if dr == 0 and dc == 0:
                continue
            ones += padded_v[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
            count += padded_c[1 + dr:1 + dr + h, 1 + dc:1 + dc + w]
    majority = (2 * ones > count).astype(np.uint8)  # ties resolve to 0
    return np.where(defect, majority, bits).astype(np.uint8)


def inpaint_defects(frame_or_store, defect_mask: DefectMask, out_path=None):
    """Replace dead/hot pixels with the majority of their valid 8-neighborhood.

    Accepts a BinaryFrame (returns a corrected BinaryFrame) or an open store
    (streams corrected frames into ``out_path`` and returns the new store).
    """
    if isinstance(frame_or_store, BinaryFrame):
        return BinaryFrame(_inpaint_bits(frame_or_store.bits, defect_mask))
    store = frame_or_store
    if out_path is None:
        raise InputError("inpainting a store requires an output path")

    def corrected():
        for frame in store.frames():
            yield BinaryFrame(_inpaint_bits(frame.bits, defect_mask))

    return pack(corrected(), out_path, store.frame_rate, store.tau)


def recombine_halves(top: BinaryFrame, bottom: BinaryFrame) -> BinaryFrame:
    """Stitch separately read-out sensor halves back into one frame."""
    if top.width != bottom.width:
        raise InputError("half arrays must share a width")
    return BinaryFrame(np.concatenate([top.bits, bottom.bits], axis=0))
