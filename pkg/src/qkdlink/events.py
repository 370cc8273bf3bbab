"""Timestamped detector events: the common currency of the pipeline.

A stream is a time-ordered sequence of (tick, detector) records at 125 ps
resolution. Detector indices follow the analyzer layout: 0=H, 1=+45deg,
2=V, 3=-45deg; index parity is the basis (even=HV, odd=diagonal) and
``index >> 1`` is the raw bit value.

File format ``QKDTS001``: an 8-byte magic, a 4-byte little-endian party
id, a 4-byte little-endian event count (16 header bytes total), then one
64-bit little-endian word per event with the tick in bits 63..4 and the
detector index in bits 3..0.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

TICK = 125e-12              # seconds per timestamp unit
DETECTOR_DEAD_TICKS = 8000  # 1 us detector dead time
UNIT_DEAD_TICKS = 1024      # 128 ns timestamp-unit dead time, per side

MAGIC = b"QKDTS001"
_HEADER = struct.Struct("<8sII")
_MAX_COUNT = 0xFFFFFFFF
_MAX_TICK = (1 << 60) - 1


class StreamFormatError(ValueError):
    """Base class for timestamp-file problems."""


class BadMagicError(StreamFormatError):
    pass


class TruncatedStreamError(StreamFormatError):
    pass


class NonMonotoneStreamError(StreamFormatError):
    pass


@dataclass
class TimestampStream:
    """Ordered detector clicks of one party.

    ``ticks`` and ``detectors`` are parallel arrays; ticks are strictly
    increasing once the per-side dead time has been applied. ``config_hash``
    travels in memory only (the file format does not carry it).
    """

    party: int
    ticks: np.ndarray
    detectors: np.ndarray
    config_hash: str | None = field(default=None, compare=False)

    def __post_init__(self):
        self.ticks = np.asarray(self.ticks, dtype=np.int64)
        self.detectors = np.asarray(self.detectors, dtype=np.uint8)
        if self.ticks.shape != self.detectors.shape:
            raise ValueError("ticks and detectors must be parallel arrays")
        if self.detectors.size and self.detectors.max() > 3:
            raise ValueError("detector index out of range 0..3")

    def __len__(self) -> int:
        return int(self.ticks.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TimestampStream):
            return NotImplemented
        return (
            self.party == other.party
            and np.array_equal(self.ticks, other.ticks)
            and np.array_equal(self.detectors, other.detectors)
        )

    @property
    def start_tick(self) -> int:
        return int(self.ticks[0]) if len(self) else 0

    @property
    def duration(self) -> float:
        """Wall-time span in seconds."""
        if len(self) < 2:
            return 0.0
        return float(self.ticks[-1] - self.ticks[0]) * TICK

    @property
    def times(self) -> np.ndarray:
        """Tick values converted to float seconds."""
        return self.ticks.astype(np.float64) * TICK

    def slice_seconds(self, t0: float, t1: float) -> "TimestampStream":
        """Events with absolute time in [t0, t1), endpoints in seconds."""
        lo = int(np.searchsorted(self.ticks, round(t0 / TICK), "left"))
        hi = int(np.searchsorted(self.ticks, round(t1 / TICK), "left"))
        return TimestampStream(self.party, self.ticks[lo:hi], self.detectors[lo:hi],
                               config_hash=self.config_hash)


def pack_events(ticks: np.ndarray, detectors: np.ndarray) -> np.ndarray:
    words = (np.asarray(ticks, dtype=np.uint64) << np.uint64(4)) | np.asarray(
        detectors, dtype=np.uint64
    )
    return words.astype("<u8")


def unpack_events(words: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    words = words.astype(np.uint64)
    ticks = (words >> np.uint64(4)).astype(np.int64)
    detectors = (words & np.uint64(0xF)).astype(np.uint8)
    return ticks, detectors


def write_stream(stream: TimestampStream, path) -> None:
    n = len(stream)
    if n > _MAX_COUNT:
        raise ValueError(f"stream too long for the file format ({n} events)")
    if n and int(stream.ticks.max()) > _MAX_TICK:
        raise ValueError("tick value exceeds the 60-bit field")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, stream.party, n))
        if n:
            pack_events(stream.ticks, stream.detectors).tofile(fh)


def read_stream(path) -> TimestampStream:
    with open(path, "rb") as fh:
        header = fh.read(_HEADER.size)
        if len(header) < _HEADER.size:
            raise TruncatedStreamError(f"{path}: header shorter than {_HEADER.size} bytes")
        magic, party, count = _HEADER.unpack(header)
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}")
        payload = fh.read()
    if len(payload) != 8 * count:
        raise TruncatedStreamError(
            f"{path}: expected {8 * count} payload bytes, found {len(payload)}"
        )
    words = np.frombuffer(payload, dtype="<u8")
    ticks, detectors = unpack_events(words)
    if ticks.size > 1 and np.any(np.diff(ticks) <= 0):
        raise NonMonotoneStreamError(f"{path}: ticks are not strictly increasing")
    return TimestampStream(party, ticks, detectors)


def basis_of(detectors: np.ndarray) -> np.ndarray:
    """0 for the HV basis, 1 for the diagonal basis."""
    return (np.asarray(detectors) & 1).astype(np.uint8)


def raw_bit_of(detectors: np.ndarray) -> np.ndarray:
    """Raw bit value: 0 for H/+45, 1 for V/-45."""
    return (np.asarray(detectors) >> 1).astype(np.uint8)
