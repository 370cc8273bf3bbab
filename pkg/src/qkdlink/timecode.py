"""Lossless delta encoding of timestamp/basis data for the classical link.

Event ticks are strictly increasing, so only the first absolute tick and
the gaps travel. The payload is an LSB-first bitstream:

    [basis bit of event 0]
    per chunk of up to 256 gaps:
        [6-bit code width b]
        per gap: [b-bit code][basis bit]

A gap below ``2^b - 1`` is stored directly in the b-bit code; the
all-ones code escapes to an Elias-gamma suffix carrying ``gap - (2^b-1)
+ 1``. The width is chosen per chunk by exact cost minimization over all
candidate widths, which lands near the gap distribution's optimum and
keeps the stream within a few percent of the entropy limit.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

_CHUNK = 256
_WIDTH_BITS = 6
_HEADER = struct.Struct("<IQI")  # event count, first tick, payload bit count


class TimingCodecError(ValueError):
    pass


@dataclass(frozen=True)
class EncodedTimingBlock:
    count: int
    first_tick: int
    payload: bytes
    payload_bits: int

    def to_bytes(self) -> bytes:
        return _HEADER.pack(self.count, self.first_tick, self.payload_bits) + self.payload

    @classmethod
    def from_bytes(cls, data: bytes) -> "EncodedTimingBlock":
        if len(data) < _HEADER.size:
            raise TimingCodecError("timing block shorter than its header")
        count, first_tick, payload_bits = _HEADER.unpack_from(data)
        payload = data[_HEADER.size:]
        if len(payload) != -(-payload_bits // 8):
            raise TimingCodecError("timing block payload length mismatch")
        return cls(count, first_tick, payload, payload_bits)

    @property
    def total_bits(self) -> int:
        return 8 * _HEADER.size + self.payload_bits

    def bits_per_event(self) -> float:
        return self.total_bits / self.count if self.count else 0.0

    def timing_bits_per_event(self) -> float:
        """Size of the gap encoding alone, per event.

        One basis bit per event rides along in the payload; it is its own
        incompressible bit of message, so the encoder's overhead against
        the gap entropy is judged without it.
        """
        if not self.count:
            return 0.0
        return (self.total_bits - self.count) / self.count


class _BitWriter:
    def __init__(self):
        self._out = bytearray()
        self._acc = 0
        self._n = 0

    def put(self, value: int, nbits: int):
        self._acc |= value << self._n
        self._n += nbits
        full = self._n >> 3
        if full:
            self._out += (self._acc & ((1 << (8 * full)) - 1)).to_bytes(full, "little")
            self._acc >>= 8 * full
            self._n -= 8 * full

    @property
    def bit_length(self) -> int:
        return 8 * len(self._out) + self._n

    def finish(self) -> bytes:
        if self._n:
            self._out.append(self._acc & 0xFF)
            self._acc = 0
            self._n = 0
        return bytes(self._out)


def _gamma_length(v: int) -> int:
    return 2 * (v.bit_length() - 1) + 1


def _put_gamma(writer: _BitWriter, v: int):
    n = v.bit_length() - 1
    writer.put(0, n)
    for j in range(n, -1, -1):  # MSB first so the leading 1 ends the zero run
        writer.put((v >> j) & 1, 1)


def _choose_width(deltas: np.ndarray) -> int:
    """Width minimizing the exact encoded size of this chunk."""
    dmax = int(deltas.max())
    best_b, best_cost = 1, None
    as_float = deltas.astype(np.float64)
    for b in range(1, min(dmax.bit_length() + 2, 61)):
        esc = (1 << b) - 1
        over = deltas >= esc
        cost = b * deltas.size
        if over.any():
            v = as_float[over] - esc + 1
            cost += int(np.sum(2 * np.floor(np.log2(v)) + 1))
        if best_cost is None or cost < best_cost:
            best_b, best_cost = b, cost
    return best_b


def encode_timing(ticks: np.ndarray, basis: np.ndarray) -> EncodedTimingBlock:
    """Encode sorted event ticks and their basis bits."""
    ticks = np.asarray(ticks, dtype=np.int64)
    basis = np.asarray(basis, dtype=np.uint8)
    if ticks.size != basis.size:
        raise TimingCodecError("ticks and basis bits must be parallel")
    if ticks.size == 0:
        return EncodedTimingBlock(0, 0, b"", 0)
    deltas = np.diff(ticks)
    if deltas.size and int(deltas.min()) <= 0:
        raise TimingCodecError("ticks must be strictly increasing")

    writer = _BitWriter()
    writer.put(int(basis[0]), 1)
    for start in range(0, deltas.size, _CHUNK):
        chunk = deltas[start:start + _CHUNK]
        chunk_basis = basis[1 + start:1 + start + chunk.size]
        b = _choose_width(chunk)
        writer.put(b, _WIDTH_BITS)
        esc = (1 << b) - 1
        if int(chunk.max()) < esc:
            # Fast path: fixed-width codes, packed in one shot.
            w = b + 1
            codes = chunk.astype(np.uint64) | (chunk_basis.astype(np.uint64) << np.uint64(b))
            bits = ((codes[:, None] >> np.arange(w, dtype=np.uint64)) & np.uint64(1))
            packed = np.packbits(bits.astype(np.uint8).ravel(), bitorder="little")
            writer.put(int.from_bytes(packed.tobytes(), "little"), w * chunk.size)
        else:
            for delta, bas in zip(chunk.tolist(), chunk_basis.tolist()):
                if delta < esc:
                    writer.put(delta, b)
                else:
                    writer.put(esc, b)
                    _put_gamma(writer, delta - esc + 1)
                writer.put(bas, 1)
    nbits = writer.bit_length
    return EncodedTimingBlock(int(ticks.size), int(ticks[0]), writer.finish(), nbits)


class _BitReader:
    def __init__(self, payload: bytes, nbits: int):
        self.bits = np.unpackbits(np.frombuffer(payload, dtype=np.uint8),
                                  bitorder="little")[:nbits]
        self.pos = 0

    def take(self, n: int) -> int:
        if self.pos + n > self.bits.size:
            raise TimingCodecError("timing payload truncated")
        chunk = self.bits[self.pos:self.pos + n]
        self.pos += n
        return int(chunk @ (1 << np.arange(n, dtype=np.int64)))

    def take_gamma(self) -> int:
        bits = self.bits
        pos = self.pos
        n = 0
        while pos + n < bits.size and bits[pos + n] == 0:
            n += 1
        if pos + 2 * n + 1 > bits.size:
            raise TimingCodecError("truncated gamma code")
        v = 1
        for j in range(n):
            v = (v << 1) | int(bits[pos + n + 1 + j])
        self.pos = pos + 2 * n + 1
        return v


def decode_timing(block: EncodedTimingBlock) -> tuple[np.ndarray, np.ndarray]:
    """Exact inverse of :func:`encode_timing`."""
    if block.count == 0:
        return np.empty(0, dtype=np.int64), np.empty(0, dtype=np.uint8)
    reader = _BitReader(block.payload, block.payload_bits)
    basis = np.empty(block.count, dtype=np.uint8)
    deltas = np.empty(block.count - 1, dtype=np.int64)
    basis[0] = reader.take(1)
    n_deltas = block.count - 1
    out = 0
    while out < n_deltas:
        size = min(_CHUNK, n_deltas - out)
        b = reader.take(_WIDTH_BITS)
        if not 1 <= b <= 60:
            raise TimingCodecError(f"invalid chunk width {b}")
        esc = (1 << b) - 1
        w = b + 1
        start_pos = reader.pos
        if start_pos + w * size <= reader.bits.size:
            # Try the fixed-width fast path, falling back at the first escape.
            idx = start_pos + np.arange(size, dtype=np.int64)[:, None] * w \
                + np.arange(w, dtype=np.int64)
            gathered = reader.bits[idx]
            codes = gathered[:, :b] @ (1 << np.arange(b, dtype=np.int64))
            escapes = np.flatnonzero(codes == esc)
            good = size if escapes.size == 0 else int(escapes[0])
            deltas[out:out + good] = codes[:good]
            basis[1 + out:1 + out + good] = gathered[:good, b]
            reader.pos = start_pos + w * good
            out += good
            if good == size:
                continue
            size -= good
        for _ in range(size):
            code = reader.take(b)
            delta = code if code < esc else esc + reader.take_gamma() - 1
            deltas[out] = delta
            basis[1 + out] = reader.take(1)
            out += 1
    ticks = np.empty(block.count, dtype=np.int64)
    ticks[0] = block.first_tick
    if n_deltas:
        ticks[1:] = block.first_tick + np.cumsum(deltas)
    return ticks, basis


def geometric_delta_entropy(deltas: np.ndarray) -> float:
    """Entropy (bits/event) of the geometric law fitted to the sample mean.

    For exponential arrivals quantized to ticks the gaps are geometric;
    this is the Shannon limit the encoder is measured against.
    """
    deltas = np.asarray(deltas, dtype=np.float64)
    if deltas.size == 0 or deltas.mean() <= 0:
        raise ValueError("need a non-empty positive sample")
    p = min(1.0, 1.0 / float(deltas.mean()))
    if p >= 1.0:
        return 0.0
    return (-(1.0 - p) * np.log2(1.0 - p) - p * np.log2(p)) / p
