"""Interactive CASCADE error correction between a reference and a corrector.

The reference party holds the key that counts as correct and answers
parity queries about it; the corrector locates and flips its own deviating
bits. All disclosed information flows one way (reference -> corrector), so
the parity bits placed on the channel are exactly the protocol leakage.

Queries are batched: one round trip fetches the parities of every active
binary-search branch of a pass, keeping the protocol usable over a real
link. Both parties derive the per-pass permutations from a shared session
seed (public information, no extra leakage).
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

_PASS_REQ = struct.Struct("<cIQ")    # 'P', pass index, block size
_RANGE_HDR = struct.Struct("<cII")   # 'Q', pass index, range count
_RANGE_ITEM = struct.Struct("<QQ")
_BITS_HDR = struct.Struct("<cI")     # 'R', parity bit count
_HASH_REQ = b"H"
_HASH_REPLY = struct.Struct("<cQ")   # 'H', digest

CRC64_POLY = 0x42F0E1EBA9EA3693  # ECMA-182


def _crc64_table() -> list[int]:
    table = []
    for byte in range(256):
        crc = byte << 56
        for _ in range(8):
            crc = ((crc << 1) ^ CRC64_POLY if crc & (1 << 63) else crc << 1) & (1 << 64) - 1
        table.append(crc)
    return table


_CRC64_TABLE = _crc64_table()


def key_digest(bits: np.ndarray) -> int:
    """64-bit polynomial (CRC-64/ECMA) digest of a bit vector."""
    data = np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes()
    crc = len(bits) & ((1 << 64) - 1)
    for byte in data:
        crc = ((_CRC64_TABLE[((crc >> 56) ^ byte) & 0xFF]) ^ (crc << 8)) & ((1 << 64) - 1)
    return crc


def pass_permutation(n: int, session_seed: int, pass_index: int) -> np.ndarray:
    """Shared per-pass shuffle; pass 0 keeps the natural order."""
    if pass_index == 0:
        return np.arange(n, dtype=np.int64)
    rng = np.random.default_rng([session_seed & 0xFFFFFFFF, pass_index])
    return rng.permutation(n).astype(np.int64)


class CascadeVerificationError(RuntimeError):
    """Digest mismatch after the maximum number of passes: keys discarded."""


class ReferenceParty:
    """Answers parity and digest queries about the reference key."""

    def __init__(self, bits: np.ndarray, session_seed: int = 0):
        self.bits = np.asarray(bits, dtype=np.uint8)
        self.session_seed = session_seed
        self._cumsums: dict[int, np.ndarray] = {}

    def _cumsum(self, pass_index: int) -> np.ndarray:
        cs = self._cumsums.get(pass_index)
        if cs is None:
            perm = pass_permutation(self.bits.size, self.session_seed, pass_index)
            cs = np.concatenate(([0], np.cumsum(self.bits[perm], dtype=np.int64)))
            self._cumsums[pass_index] = cs
        return cs

    def _range_parities(self, pass_index: int, los, his) -> np.ndarray:
        cs = self._cumsum(pass_index)
        return ((cs[his] - cs[los]) & 1).astype(np.uint8)

    def handle(self, request: bytes) -> bytes:
        kind = request[:1]
        if kind == b"P":
            _, pass_index, size = _PASS_REQ.unpack(request)
            n = self.bits.size
            starts = np.arange(0, n, size, dtype=np.int64)
            ends = np.minimum(starts + size, n)
            bits = self._range_parities(pass_index, starts, ends)
        elif kind == b"Q":
            _, pass_index, count = _RANGE_HDR.unpack_from(request)
            flat = np.frombuffer(request, dtype="<u8", offset=_RANGE_HDR.size,
                                 count=2 * count).astype(np.int64)
            bits = self._range_parities(pass_index, flat[0::2], flat[1::2])
        elif kind == b"H":
            return _HASH_REPLY.pack(b"H", key_digest(self.bits))
        else:
            raise ValueError(f"unknown cascade request {kind!r}")
        return _BITS_HDR.pack(b"R", bits.size) + np.packbits(bits).tobytes()


@dataclass
class ChannelAudit:
    """Independent tally of what actually crossed the channel."""

    parity_bits: int = 0
    hash_bits: int = 0
    round_trips: int = 0

    @property
    def disclosed_bits(self) -> int:
        return self.parity_bits + self.hash_bits


class AuditedExchange:
    """Wraps a request/reply callable and counts disclosed payload bits."""

    def __init__(self, exchange: Callable[[bytes], bytes]):
        self._exchange = exchange
        self.audit = ChannelAudit()

    def __call__(self, request: bytes) -> bytes:
        reply = self._exchange(request)
        self.audit.round_trips += 1
        if reply[:1] == b"R":
            self.audit.parity_bits += _BITS_HDR.unpack_from(reply)[1]
        elif reply[:1] == b"H":
            self.audit.hash_bits += 64
        return reply


@dataclass
class CascadeResult:
    bits: np.ndarray
    leaked_bits: int
    corrections: int
    pass_sizes: list[int]
    verified: bool
    residual_estimate: float
    blocks: list[tuple[int, int]] = field(default_factory=list)


def residual_error_estimate(corrections: int, pass_sizes: list[int], n: int) -> float:
    """Expected surviving error fraction after the given passes.

    A pair of errors goes unnoticed only if it shares a block in every
    pass; with random permutations that happens with probability k/n per
    pass. The corrected-error count scales the number of candidate pairs.
    """
    if n == 0:
        return 0.0
    pairs = corrections * (corrections + 1) / 2.0
    collide = 1.0
    for k in pass_sizes:
        collide *= min(1.0, k / n)
    return 2.0 * pairs * collide / n


class _PassState:
    def __init__(self, index: int, size: int, perm: np.ndarray, own_bits: np.ndarray,
                 ref_parities: np.ndarray):
        self.index = index
        self.size = size
        self.perm = perm
        self.posmap = np.empty_like(perm)
        self.posmap[perm] = np.arange(perm.size)
        self.view = own_bits[perm].copy()
        n_blocks = ref_parities.size
        starts = np.arange(0, perm.size, size, dtype=np.int64)
        own = np.add.reduceat(self.view, starts).astype(np.int64) & 1
        self.odd = set(np.flatnonzero(own != ref_parities).tolist())
        assert n_blocks == starts.size


class CascadeCorrector:
    """Drives the error-location protocol against a reference party."""

    def __init__(self, bits: np.ndarray, q_est: float,
                 exchange: Callable[[bytes], bytes], session_seed: int = 0,
                 target_residual: float = 1e-9, max_passes: int = 20):
        if not 0.0 < q_est < 0.5:
            raise ValueError("q_est must lie in (0, 0.5)")
        self.bits = np.asarray(bits, dtype=np.uint8).copy()
        self.n = self.bits.size
        self.k1 = max(1, min(int(math.ceil(0.73 / q_est)), self.n))
        self.exchange = exchange
        self.session_seed = session_seed
        self.target_residual = target_residual
        self.max_passes = max_passes
        self.leaked_bits = 0
        self.corrections = 0
        self.passes: list[_PassState] = []

    # -- wire helpers ------------------------------------------------------

    def _fetch_block_parities(self, pass_index: int, size: int) -> np.ndarray:
        reply = self.exchange(_PASS_REQ.pack(b"P", pass_index, size))
        return self._decode_bits(reply)

    def _fetch_range_parities(self, pass_index: int, ranges: list[tuple[int, int]]) -> np.ndarray:
        payload = _RANGE_HDR.pack(b"Q", pass_index, len(ranges))
        payload += b"".join(_RANGE_ITEM.pack(lo, hi) for lo, hi in ranges)
        return self._decode_bits(self.exchange(payload))

    def _fetch_digest(self) -> int:
        reply = self.exchange(_HASH_REQ)
        self.leaked_bits += 64
        return _HASH_REPLY.unpack(reply)[1]

    def _decode_bits(self, reply: bytes) -> np.ndarray:
        tag, nbits = _BITS_HDR.unpack_from(reply)
        if tag != b"R":
            raise ValueError("unexpected cascade reply")
        self.leaked_bits += nbits
        packed = np.frombuffer(reply, dtype=np.uint8, offset=_BITS_HDR.size)
        return np.unpackbits(packed)[:nbits]

    # -- protocol ----------------------------------------------------------

    def _start_pass(self):
        index = len(self.passes)
        size = min(self.n, self.k1 << index)
        perm = pass_permutation(self.n, self.session_seed, index)
        ref = self._fetch_block_parities(index, size).astype(np.int64)
        self.passes.append(_PassState(index, size, perm, self.bits, ref))

    def _flip(self, global_index: int):
        self.bits[global_index] ^= 1
        self.corrections += 1
        for ps in self.passes:
            pos = int(ps.posmap[global_index])
            ps.view[pos] ^= 1
            block = pos // ps.size
            if block in ps.odd:
                ps.odd.remove(block)
            else:
                ps.odd.add(block)

    def _own_parity(self, ps: _PassState, lo: int, hi: int) -> int:
        return int(ps.view[lo:hi].sum()) & 1

    def _search_pass(self, ps: _PassState):
        """Binary-search every odd block of one pass, batching each level."""
        blocks = sorted(ps.odd)
        branches = []
        for b in blocks:
            lo, hi = b * ps.size, min((b + 1) * ps.size, self.n)
            branches.append((lo, hi))
        while branches:
            todo = []
            for lo, hi in branches:
                if hi - lo == 1:
                    self._flip(int(ps.perm[lo]))
                else:
                    todo.append((lo, hi))
            if not todo:
                break
            mids = [(lo + hi) // 2 for lo, hi in todo]
            ref_left = self._fetch_range_parities(
                ps.index, [(lo, mid) for (lo, _), mid in zip(todo, mids)])
            branches = []
            for (lo, hi), mid, ref in zip(todo, mids, ref_left):
                if self._own_parity(ps, lo, mid) != int(ref):
                    branches.append((lo, mid))
                else:
                    branches.append((mid, hi))

    def _drain(self):
        while True:
            pending = [ps for ps in self.passes if ps.odd]
            if not pending:
                return
            self._search_pass(min(pending, key=lambda ps: ps.size))

    def run(self) -> CascadeResult:
        verify_attempts = 0
        while True:
            while True:
                self._start_pass()
                self._drain()
                sizes = [ps.size for ps in self.passes]
                min_passes = 2 if self.corrections == 0 else 4
                residual = residual_error_estimate(self.corrections, sizes, self.n)
                if len(sizes) >= min_passes and residual <= self.target_residual:
                    break
                if len(sizes) >= self.max_passes:
                    break
            if self._fetch_digest() == key_digest(self.bits):
                verified = True
                break
            verify_attempts += 1
            if len(self.passes) >= self.max_passes or verify_attempts >= 3:
                raise CascadeVerificationError(
                    f"digest mismatch after {len(self.passes)} passes"
                )
        block_edges = [(int(s), int(min(s + self.k1, self.n)))
                       for s in range(0, self.n, self.k1)]
        return CascadeResult(
            bits=self.bits,
            leaked_bits=self.leaked_bits,
            corrections=self.corrections,
            pass_sizes=[ps.size for ps in self.passes],
            verified=verified,
            residual_estimate=residual_error_estimate(
                self.corrections, [ps.size for ps in self.passes], self.n),
            blocks=block_edges,
        )
