"""Key distillation: error correction accounting and privacy amplification.

Privacy amplification compresses each verified key block by the
asymptotic eavesdropper information ``h(q_t)`` plus everything disclosed
during error correction. The hashing matrix rows are consecutive slices
of a 32-bit LFSR stream, freshly seeded per block from a caller-supplied
entropy source.
"""

from __future__ import annotations

import math
import secrets
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .cascade import (
    AuditedExchange,
    CascadeCorrector,
    CascadeResult,
    ReferenceParty,
)


def binary_entropy(q):
    """Shannon entropy of a bit with bias ``q``, in bits.

    Accepts scalars or arrays; h(0) = h(1) = 0, h(1/2) = 1.
    """
    arr = np.asarray(q, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("binary_entropy expects q in [0, 1]")
    out = np.zeros_like(arr)
    inside = (arr > 0.0) & (arr < 1.0)
    qi = arr[inside]
    out[inside] = -qi * np.log2(qi) - (1.0 - qi) * np.log2(1.0 - qi)
    return float(out) if np.isscalar(q) or arr.ndim == 0 else out


# ----------------------------------------------------------------------
# 32-bit LFSR (feedback polynomial x^32 + x^22 + x^2 + x + 1, taps
# 32/22/2/1, maximal length). The output sequence starts with the seed
# bits LSB-first and then follows
#     s[n] = s[n-10] ^ s[n-30] ^ s[n-31] ^ s[n-32],
# which is what a right-shifting Fibonacci register with output at the
# LSB produces. Generation is word-parallel: within a 64-bit word the
# recurrence only reaches 10..32 bits back, so a word follows from its
# predecessor via a short fixed-point refinement, and independent
# segments are launched by jumping the word map ahead with GF(2) matrix
# squaring.
# ----------------------------------------------------------------------

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _word_step(prev: np.ndarray) -> np.ndarray:
    """Next 64 output bits from the previous 64, vectorized over segments."""
    carry = ((prev >> np.uint64(54)) ^ (prev >> np.uint64(34))
             ^ (prev >> np.uint64(33)) ^ (prev >> np.uint64(32)))
    w = carry.copy()
    for _ in range(7):  # correct bits grow >=10 per round; 7*10 >= 64
        w = carry ^ (w << np.uint64(10)) ^ (w << np.uint64(30)) \
            ^ (w << np.uint64(31)) ^ (w << np.uint64(32))
    return w


def _first_word(seed: int) -> int:
    bits = [(seed >> i) & 1 for i in range(32)]
    for n in range(32, 64):
        bits.append(bits[n - 10] ^ bits[n - 30] ^ bits[n - 31] ^ bits[n - 32])
    word = 0
    for i, b in enumerate(bits):
        word |= b << i
    return word


def _word_map_columns() -> list[int]:
    basis = np.array([np.uint64(1) << np.uint64(j) for j in range(64)], dtype=np.uint64)
    return [int(w) for w in _word_step(basis)]


def _compose(a: list[int], b: list[int]) -> list[int]:
    """Column representation of a∘b over GF(2)^64."""
    out = []
    for col in b:
        acc = 0
        j = 0
        while col:
            if col & 1:
                acc ^= a[j]
            col >>= 1
            j += 1
        out.append(acc)
    return out


def _apply(cols: list[int], x: int) -> int:
    acc = 0
    j = 0
    while x:
        if x & 1:
            acc ^= cols[j]
        x >>= 1
        j += 1
    return acc


def _matrix_power(cols: list[int], e: int) -> list[int]:
    result = [1 << j for j in range(64)]  # identity
    base = cols
    while e:
        if e & 1:
            result = _compose(base, result)
        base = _compose(base, base)
        e >>= 1
    return result


def lfsr32_words(seed: int, n_words: int) -> np.ndarray:
    """Output stream packed into 64-bit words (bit i of word k = s[64k+i])."""
    if n_words <= 0:
        return np.empty(0, dtype=np.uint64)
    seg_len = max(64, 1 << max(0, (int(n_words).bit_length() + 1) // 2))
    n_segments = -(-n_words // seg_len)

    jump = _matrix_power(_word_map_columns(), seg_len)
    starts = [_first_word(seed)]
    for _ in range(n_segments - 1):
        starts.append(_apply(jump, starts[-1]))

    out = np.empty((n_segments, seg_len), dtype=np.uint64)
    w = np.array(starts, dtype=np.uint64)
    out[:, 0] = w
    for k in range(1, seg_len):
        w = _word_step(w)
        out[:, k] = w
    return out.reshape(-1)[:n_words]


def lfsr32_stream(seed: int, n_bits: int) -> np.ndarray:
    """Pseudorandom balanced bit stream of the seeded 32-bit LFSR."""
    if not 0 < seed < (1 << 32):
        raise ValueError("LFSR seed must be a nonzero 32-bit integer")
    if n_bits < 0:
        raise ValueError("n_bits must be non-negative")
    n_words = -(-n_bits // 64)
    words = lfsr32_words(seed, n_words)
    bits = np.unpackbits(words.astype("<u8").view(np.uint8), bitorder="little")
    return bits[:n_bits]


# ----------------------------------------------------------------------
# Reconciliation wrapper and privacy amplification
# ----------------------------------------------------------------------


@dataclass
class ReconciledKey:
    """Error-corrected key with the disclosure bill attached."""

    bits: np.ndarray
    leaked_bits: int
    blocks: list[tuple[int, int]]
    verified: bool
    corrections: int = 0
    pass_sizes: list[int] = field(default_factory=list)
    residual_estimate: float = 0.0

    def __len__(self) -> int:
        return int(self.bits.size)


def cascade_reconcile(
    key_a: np.ndarray,
    key_b: np.ndarray,
    q_est: float,
    block_min: int = 5000,
    target_residual: float = 1e-9,
    session_seed: int = 0,
    max_passes: int = 20,
    audit: AuditedExchange | None = None,
) -> tuple[ReconciledKey, ReconciledKey]:
    """Run CASCADE between the two keys held in one process.

    Side A is the reference; side B's bits are corrected toward it. Both
    returned keys carry the identical leakage count (the parity and digest
    bits that crossed the loopback channel).
    """
    key_a = np.asarray(key_a, dtype=np.uint8)
    key_b = np.asarray(key_b, dtype=np.uint8)
    if key_a.size != key_b.size:
        raise ValueError("keys must have equal length")
    if key_a.size < block_min:
        raise ValueError(f"key shorter than the {block_min}-bit processing block")
    reference = ReferenceParty(key_a, session_seed)
    exchange = audit or AuditedExchange(reference.handle)
    corrector = CascadeCorrector(key_b, q_est, exchange, session_seed,
                                 target_residual, max_passes)
    result = corrector.run()
    rk_a = ReconciledKey(key_a, result.leaked_bits, result.blocks, True,
                         0, result.pass_sizes, result.residual_estimate)
    rk_b = ReconciledKey(result.bits, result.leaked_bits, result.blocks,
                         result.verified, result.corrections,
                         result.pass_sizes, result.residual_estimate)
    return rk_a, rk_b


def reconciled_from_cascade(bits: np.ndarray, result: CascadeResult) -> ReconciledKey:
    return ReconciledKey(np.asarray(bits, dtype=np.uint8), result.leaked_bits,
                         result.blocks, result.verified, result.corrections,
                         result.pass_sizes, result.residual_estimate)


@dataclass(frozen=True)
class BlockAccounting:
    block: int
    n_in: int
    qber: float
    i_e_bits: int
    leak_ec: int
    n_out: int


@dataclass
class FinalKey:
    """Secret key with the exact compression ledger per block."""

    bits: np.ndarray
    q_t_used: float
    accounting: list[BlockAccounting]

    def __len__(self) -> int:
        return int(self.bits.size)

    @property
    def n_in(self) -> int:
        return sum(row.n_in for row in self.accounting)

    @property
    def leak_ec(self) -> int:
        return sum(row.leak_ec for row in self.accounting)

    @property
    def i_e_bits(self) -> int:
        return sum(row.i_e_bits for row in self.accounting)

    @property
    def n_out(self) -> int:
        return sum(row.n_out for row in self.accounting)


def os_seed_source() -> int:
    """Fresh nonzero 32-bit seed from the operating system entropy pool."""
    while True:
        s = secrets.randbits(32)
        if s:
            return s


def seeded_seed_source(rng: np.random.Generator) -> Callable[[], int]:
    """Replayable stand-in for the high-entropy source (simulation mode)."""

    def draw() -> int:
        while True:
            s = int(rng.integers(1, 1 << 32))
            if s:
                return s

    return draw


def _hash_block(bits: np.ndarray, seed: int, m: int) -> np.ndarray:
    """m output bits: parities of the key block against LFSR matrix rows."""
    n = bits.size
    n_bytes = -(-n // 8)
    n_words = -(-n_bytes // 8)
    key_packed = np.zeros(n_words * 8, dtype=np.uint8)
    key_packed[:n_bytes] = np.packbits(bits, bitorder="little")
    key_words = key_packed.view(np.uint64)

    stream = lfsr32_stream(seed, m * n)
    rows = np.zeros((m, n_words * 64), dtype=np.uint8)
    rows[:, :n] = stream.reshape(m, n)
    row_words = np.packbits(rows, axis=1, bitorder="little").view(np.uint64)
    products = np.bitwise_count(row_words & key_words)
    return (products.sum(axis=1) & 1).astype(np.uint8)


def privacy_amplify(
    key: ReconciledKey,
    q_t: float,
    seed_source: Callable[[], int] | np.random.Generator | None = None,
    block_min: int = 5000,
    safety_margin: int = 0,
    extra_leak_fraction: float = 0.0,
    seeds: list[int] | None = None,
) -> FinalKey:
    """Compress a verified key below the eavesdropper's information.

    Per block of at least ``block_min`` bits the output length is
    ``n - ceil(n*h(q_t)) - leak_ec(block)``, where the error-correction
    leakage is apportioned to blocks by size. ``extra_leak_fraction``
    optionally charges the detector-asymmetry entropy leak as well
    (off by default). ``seeds`` overrides the entropy source with
    explicit per-block LFSR seeds (used by the wire protocol, where one
    party draws them and both apply them).
    """
    if not key.verified:
        raise ValueError("privacy amplification requires a verified key")
    if not 0.0 <= q_t <= 0.5:
        raise ValueError("q_t must lie in [0, 0.5]")

    if seed_source is None:
        draw = os_seed_source
    elif isinstance(seed_source, np.random.Generator):
        draw = seeded_seed_source(seed_source)
    else:
        draw = seed_source

    n = len(key)
    h = binary_entropy(q_t)
    if n == 0:
        return FinalKey(np.empty(0, dtype=np.uint8), q_t, [])

    n_blocks = max(1, n // block_min)
    sizes = np.full(n_blocks, n // n_blocks, dtype=np.int64)
    sizes[: n % n_blocks] += 1
    if seeds is not None and len(seeds) != n_blocks:
        raise ValueError(f"expected {n_blocks} block seeds, got {len(seeds)}")

    rows: list[BlockAccounting] = []
    chunks: list[np.ndarray] = []
    start = 0
    for b, size in enumerate(sizes):
        size = int(size)
        block_bits = key.bits[start:start + size]
        start += size
        i_e = math.ceil(size * h)
        leak = math.ceil(key.leaked_bits * size / n)
        extra = math.ceil(size * extra_leak_fraction) if extra_leak_fraction else 0
        m = size - i_e - leak - safety_margin - extra
        m = max(0, m)
        if m > 0:
            seed = seeds[b] if seeds is not None else draw()
            chunks.append(_hash_block(block_bits, seed, m))
        rows.append(BlockAccounting(block=b, n_in=size, qber=q_t,
                                    i_e_bits=i_e, leak_ec=leak, n_out=m))
    bits = np.concatenate(chunks) if chunks else np.empty(0, dtype=np.uint8)
    return FinalKey(bits, q_t, rows)
