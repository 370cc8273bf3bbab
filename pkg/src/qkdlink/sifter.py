"""Coincidence identification and BBM92 basis sifting.

Detector indices map to bits as ``bit = index >> 1`` (H/+45 -> 0, V/-45
-> 1) and to bases as ``index & 1`` (even = HV, odd = diagonal). Side A
flips its bit to undo the pair anticorrelation, so both parties end up
with nominally identical keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .events import TICK, TimestampStream
from .timesync import OffsetEstimate

# Residuals live on the 125 ps tick lattice; window comparisons carry a
# quarter-tick pad so exact-boundary residuals are not lost to float
# rounding (no physical significance: nothing sits between lattice points).
_EDGE_PAD = TICK / 4.0


class CoincidencePair(NamedTuple):
    index_a: int
    index_b: int
    detector_a: int
    detector_b: int
    residual: float


@dataclass
class Coincidences:
    """Matched event pairs, column-wise; behaves as a sequence of pairs.

    ``residual`` is t_B - t_A minus the predicted offset at the pair time
    (seconds). Pairs with ``|residual| <= accept_window`` contribute to the
    key; the wider remainder only feeds the tracking servo.
    """

    index_a: np.ndarray
    index_b: np.ndarray
    detector_a: np.ndarray
    detector_b: np.ndarray
    residual: np.ndarray
    time_a: np.ndarray
    accept_window: float

    def __len__(self) -> int:
        return int(self.index_a.size)

    def __getitem__(self, i) -> CoincidencePair:
        return CoincidencePair(int(self.index_a[i]), int(self.index_b[i]),
                               int(self.detector_a[i]), int(self.detector_b[i]),
                               float(self.residual[i]))

    @property
    def accepted(self) -> np.ndarray:
        return np.abs(self.residual) <= self.accept_window + _EDGE_PAD

    def select(self, mask: np.ndarray) -> "Coincidences":
        return Coincidences(self.index_a[mask], self.index_b[mask],
                            self.detector_a[mask], self.detector_b[mask],
                            self.residual[mask], self.time_a[mask],
                            self.accept_window)

    def tracking_samples(self, window: float) -> np.ndarray:
        """(time, residual) rows inside ±window, for the servo."""
        sel = np.abs(self.residual) <= window + _EDGE_PAD
        return np.column_stack((self.time_a[sel], self.residual[sel]))


def find_coincidences(
    a: TimestampStream,
    b: TimestampStream,
    offsets: OffsetEstimate,
    tau_c: float = 2e-9,
    track_window: float | None = None,
) -> Coincidences:
    """Pair up events of the two streams given the tracked offset.

    Sweeps both sorted streams once; every A event grabs the B event with
    the smallest |residual| inside the search window, and each B event is
    granted to at most one A event (ties resolved by smallest residual;
    losers are dropped, which at physical rates -- inter-event gaps far
    above tau_c -- changes nothing). The search window is the wider of the
    key window tau_c/2 and the servo window, so the tracker keeps seeing
    coincidences even while the offset wanders out of the key window.
    """
    half = tau_c / 2.0
    search = max(half, track_window or 0.0) + _EDGE_PAD
    ta = a.times
    tb = b.times
    predicted = np.asarray(offsets.predict(ta), dtype=np.float64)
    target = ta + predicted

    lo = np.searchsorted(tb, target - search, "left")
    hi = np.searchsorted(tb, target + search, "right")
    counts = hi - lo
    best = np.full(ta.size, -1, dtype=np.int64)
    one = counts == 1
    best[one] = lo[one]
    for i in np.flatnonzero(counts > 1):  # rare at physical rates
        window = tb[lo[i]:hi[i]]
        best[i] = lo[i] + int(np.argmin(np.abs(window - target[i])))

    got = best >= 0
    ia = np.flatnonzero(got)
    ib = best[got]
    residual = tb[ib] - ta[ia] - predicted[ia]

    # One B event can be claimed by several A events: keep the closest.
    order = np.lexsort((np.abs(residual), ib))
    ib_sorted = ib[order]
    first = np.ones(ib_sorted.size, dtype=bool)
    first[1:] = ib_sorted[1:] != ib_sorted[:-1]
    winners = np.sort(order[first])

    ia, ib, residual = ia[winners], ib[winners], residual[winners]
    return Coincidences(
        index_a=ia,
        index_b=ib,
        detector_a=a.detectors[ia],
        detector_b=b.detectors[ib],
        residual=residual,
        time_a=ta[ia],
        accept_window=half,
    )


@dataclass
class SiftCounts:
    matched: int
    unmatched: int
    total: int


@dataclass
class SiftedKey:
    """Key material of one party after basis reconciliation."""

    bits: np.ndarray
    basis: np.ndarray
    counts: SiftCounts
    span: tuple[float, float]
    times: np.ndarray

    def __len__(self) -> int:
        return int(self.bits.size)

    def drop(self, positions: np.ndarray) -> "SiftedKey":
        """Key with the given bit positions removed (after disclosure)."""
        keep = np.ones(len(self), dtype=bool)
        keep[positions] = False
        return SiftedKey(self.bits[keep], self.basis[keep], self.counts,
                         self.span, self.times[keep])


def sift(pairs: Coincidences, flip_a: bool = True) -> tuple[SiftedKey, SiftedKey]:
    """Keep same-basis accepted pairs and map detectors to key bits.

    Returns equal-length keys for side A (bit flipped, undoing the
    anticorrelation) and side B.
    """
    acc = pairs.select(pairs.accepted)
    basis_a = acc.detector_a & 1
    basis_b = acc.detector_b & 1
    same = basis_a == basis_b
    matched = int(np.count_nonzero(same))
    counts = SiftCounts(matched=matched, unmatched=len(acc) - matched, total=len(acc))
    span = (float(acc.time_a[0]), float(acc.time_a[-1])) if len(acc) else (0.0, 0.0)

    det_a = acc.detector_a[same]
    det_b = acc.detector_b[same]
    times = acc.time_a[same]
    basis = (det_a & 1).astype(np.uint8)
    bits_a = (det_a >> 1).astype(np.uint8)
    if flip_a:
        bits_a ^= 1
    bits_b = (det_b >> 1).astype(np.uint8)
    key_a = SiftedKey(bits_a, basis, counts, span, times)
    key_b = SiftedKey(bits_b, basis.copy(), counts, span, times.copy())
    return key_a, key_b


@dataclass(frozen=True)
class QberEstimate:
    """Disclosed-sample error ratio with Wilson 95% bounds, per basis."""

    q: float
    low: float
    high: float
    n_sampled: int
    n_errors: int
    per_basis: dict


def wilson_interval(errors: int, n: int, z: float = 1.959964) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    p = errors / n
    denom = 1.0 + z * z / n
    center = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


def measure_qber(
    key_a: SiftedKey,
    key_b: SiftedKey,
    sample_fraction: float = 0.05,
    rng: np.random.Generator | int | None = None,
) -> tuple[SiftedKey, SiftedKey, QberEstimate]:
    """Estimate the QBER from a disclosed random sample.

    The sampled positions are removed from both returned keys; the
    estimate carries Wilson 95% intervals overall and per basis.
    """
    if len(key_a) != len(key_b):
        raise ValueError("keys must have equal length")
    n = len(key_a)
    if n == 0:
        raise ValueError("cannot sample an empty key")
    if not 0.0 < sample_fraction <= 1.0:
        raise ValueError("sample_fraction must lie in (0, 1]")
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    k = max(1, int(round(n * sample_fraction)))
    positions = np.sort(gen.choice(n, size=k, replace=False))
    return disclose_qber(key_a, key_b, positions)


def disclose_qber(key_a: SiftedKey, key_b: SiftedKey,
                  positions: np.ndarray) -> tuple[SiftedKey, SiftedKey, QberEstimate]:
    """Compare the given bit positions and strip them from both keys."""
    positions = np.asarray(positions, dtype=np.int64)
    bits_a = key_a.bits[positions]
    bits_b = key_b.bits[positions]
    basis = key_a.basis[positions]
    errs = bits_a != bits_b
    per_basis = {}
    for name, code in (("hv", 0), ("diag", 1)):
        sel = basis == code
        n_b = int(np.count_nonzero(sel))
        e_b = int(np.count_nonzero(errs[sel]))
        lo, hi = wilson_interval(e_b, n_b)
        per_basis[name] = QberEstimate(e_b / n_b if n_b else 0.0, lo, hi, n_b, e_b, {})
    n_s = int(positions.size)
    n_e = int(np.count_nonzero(errs))
    lo, hi = wilson_interval(n_e, n_s)
    estimate = QberEstimate(n_e / n_s, lo, hi, n_s, n_e, per_basis)
    return key_a.drop(positions), key_b.drop(positions), estimate
