"""Clock-offset recovery and drift tracking between the two receiver units.

Acquisition runs a two-tier cross correlation over a few seconds of raw
detector events: a dense coarse histogram product (computed via FFT, which
yields the identical lag spectrum) locates the offset to one coarse bin,
then a residual histogram around the candidate refines it to the fine bin
width. Afterwards a first-order servo with a frequency feed-forward term
follows the residual clock drift using coincidence events inside a narrow
acceptance window.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .events import TICK, TimestampStream

_COARSE_FFT_BINS = 1 << 22  # lag support ~±1.7 s at the default coarse bin


class AcquisitionError(RuntimeError):
    """No significant correlation peak: wrong streams or not enough pairs."""


class TrackingLossError(RuntimeError):
    """Servo starved of coincidences for longer than the holdover budget."""


@dataclass(frozen=True)
class SyncConfig:
    acquisition_window: float = 5.0
    coarse_bin: float = 2.048e-6
    fine_bin: float = 2e-9
    track_window: float = 3.75e-9
    servo_tau: float = 2.0
    peak_threshold: float = 5.0  # required peak/median ratio in the fine tier

    def __post_init__(self):
        if self.fine_bin > self.coarse_bin:
            raise ValueError("fine_bin must not exceed coarse_bin")
        if min(self.acquisition_window, self.coarse_bin, self.fine_bin,
               self.track_window, self.servo_tau) <= 0:
            raise ValueError("all sync parameters must be positive")


@dataclass(frozen=True)
class OffsetEstimate:
    """Current belief about t_B - t_A.

    ``offset`` is valid at time ``t_ref`` (source-side seconds);
    :meth:`predict` extrapolates with the estimated frequency drift.
    ``history_*`` keeps the recent servo trajectory for the drift fit.
    """

    offset: float
    freq_drift: float = 0.0
    confidence: float = 0.0
    t_ref: float = 0.0
    used: int = 0
    history_t: np.ndarray = field(default_factory=lambda: np.empty(0), compare=False)
    history_off: np.ndarray = field(default_factory=lambda: np.empty(0), compare=False)

    def __post_init__(self):
        if self.confidence < 0:
            raise ValueError("confidence must be non-negative")

    def predict(self, t):
        """Expected offset at source-side time ``t`` (seconds)."""
        return self.offset + self.freq_drift * (np.asarray(t, dtype=float) - self.t_ref)


def acquire_offset(a: TimestampStream, b: TimestampStream,
                   cfg: SyncConfig = SyncConfig()) -> OffsetEstimate:
    """Recover the unknown time offset between two event streams.

    Uses the first ``cfg.acquisition_window`` seconds of each stream. The
    returned offset is the fine-tier peak center (3-bin centroid), good to
    about one fine bin; ``confidence`` is the fine peak height over the
    median fine-bin count.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("cannot acquire on an empty stream")
    if a.duration < cfg.acquisition_window or b.duration < cfg.acquisition_window:
        raise ValueError(
            f"both streams must span >= {cfg.acquisition_window} s of wall time"
        )
    window_ticks = int(round(cfg.acquisition_window / TICK))
    ta = a.ticks[a.ticks < a.ticks[0] + window_ticks] - a.ticks[0]
    tb = b.ticks[b.ticks < b.ticks[0] + window_ticks] - b.ticks[0]
    base = int(b.ticks[0]) - int(a.ticks[0])

    # Coarse tier: histogram product over all lags, via circular FFT
    # correlation. Zero padding to the next power of two leaves at least a
    # quarter window of alias-free lag range, far beyond the residual
    # first-event misalignment the lag has to absorb.
    coarse = max(1, int(round(cfg.coarse_bin / TICK)))
    ca = np.bincount((ta // coarse).astype(np.int64)).astype(np.float64)
    cb = np.bincount((tb // coarse).astype(np.int64)).astype(np.float64)
    need = max(ca.size, cb.size)
    n_fft = 1 << int(need + max(need // 4, 1 << 18) - 1).bit_length()
    fa = np.fft.rfft(ca, n_fft)
    fb = np.fft.rfft(cb, n_fft)
    corr = np.fft.irfft(np.conj(fa) * fb, n_fft)
    lag = int(np.argmax(corr))
    if lag > n_fft // 2:
        lag -= n_fft

    # Fine tier: residual histogram around the coarse candidate, +-2 coarse
    # bins wide, at the fine resolution. Work in rebased ticks; the first-tick
    # difference `base` is added back at the end.
    cand = lag * coarse
    span = 2 * coarse
    fine = max(1, int(round(cfg.fine_bin / TICK)))
    lo = np.searchsorted(tb, ta + (cand - span))
    hi = np.searchsorted(tb, ta + (cand + span))
    counts = hi - lo
    have = counts > 0
    starts = lo[have]
    reps = counts[have]
    b_idx = np.repeat(starts, reps) + _ranges(reps)
    residuals = tb[b_idx] - np.repeat(ta[have], reps) - cand
    n_bins = (2 * span) // fine
    hist = np.bincount(((residuals + span + fine // 2) // fine).astype(np.int64),
                       minlength=n_bins + 1)[: n_bins + 1]
    peak_bin = int(np.argmax(hist))
    peak = float(hist[peak_bin])
    median = float(np.median(hist))
    confidence = peak / max(median, 1.0)
    if peak <= cfg.peak_threshold * max(median, 1.0):
        raise AcquisitionError(
            f"no correlation peak above {cfg.peak_threshold}x the median "
            f"(peak {peak:.0f}, median {median:.1f})"
        )

    # Sub-bin refinement: centroid of the background-subtracted 3-bin core.
    sel = np.arange(max(peak_bin - 1, 0), min(peak_bin + 2, n_bins + 1))
    weights = np.clip(hist[sel] - median, 0.0, None)
    centers = sel * fine - span
    centroid = float(np.sum(weights * centers) / np.sum(weights))
    offset = (base + cand + centroid) * TICK

    t_mid = float(a.ticks[0]) * TICK + 0.5 * cfg.acquisition_window
    return OffsetEstimate(offset=offset, freq_drift=0.0, confidence=confidence,
                          t_ref=t_mid)


def _ranges(counts: np.ndarray) -> np.ndarray:
    """[0..c0-1, 0..c1-1, ...] for vectorized window expansion."""
    if counts.size == 0:
        return np.empty(0, dtype=np.int64)
    total = int(counts.sum())
    out = np.ones(total, dtype=np.int64)
    out[0] = 0
    bounds = np.cumsum(counts)[:-1]
    out[bounds] -= counts[:-1]
    return np.cumsum(out)


_HISTORY_SPACING = 0.25  # seconds between retained servo trajectory points
_MIN_FIT_SPAN = 4.0      # shortest history span used for the drift fit


def track(estimate: OffsetEstimate, coincidence_residuals, cfg: SyncConfig = SyncConfig(),
          now: float | None = None, holdover: float | None = None) -> OffsetEstimate:
    """Fold a batch of coincidence residuals into the offset estimate.

    ``coincidence_residuals`` holds (source-side time, t_B - t_A -
    predicted offset) pairs; samples outside ``±cfg.track_window`` are
    ignored. The offset follows an exponential moving average with time
    constant ``cfg.servo_tau`` around the drift-extrapolated prediction;
    the drift itself is refit by linear regression over the retained
    trajectory (up to the last 10 servo time constants).

    With ``holdover`` set, an update that leaves the servo without usable
    samples for longer than that budget raises :class:`TrackingLossError`.
    """
    pairs = np.asarray(list(coincidence_residuals), dtype=np.float64).reshape(-1, 2)
    times, resid = pairs[:, 0], pairs[:, 1]
    order = np.argsort(times, kind="stable")
    times, resid = times[order], resid[order]
    usable = np.abs(resid) <= cfg.track_window
    times, resid = times[usable], resid[usable]
    used = int(times.size)

    if used == 0:
        if holdover is not None and now is not None and now - estimate.t_ref > holdover:
            raise TrackingLossError(
                f"no coincidences inside ±{cfg.track_window:g} s for "
                f"{now - estimate.t_ref:.1f} s (budget {holdover:.1f} s)"
            )
        return replace(estimate, used=0)

    measured = estimate.predict(times) + resid
    offset = estimate.offset
    drift = estimate.freq_drift
    t_cur = estimate.t_ref
    hist_t = list(estimate.history_t)
    hist_off = list(estimate.history_off)
    for t, m in zip(times, measured):
        dt = t - t_cur
        pred = offset + drift * dt
        gain = 1.0 - math.exp(-dt / cfg.servo_tau) if dt > 0 else 0.0
        offset = pred + gain * (m - pred)
        t_cur = t
        if not hist_t or t_cur - hist_t[-1] >= _HISTORY_SPACING:
            hist_t.append(t_cur)
            hist_off.append(offset)

    window = 10.0 * cfg.servo_tau
    ht = np.asarray(hist_t)
    ho = np.asarray(hist_off)
    recent = ht >= ht[-1] - window
    ht, ho = ht[recent], ho[recent]
    if ht.size >= 4 and ht[-1] - ht[0] >= min(_MIN_FIT_SPAN, 2.0 * cfg.servo_tau):
        drift = float(np.polyfit(ht - ht[0], ho, 1)[0])

    return OffsetEstimate(offset=offset, freq_drift=drift,
                          confidence=estimate.confidence, t_ref=t_cur, used=used,
                          history_t=ht, history_off=ho)


def holdover_budget(freq_uncertainty: float, max_walk: float) -> float:
    """How long timing lock survives without signal.

    A relative clock error ``freq_uncertainty`` accumulates ``max_walk``
    seconds of walk after ``max_walk / freq_uncertainty`` seconds.
    """
    if freq_uncertainty <= 0:
        raise ValueError("freq_uncertainty must be positive")
    if max_walk < 0:
        raise ValueError("max_walk must be non-negative")
    return max_walk / freq_uncertainty
