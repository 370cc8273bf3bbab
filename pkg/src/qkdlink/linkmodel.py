"""Closed-form model of the photon link: saturation, rates, QBER, thresholds.

The model answers three operational questions for a BBM92 link with one
receiver arm exposed to ambient background light:

* how fast do the detectors saturate (dead-time compression),
* how much raw key and how many accidental coincidences to expect,
* at which background rate the total QBER crosses a given security bound.

Everything here is a pure function of the parameter records; all rates are
events/second and times are seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

from .params import ChannelParams, DetectorParams, SourceParams


@dataclass(frozen=True)
class RateBreakdown:
    """Signal/accidental rates with the dead-time correction applied."""

    r_sig: float            # ideal sifted-signal rate, rc*T/2
    r_a: float              # accidental matched-basis coincidence rate
    alpha: float            # dead-time correction factor of the receiver side
    r_sig_prime: float      # alpha * r_sig, what the counters actually show
    r_total_detected: float  # receiver-side detected rate, alpha*(r_bg + r2*T)


@dataclass(frozen=True)
class QberBreakdown:
    q_i: float
    q_t: float
    delta_q: float          # exact excess QBER, q_t - q_i
    delta_q_approx: float   # background-dominated approximation


def saturate(r: float, tau_d: float) -> float:
    """Detected rate of a non-paralyzable detector with dead time ``tau_d``.

    An incident event rate ``r`` is compressed to ``r / (1 + r*tau_d)``:
    monotone in ``r`` and bounded by ``1/tau_d``.
    """
    if r < 0 or tau_d < 0:
        raise ValueError("saturate() needs non-negative rate and dead time")
    return r / (1.0 + r * tau_d)


def desaturate(r_detected: float, tau_d: float) -> float:
    """Invert :func:`saturate`: recover the incident rate from a counter reading.

    Only rates strictly below the hard ceiling ``1/tau_d`` are invertible.
    """
    if r_detected < 0 or tau_d < 0:
        raise ValueError("desaturate() needs non-negative rate and dead time")
    if tau_d > 0 and r_detected * tau_d >= 1.0:
        raise ValueError(
            f"detected rate {r_detected:g} >= 1/tau_d = {1.0 / tau_d:g}: "
            "saturation is not invertible"
        )
    return r_detected / (1.0 - r_detected * tau_d)


def incident_source_rates(src: SourceParams, det: DetectorParams) -> SourceParams:
    """Undo the bench dead-time compression baked into counter readings.

    Singles are spread evenly over the four detectors of a side, so each
    side saturates with an effective dead time ``tau_d/4``. The coincidence
    rate is suppressed by both sides' live fractions at bench load (both
    arms plugged straight into their analyzers, no channel loss).
    """
    if not src.detected_rates:
        return src
    tau = det.tau_d / det.n_detectors
    r1 = desaturate(src.r1, tau)
    r2 = desaturate(src.r2, tau)
    live_1 = 1.0 / (1.0 + r1 * tau)
    live_2 = 1.0 / (1.0 + r2 * tau)
    rc = min(src.rc / (live_1 * live_2), min(r1, r2))
    return SourceParams(r1=r1, r2=r2, rc=rc, v_hv=src.v_hv, v_diag=src.v_diag)


def rate_breakdown(src: SourceParams, ch: ChannelParams, det: DetectorParams) -> RateBreakdown:
    """Signal, accidental and saturated rates for one operating point."""
    s = incident_source_rates(src, det)
    T = ch.transmission
    r_sig = 0.5 * s.rc * T
    r_a = 0.5 * (s.r1 - T * s.rc) * (ch.r_bg + T * (s.r2 - s.rc)) * det.tau_c
    alpha = 1.0 / (1.0 + (ch.r_bg + s.r2 * T) * det.tau_d / det.n_detectors)
    return RateBreakdown(
        r_sig=r_sig,
        r_a=r_a,
        alpha=alpha,
        r_sig_prime=alpha * r_sig,
        r_total_detected=alpha * (ch.r_bg + s.r2 * T),
    )


def qber_total(
    src: SourceParams,
    ch: ChannelParams,
    det: DetectorParams,
    q_i_override: float | None = None,
) -> QberBreakdown:
    """Total QBER as the signal/accidental weighted average.

    Accidental coincidences are polarization-uncorrelated and contribute an
    error ratio of 1/2; the dead-time factor alpha cancels because it
    multiplies signal and accidentals alike. With an opaque channel and a
    nonzero pair rate everything is accidental and q_t = 1/2 (not an error).
    """
    s = incident_source_rates(src, det)
    q_i = s.intrinsic_qber if q_i_override is None else float(q_i_override)
    if not 0.0 <= q_i <= 0.5:
        raise ValueError("intrinsic QBER must lie in [0, 0.5]")
    rb = rate_breakdown(src, ch, det)
    total = rb.r_sig + rb.r_a
    if total == 0.0:
        q_t = q_i  # no events at all: error ratio defaults to the intrinsic one
    else:
        q_t = (q_i * rb.r_sig + 0.5 * rb.r_a) / total
    T = ch.transmission
    if T > 0.0 and s.rc > 0.0:
        dq_approx = ch.r_bg * det.tau_c / (2.0 * T * (s.rc / s.r1))
    else:
        dq_approx = math.inf if ch.r_bg > 0.0 else 0.0
    return QberBreakdown(q_i=q_i, q_t=q_t, delta_q=q_t - q_i, delta_q_approx=dq_approx)


_BRACKET_CEILING = 1e15


def background_threshold(
    src: SourceParams,
    ch: ChannelParams,
    det: DetectorParams,
    q_limit: float,
    q_i_override: float | None = None,
    rel_tol: float = 1e-12,
) -> float:
    """Background rate at which the total QBER reaches ``q_limit``.

    q_t is monotone in the background rate and approaches 1/2 from below,
    so the root is unique whenever it exists. Found by bisection on a
    bracket grown geometrically from 1 cps (no derivatives needed).
    """

    def q_at(r_bg: float) -> float:
        return qber_total(src, ChannelParams(ch.transmission, r_bg), det, q_i_override).q_t

    q0 = q_at(0.0)
    if not q0 < q_limit < 0.5:
        raise ValueError(
            f"q_limit {q_limit:g} is unreachable: QBER spans ({q0:g}, 0.5) "
            "over all background rates"
        )
    hi = 1.0
    while q_at(hi) < q_limit:
        hi *= 2.0
        if hi > _BRACKET_CEILING:
            raise ValueError(f"q_limit {q_limit:g} not reached below {_BRACKET_CEILING:g} cps")
    lo = 0.0 if hi == 1.0 else hi / 2.0
    while hi - lo > rel_tol * hi:
        mid = 0.5 * (lo + hi)
        if q_at(mid) < q_limit:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def sweep(
    src: SourceParams,
    ch: ChannelParams,
    det: DetectorParams,
    r_bg_grid: Sequence[float],
    q_i_override: float | None = None,
) -> list[tuple[float, float, float, float]]:
    """Model curves over a background-rate grid (``ch.r_bg`` is ignored).

    One row per grid point: (r_bg, detected total rate, saturated sifted
    rate, total QBER). Feed to :func:`sweep_csv` for the file format.
    """
    if len(r_bg_grid) == 0:
        raise ValueError("empty background grid")
    rows = []
    for r_bg in r_bg_grid:
        point = ChannelParams(ch.transmission, float(r_bg))
        rb = rate_breakdown(src, point, det)
        qb = qber_total(src, point, det, q_i_override)
        rows.append((float(r_bg), rb.r_total_detected, rb.r_sig_prime, qb.q_t))
    return rows


def sweep_csv(rows: Sequence[tuple[float, float, float, float]]) -> str:
    """Render sweep rows as CSV (decimal notation, LF line endings)."""
    lines = ["r_bg,detected_total,sifted_rate,qber"]
    for r_bg, det_total, sifted, qber in rows:
        lines.append(f"{r_bg:.6f},{det_total:.6f},{sifted:.6f},{qber:.9f}")
    return "\n".join(lines) + "\n"
