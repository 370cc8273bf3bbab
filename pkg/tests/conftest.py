"""Shared fixtures and independent prediction oracles.

The oracles here recompute expectations from first principles (rate
algebra, survival factors, Gaussian window fractions) without touching
the pipeline code they are used to check.
"""

import math

import numpy as np
import pytest

from qkdlink.events import TICK
from qkdlink.params import ChannelParams, DetectorParams, SourceParams
from qkdlink.simulator import SimConfig

UNIT_DEAD = 1024 * TICK  # 128 ns timestamp-unit dead time, seconds

# Counter readings of the bench measurement (dead-time compressed).
NIGHT_DETECTED = SourceParams(78000.0, 71000.0, 11000.0, 0.975, 0.921,
                              detected_rates=True)
NIGHT_DARK_RATE = 7000.0
NIGHT_T = 0.15

# The same source expressed as incident rates (algebraic desaturation,
# worked out by hand: r = r'/(1 - r' tau_d/4), rc scaled by both live
# fractions at bench load).
R1_INC = 78000.0 / (1.0 - 78000.0 * 2.5e-7)
R2_INC = 71000.0 / (1.0 - 71000.0 * 2.5e-7)
RC_INC = 11000.0 / ((78000.0 / R1_INC) * (71000.0 / R2_INC))
NIGHT_INCIDENT = SourceParams(R1_INC, R2_INC, RC_INC, 0.975, 0.921)


@pytest.fixture(scope="session")
def detector():
    return DetectorParams()


def night_sim_config(seed, duration, r_bg=NIGHT_DARK_RATE, clock_offset=0.0,
                     clock_skew=0.0, jitter=0.5e-9, lags_b=(0.0, 0.0, 0.0, 0.0),
                     transmission=NIGHT_T, source=None, **extra) -> SimConfig:
    return SimConfig(
        source=source or NIGHT_INCIDENT,
        channel=ChannelParams(transmission, r_bg),
        detector=DetectorParams(),
        duration=duration,
        seed=seed,
        jitter_sigma=jitter,
        detector_lags_a=(0.0, 0.0, 0.0, 0.0),
        detector_lags_b=lags_b,
        clock_offset=clock_offset,
        clock_skew=clock_skew,
        **extra,
    )


def side_survival(incident_rate: float, tau_d: float = 1e-6) -> float:
    """Fraction of incident events that reach the output stream of one side.

    Per-detector non-paralyzable dead time (incident split evenly over 4
    detectors) gives the exact renewal survival 1/(1 + r tau_d/4); the
    merged 128 ns unit stage then loses a first-order fraction
    (3/4) * rate * tau_u, since an event's own detector is still dead and
    only the other three can collide with it.
    """
    alpha = 1.0 / (1.0 + incident_rate * tau_d / 4.0)
    after = incident_rate * alpha
    return alpha * (1.0 - 0.75 * after * UNIT_DEAD)


def residual_sigma(jitter_sigma: float) -> float:
    """Std of t_B - t_A for true pairs: two jitters plus two quantizers."""
    quant_var = TICK ** 2 / 12.0
    return math.sqrt(2.0 * jitter_sigma ** 2 + 2.0 * quant_var)


def window_fraction(jitter_sigma: float, half_window: float, lag: float = 0.0) -> float:
    """P(accepted) for a true pair under the tick-lattice window test.

    Tick residuals are the continuous Gaussian (sigma = sqrt(2)*jitter)
    plus a unit-triangle quantizer kernel; accepting |k| <= m ticks is,
    after averaging the triangle ramp, a continuous window of +-(m+1/2)
    ticks on the Gaussian alone.
    """
    m = round(half_window / TICK)
    eff = (m + 0.5) * TICK
    s = math.sqrt(2.0) * jitter_sigma
    a = (eff - lag) / (s * math.sqrt(2.0))
    b = (-eff - lag) / (s * math.sqrt(2.0))
    return 0.5 * (math.erf(a) - math.erf(b))


class SessionOracle:
    """First-principles predictions for a simulated session."""

    def __init__(self, cfg: SimConfig):
        src = cfg.source
        if src.detected_rates:
            raise ValueError("oracle expects incident rates")
        T = cfg.channel.transmission
        self.q_i = src.intrinsic_qber
        self.s_a = side_survival(src.r1, cfg.detector.tau_d)
        b_incident = cfg.channel.r_bg + T * src.r2
        self.s_b = side_survival(b_incident, cfg.detector.tau_d)
        self.rate_a_detected = src.r1 * self.s_a
        self.rate_b_detected = b_incident * self.s_b
        self.pair_rate_detected = src.rc * T * self.s_a * self.s_b
        self.f_window = window_fraction(cfg.jitter_sigma, cfg.detector.tau_c / 2.0)
        self.accepted_pair_rate = self.pair_rate_detected * self.f_window
        avail_a = self.rate_a_detected - self.pair_rate_detected
        avail_b = self.rate_b_detected - self.pair_rate_detected
        self.accidental_matched_rate = 0.5 * avail_a * avail_b * cfg.detector.tau_c
        self.sifted_rate = (0.5 * self.accepted_pair_rate
                            + self.accidental_matched_rate)
        self.qber = ((self.q_i * 0.5 * self.accepted_pair_rate
                      + 0.5 * self.accidental_matched_rate) / self.sifted_rate)


def assert_within_sigma(observed, expected_rate, duration, n_sigma=3.0, label=""):
    expected = expected_rate * duration
    sigma = math.sqrt(expected)
    assert abs(observed - expected) <= n_sigma * sigma, (
        f"{label}: observed {observed}, expected {expected:.1f} "
        f"({abs(observed - expected) / sigma:.2f} sigma)"
    )


def binomial_sigma_bound(q, n, n_sigma=3.0):
    return n_sigma * math.sqrt(max(q * (1.0 - q), 1e-12) / n)


def bits_entropy_balanced(bits: np.ndarray) -> float:
    return float(np.mean(bits))
