"""Generative model checks: rates, correlations, dead times, determinism."""

import math

import numpy as np
import pytest
from scipy import stats

from qkdlink.events import DETECTOR_DEAD_TICKS, TICK, UNIT_DEAD_TICKS
from qkdlink.params import ChannelParams, DetectorParams, SourceParams
from qkdlink.simulator import (
    GroundTruth,
    SimConfig,
    deadtime_mask,
    read_ground_truth,
    simulate_session,
    write_ground_truth,
)
from qkdlink.sifter import find_coincidences, sift
from qkdlink.timesync import OffsetEstimate

from conftest import (
    NIGHT_INCIDENT,
    SessionOracle,
    assert_within_sigma,
    night_sim_config,
    residual_sigma,
)


def test_deterministic_replay():
    cfg = night_sim_config(seed=11, duration=2.0)
    a1, b1, t1 = simulate_session(cfg)
    a2, b2, t2 = simulate_session(cfg)
    assert a1 == a2 and b1 == b2
    assert np.array_equal(t1.index_a, t2.index_a)
    assert np.array_equal(t1.index_b, t2.index_b)
    a3, _, _ = simulate_session(night_sim_config(seed=12, duration=2.0))
    assert a3 != a1


def test_no_pair_process():
    src = SourceParams(1000.0, 1000.0, 0.0)
    cfg = SimConfig(source=src, channel=ChannelParams(1.0, 0.0),
                    detector=DetectorParams(), duration=10.0, seed=4,
                    detector_lags_b=(0.0,) * 4)
    a, b, truth = simulate_session(cfg)
    assert len(truth) == 0
    assert len(a) > 0 and len(b) > 0


def test_perfect_correlations_zero_qber():
    src = SourceParams(2000.0, 2000.0, 2000.0, 1.0, 1.0)
    cfg = SimConfig(source=src, channel=ChannelParams(1.0, 0.0),
                    detector=DetectorParams(), duration=20.0, seed=9,
                    jitter_sigma=0.2e-9, detector_lags_b=(0.0,) * 4)
    a, b, _ = simulate_session(cfg)
    pairs = find_coincidences(a, b, OffsetEstimate(offset=0.0), tau_c=2e-9)
    key_a, key_b = sift(pairs)
    assert len(key_a) > 5000
    assert np.array_equal(key_a.bits, key_b.bits)


def test_detected_rates_match_model():
    # night operating point, both sides, against the survival-factor oracle
    cfg = night_sim_config(seed=21, duration=100.0)
    a, b, _ = simulate_session(cfg)
    oracle = SessionOracle(cfg)
    assert_within_sigma(len(a), oracle.rate_a_detected, cfg.duration, label="side A")
    assert_within_sigma(len(b), oracle.rate_b_detected, cfg.duration, label="side B")


def test_detected_pair_rate_matches_model():
    cfg = night_sim_config(seed=22, duration=60.0)
    _, _, truth = simulate_session(cfg)
    oracle = SessionOracle(cfg)
    assert_within_sigma(len(truth), oracle.pair_rate_detected, cfg.duration,
                        label="surviving pairs")


def _tick_residual_pmf(ks, center_s, jitter_sigma):
    """Exact law of tick_B - tick_A for a true pair, per integer tick.

    The continuous residual is N(center, sqrt(2)*jitter); the two floor
    quantizers add the difference of two uniform phases, i.e. convolve
    with the unit triangle kernel. Integrated numerically per lattice
    point.
    """
    mu = center_s / TICK
    sd = math.sqrt(2.0) * jitter_sigma / TICK
    u = np.linspace(-1.0, 1.0, 801)
    tri = 1.0 - np.abs(u)
    tri /= np.trapezoid(tri, u)
    pmf = np.array([
        np.trapezoid(tri * stats.norm.pdf(k - u, loc=mu, scale=sd), u)
        for k in ks])
    return pmf


def test_residual_histogram_gaussian():
    # residuals of true pairs follow N(lag difference, sqrt(2)*jitter) on
    # top of the tick lattice, checked per basis with a chi-square test
    lag = 0.5e-9
    cfg = night_sim_config(seed=101, duration=30.0, lags_b=(0.0, lag, 0.0, lag))
    a, b, truth = simulate_session(cfg)
    res_ticks = (b.ticks[truth.index_b] - a.ticks[truth.index_a]).astype(np.int64)
    det_b = b.detectors[truth.index_b]
    sigma = residual_sigma(cfg.jitter_sigma)
    for dets, center in (((0, 2), 0.0), ((1, 3), lag)):
        sel = np.isin(det_b, dets)
        sample = res_ticks[sel]
        assert sample.size > 5_000
        assert np.mean(sample) * TICK == pytest.approx(
            center, abs=4 * sigma / math.sqrt(sample.size))
        lo = int(round(center / TICK)) - 30
        ks = np.arange(lo, lo + 61)
        observed = np.array([np.count_nonzero(sample == k) for k in ks])
        tail = sample.size - observed.sum()
        pmf = _tick_residual_pmf(ks, center, cfg.jitter_sigma)
        expected = pmf * sample.size
        exp_tail = max(sample.size * (1.0 - pmf.sum()), 1e-9)
        keep = expected >= 8
        obs = np.append(observed[keep], observed[~keep].sum() + tail)
        exp = np.append(expected[keep], expected[~keep].sum() + exp_tail)
        chi2 = stats.chisquare(obs, exp * (obs.sum() / exp.sum()))
        assert chi2.pvalue > 0.01, f"combination {dets}: p={chi2.pvalue:.4f}"


def test_dead_time_scan():
    cfg = night_sim_config(seed=24, duration=10.0, r_bg=100000.0)
    _, b, _ = simulate_session(cfg)
    assert np.all(np.diff(b.ticks) >= UNIT_DEAD_TICKS)
    for d in range(4):
        own = b.ticks[b.detectors == d]
        assert np.all(np.diff(own) >= DETECTOR_DEAD_TICKS)


def test_deadtime_mask_is_greedy():
    rng = np.random.default_rng(1)
    for _ in range(100):
        ticks = np.sort(rng.integers(0, 3000, rng.integers(2, 400)))
        dead = int(rng.integers(1, 60))
        keep = deadtime_mask(ticks, dead)
        last = None
        for i, t in enumerate(ticks):
            expect = last is None or t - last >= dead
            assert keep[i] == expect
            if expect:
                last = t


def test_saturation_warning():
    src = SourceParams(8e6, 8e6, 10.0)
    cfg = SimConfig(source=src, channel=ChannelParams(1.0, 0.0),
                    detector=DetectorParams(), duration=0.5, seed=3,
                    detector_lags_b=(0.0,) * 4)
    with pytest.warns(RuntimeWarning, match="saturation"):
        simulate_session(cfg)


def test_clock_mapping_and_truth():
    offset = 2.5e-3
    skew = 1e-9
    cfg = night_sim_config(seed=25, duration=5.0, clock_offset=offset,
                           clock_skew=skew)
    a, b, truth = simulate_session(cfg)
    res = (b.ticks[truth.index_b] - a.ticks[truth.index_a]).astype(np.float64) * TICK
    t_a = a.ticks[truth.index_a].astype(np.float64) * TICK
    predicted = truth.offset_at(t_a)
    sigma = residual_sigma(cfg.jitter_sigma)
    assert np.mean(res - predicted) == pytest.approx(
        0.0, abs=4 * sigma / math.sqrt(len(truth)))
    assert truth.offset_at(0.0) == offset
    assert truth.offset_at(10.0) == pytest.approx(offset + skew * 10.0)


def test_ground_truth_roundtrip(tmp_path):
    truth = GroundTruth(np.array([3, 8]), np.array([10, 20]), np.array([11, 22]),
                        clock_offset=1e-3, clock_skew=2e-12)
    path = tmp_path / "truth.csv"
    write_ground_truth(truth, path)
    text = path.read_text()
    assert "pair_id,index_a,index_b" in text
    back = read_ground_truth(path)
    assert np.array_equal(back.pair_ids, truth.pair_ids)
    assert np.array_equal(back.index_a, truth.index_a)
    assert np.array_equal(back.index_b, truth.index_b)
    assert back.clock_offset == truth.clock_offset
    assert back.clock_skew == truth.clock_skew


def test_detected_rates_flag_in_sim():
    # feeding bench counter readings reproduces those readings in the
    # simulated per-side totals (the whole point of the desaturation)
    from conftest import NIGHT_DETECTED

    cfg = SimConfig(source=NIGHT_DETECTED, channel=ChannelParams(0.15, 7000.0),
                    detector=DetectorParams(), duration=50.0, seed=26,
                    jitter_sigma=0.5e-9, detector_lags_a=(0.0,) * 4,
                    detector_lags_b=(0.0,) * 4)
    a, _, _ = simulate_session(cfg)
    incident = NIGHT_INCIDENT.r1
    from conftest import side_survival

    assert_within_sigma(len(a), incident * side_survival(incident), cfg.duration,
                        label="side A from detected-rate config")
