"""Coincidence matching, sifting convention, QBER estimation."""

import numpy as np
import pytest
from scipy import stats

from qkdlink.events import TICK, TimestampStream
from qkdlink.sifter import (
    disclose_qber,
    find_coincidences,
    measure_qber,
    sift,
    wilson_interval,
)
from qkdlink.simulator import simulate_session
from qkdlink.timesync import OffsetEstimate

from conftest import SessionOracle, assert_within_sigma, night_sim_config

ZERO = OffsetEstimate(offset=0.0)


def make(ticks, dets, party=0):
    return TimestampStream(party, np.array(ticks, np.int64),
                           np.array(dets, np.uint8))


def test_disjoint_ranges_empty():
    a = make([0, 10_000], [0, 1])
    b = make([10_000_000, 10_010_000], [2, 3])
    assert len(find_coincidences(a, b, ZERO)) == 0


def test_simple_matches_and_residuals():
    # tau_c = 2 ns total -> accept |residual| <= 8 ticks
    a = make([1000, 9000, 17000], [0, 2, 1])
    b = make([1004, 9020, 17008], [2, 0, 3])
    pairs = find_coincidences(a, b, ZERO, tau_c=2e-9)
    accepted = pairs.select(pairs.accepted)
    assert [int(i) for i in accepted.index_a] == [0, 2]
    assert [int(i) for i in accepted.index_b] == [0, 2]
    assert np.allclose(accepted.residual, [4 * TICK, 8 * TICK])


def test_greedy_prefers_smaller_residual():
    # two A events compete for one B event
    a = make([1000, 1010], [0, 2])
    b = make([1004], [2])
    pairs = find_coincidences(a, b, ZERO, tau_c=2e-9)
    assert len(pairs) == 1
    assert int(pairs.index_a[0]) == 0  # residual 4 beats residual -6


def test_multi_candidate_takes_nearest():
    a = make([1000], [0])
    b = make([995, 1002, 1007], [1, 2, 3])
    pairs = find_coincidences(a, b, ZERO, tau_c=2e-9)
    assert len(pairs) == 1
    assert int(pairs.index_b[0]) == 1


def test_order_independence_with_sparse_streams():
    # when every inter-event gap exceeds tau_c, greedy matching equals the
    # brute-force unique-nearest assignment
    rng = np.random.default_rng(8)
    ticks_a = np.cumsum(rng.integers(100, 4000, 300)) + 1000
    jit = rng.integers(-8, 9, ticks_a.size)
    ticks_b = ticks_a + jit
    keep = rng.random(ticks_a.size) < 0.7
    b = make(np.sort(ticks_b[keep]), np.zeros(keep.sum(), np.uint8))
    a = make(ticks_a, np.zeros(ticks_a.size, np.uint8))
    pairs = find_coincidences(a, b, ZERO, tau_c=2e-9)
    # brute force
    expected = []
    for i, t in enumerate(a.ticks):
        d = np.abs(b.ticks - t)
        j = int(np.argmin(d))
        if d[j] <= 8:
            expected.append((i, j))
    assert [(int(x), int(y)) for x, y in zip(pairs.index_a, pairs.index_b)] == expected


def test_track_window_pairs_are_separate_from_key_pairs():
    a = make([1000], [0])
    b = make([1020], [2])  # 2.5 ns away: outside tau_c/2, inside 3.75 ns
    pairs = find_coincidences(a, b, ZERO, tau_c=2e-9, track_window=3.75e-9)
    assert len(pairs) == 1
    assert not pairs.accepted[0]
    assert pairs.tracking_samples(3.75e-9).shape == (1, 2)
    assert len(pairs.select(pairs.accepted)) == 0


class TestSift:
    def pairs_for(self, det_a, det_b):
        a = make([1000], [det_a])
        b = make([1000], [det_b])
        return find_coincidences(a, b, ZERO, tau_c=2e-9)

    def test_hv_pair_kept_and_keys_agree(self):
        key_a, key_b = sift(self.pairs_for(0, 2))  # (H, V)
        assert len(key_a) == 1
        assert key_a.basis[0] == 0
        # A flips its raw bit, so both parties read the same value
        assert key_a.bits[0] == key_b.bits[0] == 1

    def test_v_h_pair(self):
        key_a, key_b = sift(self.pairs_for(2, 0))
        assert key_a.bits[0] == key_b.bits[0] == 0

    def test_basis_mismatch_discarded(self):
        key_a, key_b = sift(self.pairs_for(0, 1))  # (H, +45)
        assert len(key_a) == 0
        assert key_a.counts.unmatched == 1
        assert key_a.counts.total == 1

    def test_sift_fraction_half(self):
        cfg = night_sim_config(seed=41, duration=30.0)
        a, b, _ = simulate_session(cfg)
        pairs = find_coincidences(a, b, ZERO, tau_c=2e-9)
        key_a, _ = sift(pairs)
        n, k = key_a.counts.total, key_a.counts.matched
        assert stats.binomtest(k, n, 0.5).pvalue > 0.01
        # the day-scale observation: sifted/raw around 0.488 +- 0.02
        assert abs(k / n - 0.488) <= 0.02


class TestRates:
    def test_accepted_pair_rate_matches_model(self):
        cfg = night_sim_config(seed=42, duration=30.0)
        a, b, truth = simulate_session(cfg)
        pairs = find_coincidences(a, b, ZERO, tau_c=2e-9)
        oracle = SessionOracle(cfg)
        accepted = int(np.count_nonzero(pairs.accepted))
        assert_within_sigma(accepted,
                            oracle.accepted_pair_rate
                            + 2.0 * oracle.accidental_matched_rate,
                            cfg.duration, label="accepted pairs")

    def test_background_only_accidentals(self):
        # two uncorrelated 100 kcps streams: accidental rate per the
        # coincidence-window product of the detected rates
        cfg1 = night_sim_config(seed=43, duration=20.0, transmission=0.0,
                                r_bg=100_000.0)
        cfg2 = night_sim_config(seed=44, duration=20.0, transmission=0.0,
                                r_bg=100_000.0)
        _, b1, _ = simulate_session(cfg1)
        _, b2, _ = simulate_session(cfg2)
        b1 = TimestampStream(0, b1.ticks, b1.detectors)
        pairs = find_coincidences(b1, b2, ZERO, tau_c=2e-9)
        rate_1 = len(b1) / 20.0
        rate_2 = len(b2) / 20.0
        expected = rate_1 * rate_2 * 2e-9  # all-basis accidentals
        assert_within_sigma(int(np.count_nonzero(pairs.accepted)), expected, 20.0,
                            label="accidentals")

    def test_all_residuals_in_window(self):
        cfg = night_sim_config(seed=45, duration=10.0)
        a, b, _ = simulate_session(cfg)
        pairs = find_coincidences(a, b, ZERO, tau_c=2e-9)
        acc = pairs.select(pairs.accepted)
        assert np.all(np.abs(acc.residual) <= 1e-9 + 1e-15)


class TestQberEstimate:
    def _keys(self, seed=46, duration=30.0, **kw):
        cfg = night_sim_config(seed=seed, duration=duration, **kw)
        a, b, _ = simulate_session(cfg)
        pairs = find_coincidences(a, b, ZERO, tau_c=2e-9)
        return sift(pairs), cfg

    def test_identical_keys_zero(self):
        (key_a, key_b), _ = self._keys()
        _, _, est = disclose_qber(key_a, key_a, np.arange(0, len(key_a), 7))
        assert est.q == 0.0

    def test_complement_keys_one(self):
        (key_a, _), _ = self._keys()
        comp = key_a.drop(np.array([], dtype=np.int64))
        comp.bits = key_a.bits ^ 1
        _, _, est = disclose_qber(key_a, comp, np.arange(0, len(key_a), 5))
        assert est.q == 1.0

    def test_sampled_bits_removed(self):
        (key_a, key_b), _ = self._keys()
        n = len(key_a)
        a2, b2, est = measure_qber(key_a, key_b, 0.05, rng=1)
        assert len(a2) == len(b2) == n - est.n_sampled
        assert est.n_sampled == max(1, round(0.05 * n))

    def test_night_qber_matches_model(self):
        (key_a, key_b), cfg = self._keys(seed=47, duration=60.0)
        a2, b2, est = measure_qber(key_a, key_b, 0.5, rng=2)
        oracle = SessionOracle(cfg)
        assert est.low <= oracle.qber <= est.high

    def test_visibility_only_qber(self):
        # no background, lossless-ish channel: QBER from visibilities alone
        (key_a, key_b), cfg = self._keys(seed=48, duration=30.0, r_bg=0.0)
        _, _, est = measure_qber(key_a, key_b, 0.5, rng=3)
        assert est.low <= 0.026 + 3e-4
        assert est.high >= 0.026 - 3e-4
        assert est.per_basis["hv"].q < est.per_basis["diag"].q

    def test_empty_key_rejected(self):
        (key_a, key_b), _ = self._keys()
        empty = key_a.drop(np.arange(len(key_a)))
        with pytest.raises(ValueError):
            measure_qber(empty, empty, 0.05, rng=0)


def test_wilson_interval_sanity():
    lo, hi = wilson_interval(5, 100)
    assert 0.0 < lo < 0.05 < hi < 0.12
    assert wilson_interval(0, 0) == (0.0, 1.0)
    lo0, hi0 = wilson_interval(0, 50)
    assert lo0 == 0.0 and hi0 > 0.0
