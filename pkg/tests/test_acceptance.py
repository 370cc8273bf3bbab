"""Acceptance criteria, one test per criterion, at the stated tolerances.

Run with ``pytest tests/test_acceptance.py -v -s`` to see one PASS line
per criterion with its runtime (each budget is asserted as well).
"""

import math
import time

import numpy as np
import pytest

from qkdlink.events import TICK
from qkdlink.linkmodel import background_threshold, qber_total, rate_breakdown, saturate, desaturate
from qkdlink.params import ChannelParams, DetectorParams, SourceParams
from qkdlink.pipeline import PipelineConfig, run_local_pipeline, tracked_coincidences
from qkdlink.postproc import (
    ReconciledKey,
    binary_entropy,
    cascade_reconcile,
    privacy_amplify,
)
from qkdlink.sidechannel import asymmetry_stats, load_reference_matrix
from qkdlink.sifter import find_coincidences, sift
from qkdlink.simulator import simulate_session
from qkdlink.timecode import encode_timing, geometric_delta_entropy
from qkdlink.timesync import AcquisitionError, SyncConfig, acquire_offset, track
from qkdlink.timesync import OffsetEstimate

from conftest import (
    NIGHT_INCIDENT,
    SessionOracle,
    binomial_sigma_bound,
    night_sim_config,
)

SRC = SourceParams(78000.0, 71000.0, 11000.0, 0.975, 0.921)
DET = DetectorParams()
CH = ChannelParams(0.15, 0.0)


class _Budget:
    def __init__(self, seconds, label):
        self.seconds = seconds
        self.label = label

    def __enter__(self):
        self.t0 = time.monotonic()
        return self

    def __exit__(self, exc_type, *_):
        elapsed = time.monotonic() - self.t0
        if exc_type is None:
            assert elapsed < self.seconds, (
                f"{self.label}: {elapsed:.1f}s exceeded the "
                f"{self.seconds:.0f}s budget")
            print(f"\nPASS {self.label} ({elapsed:.1f}s)")
        else:
            print(f"\nFAIL {self.label} ({elapsed:.1f}s)")
        return False


def test_c01_background_threshold_reproduction():
    with _Budget(1.0, "criterion 1: 11% QBER threshold within 15% of 1.8e6 cps"):
        found = background_threshold(SRC, CH, DET, 0.11, q_i_override=0.043)
        assert abs(found - 1.8e6) / 1.8e6 <= 0.15, f"threshold {found:.3g}"


def test_c02_qber_curve_at_peak_background():
    with _Budget(1.0, "criterion 2: q_t at 450 kcps inside [5.7%, 6.8%]"):
        qb = qber_total(SRC, ChannelParams(0.15, 450_000.0), DET, q_i_override=0.043)
        assert 0.057 <= qb.q_t <= 0.068, f"q_t = {qb.q_t:.4f}"


def test_c03_correlation_matrix_regression():
    with _Budget(1.0, "criterion 3: reference matrix asymmetries and leaks"):
        report = asymmetry_stats(load_reference_matrix())
        assert report.hv_bit_ratio == pytest.approx(0.539, abs=1e-3)
        assert report.diag_bit_ratio == pytest.approx(0.525, abs=1e-3)
        assert report.basis_ratio == pytest.approx(0.425, abs=1e-3)
        assert report.hv_entropy_leak == pytest.approx(0.0045, abs=2e-4)
        assert report.diag_entropy_leak == pytest.approx(0.0018, abs=2e-4)


def test_c04_model_simulator_agreement():
    with _Budget(120.0, "criterion 4: sifted rate and QBER vs model, 10 sessions"):
        conditions = [7000.0] * 5 + [250_000.0] * 5
        for seed, r_bg in enumerate(conditions):
            cfg = night_sim_config(seed=700 + seed, duration=60.0, r_bg=r_bg)
            a, b, _ = simulate_session(cfg)
            oracle = SessionOracle(cfg)
            pairs = find_coincidences(a, b, OffsetEstimate(offset=0.0), tau_c=2e-9)
            key_a, key_b = sift(pairs)
            n = len(key_a)
            expected = oracle.sifted_rate * cfg.duration
            assert abs(n - expected) <= 3.0 * math.sqrt(expected), (
                f"seed {seed} r_bg {r_bg}: sifted {n} vs {expected:.0f}")
            q_meas = float(np.mean(key_a.bits != key_b.bits))
            bound = binomial_sigma_bound(oracle.qber, n)
            assert abs(q_meas - oracle.qber) <= bound, (
                f"seed {seed} r_bg {r_bg}: q {q_meas:.4f} vs {oracle.qber:.4f} "
                f"(3 sigma = {bound:.4f})")


def test_c05_acquisition_robustness():
    label = "criterion 5: acquisition at 1500 cps / 250 kcps, >=95/100 trials"
    with _Budget(120.0, label):
        # transmission tuned so the detected coincidence rate sits at the
        # reported resynchronization operating point of ~1500 cps
        success = 0
        trials = 100
        rng = np.random.default_rng(12345)
        for trial in range(trials):
            offset = float(rng.uniform(-2e-3, 2e-3))
            cfg = night_sim_config(seed=2000 + trial, duration=5.2,
                                   r_bg=250_000.0, transmission=0.149,
                                   clock_offset=offset, clock_skew=1e-12)
            a, b, _ = simulate_session(cfg)
            try:
                est = acquire_offset(a, b, SyncConfig())
            except (AcquisitionError, ValueError):
                continue
            if abs(est.offset - offset) <= 2e-9:
                success += 1
        assert success >= 95, f"{success}/100 acquisitions inside 2 ns"


def test_c06_drift_tracking():
    with _Budget(60.0, "criterion 6: 1e-9 clock skew tracked within 1 ns"):
        skew = 1e-9
        cfg = night_sim_config(seed=606, duration=120.0, clock_offset=0.5e-3,
                               clock_skew=skew)
        a, b, truth = simulate_session(cfg)
        est = acquire_offset(a, b, SyncConfig())
        pcfg = PipelineConfig()
        # chunked sweep, recording the tracked prediction against truth
        chunk = 1.0
        worst_after_lock = 0.0
        t0 = float(a.ticks[0]) * TICK
        pos = 0
        while pos < len(a):
            t_edge = t0 + chunk
            end = int(np.searchsorted(a.ticks, round(t_edge / TICK)))
            part_a = a.slice_seconds(t0, t_edge)
            if len(part_a):
                pred = float(est.predict(t0 + 0.5 * chunk))
                b_lo = t0 + pred - 0.01
                b_hi = t_edge + pred + 0.01
                part_b = b.slice_seconds(b_lo, b_hi)
                if len(part_b):
                    pairs = find_coincidences(part_a, part_b, est, tau_c=2e-9,
                                              track_window=3.75e-9)
                    est = track(est, pairs.tracking_samples(3.75e-9), SyncConfig())
            err = abs(est.predict(t_edge) - truth.offset_at(t_edge))
            if t_edge - float(a.ticks[0]) * TICK > 20.0:
                worst_after_lock = max(worst_after_lock, err)
            t0 = t_edge
            pos = end
        assert worst_after_lock <= 1e-9, f"worst error {worst_after_lock*1e9:.2f} ns"
        assert est.freq_drift == pytest.approx(skew, rel=0.05)


def test_c07_reconciliation_campaign():
    with _Budget(60.0, "criterion 7: 100 CASCADE runs, zero residual, leak band"):
        n, q = 50_000, 0.05
        band = (1.0 * binary_entropy(q) * n, 1.4 * binary_entropy(q) * n)
        for seed in range(100):
            rng = np.random.default_rng(3000 + seed)
            bits = rng.integers(0, 2, n).astype(np.uint8)
            noisy = np.where(rng.random(n) < q, bits ^ 1, bits).astype(np.uint8)
            rk_a, rk_b = cascade_reconcile(bits, noisy, q_est=q, session_seed=seed)
            assert np.array_equal(rk_b.bits, bits), f"residual errors at seed {seed}"
            assert band[0] <= rk_b.leaked_bits <= band[1], (
                f"seed {seed}: leaked {rk_b.leaked_bits}, band {band}")


def test_c08_end_to_end_pipeline():
    with _Budget(120.0, "criterion 8: 60 s night pipeline, accounting identity, "
                        "replay determinism"):
        cfg = night_sim_config(seed=808, duration=60.0, clock_offset=1.2e-3,
                               clock_skew=1e-12, lags_b=(0.0, 0.5e-9, 0.0, 0.5e-9))
        keys = []
        for _ in range(2):
            a, b, _ = simulate_session(cfg)
            result = run_local_pipeline(a, b, PipelineConfig(session_seed=cfg.seed))
            assert result.status == "ok"
            assert len(result.key_bits) > 0
            for row in result.accounting:
                expected = row.n_in - math.ceil(
                    row.n_in * binary_entropy(row.qber)) - row.leak_ec
                assert row.n_out == max(0, expected)
            total_leak = sum(r.leak_ec for r in result.accounting)
            assert total_leak >= result.leaked_bits
            keys.append(np.packbits(result.key_bits).tobytes())
        assert keys[0] == keys[1], "same seed must reproduce the key bit-exactly"


def test_c09_encoding_overhead():
    with _Budget(30.0, "criterion 9: delta encoding within 15% of the gap entropy"):
        for rate in (1_000, 10_000, 100_000, 1_000_000):
            rng = np.random.default_rng(rate)
            gaps = rng.exponential(1.0 / rate, 150_000) / TICK
            ticks = np.cumsum(np.maximum(1, gaps.astype(np.int64)))
            basis = rng.integers(0, 2, ticks.size).astype(np.uint8)
            block = encode_timing(ticks, basis)
            entropy = geometric_delta_entropy(np.diff(ticks))
            ratio = block.timing_bits_per_event() / entropy
            assert ratio <= 1.15, f"{rate} cps: overhead {ratio:.3f}"


def test_c10_property_suite_summary():
    # the module test files run every invariant in depth; this recaps the
    # cross-module ones in a single place
    with _Budget(60.0, "criterion 10: invariant spot checks"):
        # saturation monotone + inversion
        grid = np.geomspace(1.0, 1e8, 50)
        vals = [saturate(r, 2.5e-7) for r in grid]
        assert all(b > a for a, b in zip(vals, vals[1:]))
        for r in grid:
            assert desaturate(saturate(r, 2.5e-7), 2.5e-7) == pytest.approx(r, rel=1e-9)
        # alpha cancellation
        rb = rate_breakdown(SRC, ChannelParams(0.15, 3e5), DET)
        q_plain = (0.043 * rb.r_sig + 0.5 * rb.r_a) / (rb.r_sig + rb.r_a)
        q_scaled = (0.043 * rb.alpha * rb.r_sig + 0.5 * rb.alpha * rb.r_a) / (
            rb.alpha * rb.r_sig + rb.alpha * rb.r_a)
        assert q_plain == pytest.approx(q_scaled, abs=1e-12)
        # basis-sift fraction 1/2
        cfg = night_sim_config(seed=1010, duration=20.0)
        a, b, _ = simulate_session(cfg)
        pairs = find_coincidences(a, b, OffsetEstimate(offset=0.0), tau_c=2e-9)
        key_a, _ = sift(pairs)
        frac = key_a.counts.matched / key_a.counts.total
        assert abs(frac - 0.5) <= 3.0 * 0.5 / math.sqrt(key_a.counts.total)
        # avalanche + monobit on the final key path
        rng = np.random.default_rng(42)
        bits = rng.integers(0, 2, 6000).astype(np.uint8)
        key = ReconciledKey(bits, 1500, [], True)
        flips = []
        ones = total = 0
        for trial in range(25):
            seed = int(rng.integers(1, 1 << 32))
            out = privacy_amplify(key, 0.08, seeds=[seed])
            mutated = bits.copy()
            mutated[int(rng.integers(0, bits.size))] ^= 1
            out2 = privacy_amplify(ReconciledKey(mutated, 1500, [], True),
                                   0.08, seeds=[seed])
            flips.append(float(np.mean(out.bits != out2.bits)))
            ones += int(out.bits.sum())
            total += len(out)
        assert abs(np.mean(flips) - 0.5) <= 0.05
        assert abs(ones / total - 0.5) <= 4 * 0.5 / math.sqrt(total)
