"""One-shot key extraction from a pair of timestamp streams in one process.

Chains acquisition, chunked coincidence tracking, sifting, QBER sampling,
CASCADE (over a loopback channel) and privacy amplification. This is the
file-to-key path of the command line tool and the reference for what the
two networked endpoints compute together.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .endpoint import _ec_q_estimate, shared_sample_positions
from .events import TICK, TimestampStream
from .postproc import FinalKey, cascade_reconcile, privacy_amplify, seeded_seed_source
from .sifter import Coincidences, QberEstimate, disclose_qber, find_coincidences, sift
from .timesync import OffsetEstimate, SyncConfig, acquire_offset, track

STATUS_OK = "ok"
STATUS_QBER_HIGH = "qber_too_high"
STATUS_NO_PAIRS = "no_pairs"


@dataclass(frozen=True)
class PipelineConfig:
    session_seed: int = 0
    sync: SyncConfig = field(default_factory=SyncConfig)
    tau_c: float = 2e-9
    chunk_seconds: float = 1.0
    qber_sample_fraction: float = 0.05
    qber_limit: float = 0.11
    block_min: int = 5000
    target_residual: float = 1e-9
    entropy: str = "seeded"


@dataclass
class PipelineResult:
    status: str
    final_key: FinalKey | None = None
    qber: QberEstimate | None = None
    q_t_used: float | None = None
    offset: OffsetEstimate | None = None
    pairs: Coincidences | None = None
    n_sifted: int = 0
    leaked_bits: int = 0
    corrections: int = 0

    @property
    def key_bits(self) -> np.ndarray:
        return self.final_key.bits if self.final_key else np.empty(0, dtype=np.uint8)

    @property
    def accounting(self):
        return self.final_key.accounting if self.final_key else []


def tracked_coincidences(a: TimestampStream, b: TimestampStream,
                         estimate: OffsetEstimate, cfg: PipelineConfig
                         ) -> tuple[Coincidences, OffsetEstimate]:
    """Sweep stream A in time chunks against B, updating the servo as we go."""
    chunk_ticks = max(1, int(round(cfg.chunk_seconds / TICK)))
    margin_ticks = int(round(0.05 / TICK))
    parts: list[Coincidences] = []
    pos = 0
    t0 = a.start_tick
    n = len(a)
    while pos < n:
        edge = t0 + ((int(a.ticks[pos]) - t0) // chunk_ticks + 1) * chunk_ticks
        end = int(np.searchsorted(a.ticks, edge, "left"))
        if end > pos:
            chunk = TimestampStream(a.party, a.ticks[pos:end], a.detectors[pos:end])
            pred_ticks = int(round(float(estimate.predict(
                0.5 * (float(chunk.ticks[0]) + float(chunk.ticks[-1])) * TICK)) / TICK))
            lo = int(np.searchsorted(b.ticks, chunk.ticks[0] + pred_ticks - margin_ticks))
            hi = int(np.searchsorted(b.ticks, chunk.ticks[-1] + pred_ticks + margin_ticks))
            if hi > lo:
                b_part = TimestampStream(b.party, b.ticks[lo:hi], b.detectors[lo:hi])
                pairs = find_coincidences(chunk, b_part, estimate, cfg.tau_c,
                                          track_window=cfg.sync.track_window)
                estimate = track(estimate,
                                 pairs.tracking_samples(cfg.sync.track_window),
                                 cfg.sync)
                parts.append(Coincidences(
                    pairs.index_a + pos, pairs.index_b + lo,
                    pairs.detector_a, pairs.detector_b,
                    pairs.residual, pairs.time_a, pairs.accept_window))
        pos = end
    if parts:
        merged = Coincidences(
            np.concatenate([p.index_a for p in parts]),
            np.concatenate([p.index_b for p in parts]),
            np.concatenate([p.detector_a for p in parts]),
            np.concatenate([p.detector_b for p in parts]),
            np.concatenate([p.residual for p in parts]),
            np.concatenate([p.time_a for p in parts]),
            cfg.tau_c / 2.0)
    else:
        empty_i = np.empty(0, np.int64)
        empty_b = np.empty(0, np.uint8)
        merged = Coincidences(empty_i, empty_i, empty_b, empty_b,
                              np.empty(0), np.empty(0), cfg.tau_c / 2.0)
    return merged, estimate


def run_local_pipeline(a: TimestampStream, b: TimestampStream,
                       cfg: PipelineConfig = PipelineConfig()) -> PipelineResult:
    """Full distillation of a stream pair; raises on acquisition failure."""
    estimate = acquire_offset(a, b, cfg.sync)
    pairs, estimate = tracked_coincidences(a, b, estimate, cfg)
    key_a, key_b = sift(pairs)
    if len(key_a) < 16:
        return PipelineResult(STATUS_NO_PAIRS, offset=estimate, pairs=pairs,
                              n_sifted=len(key_a))

    positions = shared_sample_positions(cfg.session_seed, len(key_a),
                                        cfg.qber_sample_fraction)
    key_a, key_b, q = disclose_qber(key_a, key_b, positions)
    if q.q > cfg.qber_limit:
        return PipelineResult(STATUS_QBER_HIGH, qber=q, offset=estimate,
                              pairs=pairs, n_sifted=len(key_a))

    q_est = _ec_q_estimate(q.q, q.n_sampled)
    rk_a, rk_b = cascade_reconcile(key_a.bits, key_b.bits, q_est,
                                   block_min=cfg.block_min,
                                   target_residual=cfg.target_residual,
                                   session_seed=cfg.session_seed)
    q_t_used = max(q.q, rk_b.corrections / max(len(key_a), 1))
    if cfg.entropy == "seeded":
        rng = np.random.default_rng([cfg.session_seed & 0xFFFFFFFF, 0x9A])
        seed_source = seeded_seed_source(rng)
    else:
        seed_source = None
    final = privacy_amplify(rk_a, q_t_used, seed_source=seed_source,
                            block_min=cfg.block_min)
    return PipelineResult(STATUS_OK, final_key=final, qber=q, q_t_used=q_t_used,
                          offset=estimate, pairs=pairs,
                          n_sifted=len(key_a) + q.n_sampled,
                          leaked_bits=rk_b.leaked_bits,
                          corrections=rk_b.corrections)
