"""Two-endpoint key agreement over the framed classical channel.

The sender (source side, the lower detection rate in daylight) streams
its timing and basis information; the receiver recovers the clock offset,
identifies coincidences, drives error correction as the correcting party,
and both ends finish with the identical final key or a clean abort.

Phases, in frame terms:

1. CONTROL hello both ways (the session seed travels here; it seeds the
   public permutations and sampling positions, never key material).
2. Sender: TIMING frames (delta-encoded chunks), then CONTROL timing_end.
   Receiver: acquires once enough data arrived, then tracks drift chunk
   by chunk.
3. Receiver: CONTROL match report (binary: accepted same-basis pairs as
   sender event indices). Both sides now hold aligned sifted keys.
4. Receiver: QBER_SAMPLE with its bits at seed-derived positions; the
   sender replies with the verdict. Sampled bits leave both keys.
5. Sender decides: CONTROL pause (QBER above the limit: no key, but the
   session stayed synchronized) or ec_start. CASCADE runs as PARITY/HASH
   request-reply pairs, the receiver correcting toward the sender.
6. Sender: SEED frame (per-block LFSR seeds plus the QBER charged); both
   compress locally. CONTROL bye closes the session.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .cascade import CascadeCorrector, CascadeVerificationError, ReferenceParty
from .events import TICK, TimestampStream, basis_of
from .framing import FrameChannel, FrameType, TransportClosed, control_payload
from .postproc import (
    BlockAccounting,
    FinalKey,
    ReconciledKey,
    os_seed_source,
    privacy_amplify,
    seeded_seed_source,
)
from .sifter import SiftCounts, SiftedKey, find_coincidences
from .timecode import EncodedTimingBlock, decode_timing, encode_timing
from .timesync import (
    AcquisitionError,
    OffsetEstimate,
    SyncConfig,
    acquire_offset,
    track,
)

ROLE_SENDER = "sender"
ROLE_RECEIVER = "receiver"

STATUS_OK = "ok"
STATUS_ACQ_FAILED = "acquisition_failed"
STATUS_QBER_HIGH = "qber_too_high"
STATUS_VERIFY_FAILED = "verification_failed"
STATUS_NO_PAIRS = "no_pairs"

_MATCH_MAGIC = b"MTCH"
_MATCH_HEADER = struct.Struct("<4sIII")  # magic, matched, unmatched, total
_SAMPLE_HEADER = struct.Struct("<I")
_MIN_SIFTED = 16  # below this no QBER statistic is meaningful


@dataclass(frozen=True)
class SessionConfig:
    session_seed: int = 0
    sync: SyncConfig = field(default_factory=SyncConfig)
    tau_c: float = 2e-9
    chunk_seconds: float = 1.0
    qber_sample_fraction: float = 0.05
    qber_limit: float = 0.11
    block_min: int = 5000
    target_residual: float = 1e-9
    entropy: str = "seeded"        # "seeded": replayable; "os": live entropy
    qber_override: float | None = None  # force the gate's view of the QBER


@dataclass
class SessionResult:
    status: str
    final_key: FinalKey | None = None
    qber: float | None = None
    q_est_used: float | None = None
    offset: OffsetEstimate | None = None
    n_sifted: int = 0
    leaked_bits: int = 0
    corrections: int = 0
    accounting: list[BlockAccounting] = field(default_factory=list)

    @property
    def key_bits(self) -> np.ndarray:
        return self.final_key.bits if self.final_key else np.empty(0, dtype=np.uint8)


def shared_sample_positions(seed: int, n: int, fraction: float) -> np.ndarray:
    """QBER sample positions both parties derive from the session seed."""
    rng = np.random.default_rng([seed & 0xFFFFFFFF, 0x5A17])
    k = min(n, max(1, int(round(n * fraction))))
    return np.sort(rng.choice(n, size=k, replace=False))


def _ec_q_estimate(q_hat: float, n_sampled: int) -> float:
    floor = 0.5 / max(n_sampled, 1)
    return float(min(max(q_hat, floor, 1e-4), 0.49))


def _pa_seeds(cfg: SessionConfig, n_blocks: int) -> list[int]:
    if cfg.entropy == "os":
        return [os_seed_source() for _ in range(n_blocks)]
    draw = seeded_seed_source(
        np.random.default_rng([cfg.session_seed & 0xFFFFFFFF, 0x9A]))
    return [draw() for _ in range(n_blocks)]


def _json(frame) -> dict:
    return json.loads(frame.payload.decode("utf-8"))


def run_endpoint(role: str, channel: FrameChannel, stream: TimestampStream,
                 cfg: SessionConfig) -> SessionResult:
    if role == ROLE_SENDER:
        return _run_sender(channel, stream, cfg)
    if role == ROLE_RECEIVER:
        return _run_receiver(channel, stream, cfg)
    raise ValueError(f"unknown role {role!r}")


def _bye(ch: FrameChannel):
    ch.send(FrameType.CONTROL, control_payload(msg="bye"))
    try:
        while True:
            frame = ch.recv()
            if frame.type is FrameType.CONTROL and _json(frame).get("msg") == "bye":
                break
    except TransportClosed:
        pass


def _pack_match(indices: np.ndarray, counts: SiftCounts) -> bytes:
    header = _MATCH_HEADER.pack(_MATCH_MAGIC, counts.matched, counts.unmatched,
                                counts.total)
    return header + np.asarray(indices, dtype="<u8").tobytes()


def _unpack_match(payload: bytes) -> tuple[np.ndarray, SiftCounts]:
    magic, matched, unmatched, total = _MATCH_HEADER.unpack_from(payload)
    if magic != _MATCH_MAGIC:
        raise TransportClosed("malformed match report")
    indices = np.frombuffer(payload, "<u8", offset=_MATCH_HEADER.size).astype(np.int64)
    if indices.size != matched:
        raise TransportClosed("match report length mismatch")
    return indices, SiftCounts(matched, unmatched, total)


def _pass1_blocks(n: int, q_est: float) -> list[tuple[int, int]]:
    k1 = max(1, min(int(math.ceil(0.73 / q_est)), n))
    return [(s, min(s + k1, n)) for s in range(0, n, k1)]


# ----------------------------------------------------------------------
# Sender
# ----------------------------------------------------------------------


def _run_sender(ch: FrameChannel, stream: TimestampStream,
                cfg: SessionConfig) -> SessionResult:
    ch.send(FrameType.CONTROL, control_payload(
        msg="hello", role=ROLE_SENDER, seed=cfg.session_seed, count=len(stream)))
    ack = _json(ch.expect(FrameType.CONTROL))
    if ack.get("msg") != "hello" or ack.get("role") != ROLE_RECEIVER:
        raise TransportClosed(f"bad handshake: {ack}")

    basis = basis_of(stream.detectors)
    chunk_ticks = max(1, int(round(cfg.chunk_seconds / TICK)))
    t0 = stream.start_tick
    pos = 0
    while pos < len(stream):
        edge = t0 + ((int(stream.ticks[pos]) - t0) // chunk_ticks + 1) * chunk_ticks
        end = int(np.searchsorted(stream.ticks, edge, "left"))
        block = encode_timing(stream.ticks[pos:end], basis[pos:end])
        ch.send(FrameType.TIMING, block.to_bytes())
        pos = end
    ch.send(FrameType.CONTROL, control_payload(msg="timing_end"))

    verdict = _json(ch.expect(FrameType.CONTROL))
    if verdict.get("msg") == "acq_failed":
        _bye(ch)
        return SessionResult(STATUS_ACQ_FAILED)
    if verdict.get("msg") != "acquired":
        raise TransportClosed(f"unexpected control message: {verdict}")

    match = ch.expect(FrameType.CONTROL)
    indices, counts = _unpack_match(match.payload)
    det = stream.detectors[indices]
    times = stream.times[indices]
    key = SiftedKey(bits=((det >> 1) ^ 1).astype(np.uint8),
                    basis=(det & 1).astype(np.uint8), counts=counts,
                    span=(float(times[0]), float(times[-1])) if indices.size else (0.0, 0.0),
                    times=times)

    if len(key) < _MIN_SIFTED:
        ch.send(FrameType.CONTROL, control_payload(msg="pause", reason="no_pairs"))
        _bye(ch)
        return SessionResult(STATUS_NO_PAIRS, n_sifted=len(key))

    sample = ch.expect(FrameType.QBER_SAMPLE)
    n_bits, = _SAMPLE_HEADER.unpack_from(sample.payload)
    their_bits = np.unpackbits(
        np.frombuffer(sample.payload, np.uint8, offset=_SAMPLE_HEADER.size))[:n_bits]
    positions = shared_sample_positions(cfg.session_seed, len(key),
                                        cfg.qber_sample_fraction)
    errors = int(np.count_nonzero(key.bits[positions] != their_bits))
    q_hat = errors / n_bits
    ch.send(FrameType.QBER_SAMPLE, control_payload(
        msg="qber", n=n_bits, errors=errors, q=q_hat))
    key = key.drop(positions)

    gate_q = cfg.qber_override if cfg.qber_override is not None else q_hat
    if gate_q > cfg.qber_limit:
        ch.send(FrameType.CONTROL, control_payload(msg="pause", reason="qber",
                                                   qber=gate_q))
        _bye(ch)
        return SessionResult(STATUS_QBER_HIGH, qber=q_hat, n_sifted=len(key))

    q_est = _ec_q_estimate(q_hat, n_bits)
    ch.send(FrameType.CONTROL, control_payload(msg="ec_start", q_est=q_est))

    reference = ReferenceParty(key.bits, cfg.session_seed)
    while True:
        frame = ch.recv()
        if frame.type in (FrameType.PARITY, FrameType.HASH):
            ch.send(frame.type, reference.handle(frame.payload))
            continue
        msg = _json(frame)
        if msg.get("msg") == "ec_done":
            leaked = int(msg["leaked"])
            corrections = int(msg["corrections"])
            break
        if msg.get("msg") == "ec_abort":
            _bye(ch)
            return SessionResult(STATUS_VERIFY_FAILED, qber=q_hat, n_sifted=len(key))
        raise TransportClosed(f"unexpected frame during EC: {msg}")

    q_t_used = max(q_hat, corrections / max(len(key), 1))
    reconciled = ReconciledKey(key.bits, leaked, _pass1_blocks(len(key), q_est), True)
    n_blocks = max(1, len(key) // cfg.block_min)
    seeds = _pa_seeds(cfg, n_blocks)
    ch.send(FrameType.SEED, control_payload(msg="pa", q_t=q_t_used, seeds=seeds))
    final = privacy_amplify(reconciled, q_t_used, block_min=cfg.block_min, seeds=seeds)
    _bye(ch)
    return SessionResult(STATUS_OK, final_key=final, qber=q_hat, q_est_used=q_est,
                         n_sifted=len(key) + n_bits, leaked_bits=leaked,
                         corrections=corrections, accounting=final.accounting)


# ----------------------------------------------------------------------
# Receiver
# ----------------------------------------------------------------------


class _ChunkPipeline:
    """Per-chunk coincidence finding and servo tracking on the receiver."""

    _MARGIN = 0.05  # seconds of own-stream slack around the predicted window

    def __init__(self, own: TimestampStream, cfg: SessionConfig):
        self.own = own
        self.cfg = cfg
        self.estimate: OffsetEstimate | None = None
        self.remote_index: list[np.ndarray] = []
        self.own_index: list[np.ndarray] = []
        self.remote_basis: list[np.ndarray] = []
        self.times: list[np.ndarray] = []
        self.n_accepted = 0
        self.n_unmatched = 0

    def process(self, base_index: int, ticks: np.ndarray, basis: np.ndarray):
        remote = TimestampStream(0, ticks, basis)  # pseudo-detector = basis
        t_lo = float(ticks[0]) * TICK
        t_hi = float(ticks[-1]) * TICK
        pred = float(self.estimate.predict(0.5 * (t_lo + t_hi)))
        lo = int(np.searchsorted(self.own.ticks,
                                 round((t_lo + pred - self._MARGIN) / TICK)))
        hi = int(np.searchsorted(self.own.ticks,
                                 round((t_hi + pred + self._MARGIN) / TICK)))
        if hi <= lo:
            return
        own_part = TimestampStream(self.own.party, self.own.ticks[lo:hi],
                                   self.own.detectors[lo:hi])
        pairs = find_coincidences(remote, own_part, self.estimate,
                                  tau_c=self.cfg.tau_c,
                                  track_window=self.cfg.sync.track_window)
        self.estimate = track(self.estimate,
                              pairs.tracking_samples(self.cfg.sync.track_window),
                              self.cfg.sync)
        acc = pairs.select(pairs.accepted)
        same = (acc.detector_a & 1) == (acc.detector_b & 1)
        self.n_accepted += len(acc)
        self.n_unmatched += int(len(acc) - np.count_nonzero(same))
        acc = acc.select(same)
        self.remote_index.append(acc.index_a + base_index)
        self.own_index.append(acc.index_b + lo)
        self.remote_basis.append((acc.detector_a & 1).astype(np.uint8))
        self.times.append(acc.time_a)


def _run_receiver(ch: FrameChannel, stream: TimestampStream,
                  cfg: SessionConfig) -> SessionResult:
    hello = _json(ch.expect(FrameType.CONTROL))
    if hello.get("msg") != "hello" or hello.get("role") != ROLE_SENDER:
        raise TransportClosed(f"bad handshake: {hello}")
    cfg = replace(cfg, session_seed=int(hello["seed"]))
    ch.send(FrameType.CONTROL, control_payload(msg="hello", role=ROLE_RECEIVER))

    pipeline = _ChunkPipeline(stream, cfg)
    buffered: list[tuple[int, np.ndarray, np.ndarray]] = []
    base = 0
    acquired = False
    tried_midstream = False
    window_ticks = int(round(cfg.sync.acquisition_window / TICK))

    def try_acquire() -> bool:
        ticks = np.concatenate([t for _, t, _ in buffered])
        basis = np.concatenate([b for _, _, b in buffered])
        remote = TimestampStream(0, ticks, basis)
        try:
            pipeline.estimate = acquire_offset(remote, stream, cfg.sync)
        except (AcquisitionError, ValueError):
            return False
        return True

    def flush_buffered():
        for b, t, s in buffered:
            pipeline.process(b, t, s)
        buffered.clear()

    while True:
        frame = ch.recv()
        if frame.type is FrameType.TIMING:
            block = EncodedTimingBlock.from_bytes(frame.payload)
            ticks, basis = decode_timing(block)
            if ticks.size == 0:
                continue
            if acquired:
                pipeline.process(base, ticks, basis)
            else:
                buffered.append((base, ticks, basis))
                span = int(ticks[-1]) - int(buffered[0][1][0])
                if span >= window_ticks and not tried_midstream:
                    tried_midstream = True
                    if try_acquire():
                        acquired = True
                        flush_buffered()
            base += ticks.size
            continue
        msg = _json(frame)
        if msg.get("msg") == "timing_end":
            break
        raise TransportClosed(f"unexpected frame during timing: {msg}")

    if not acquired and buffered and try_acquire():
        acquired = True
        flush_buffered()

    if not acquired:
        ch.send(FrameType.CONTROL, control_payload(msg="acq_failed"))
        _bye(ch)
        return SessionResult(STATUS_ACQ_FAILED)
    ch.send(FrameType.CONTROL, control_payload(
        msg="acquired", offset=pipeline.estimate.offset,
        confidence=pipeline.estimate.confidence))

    empty_i64 = np.empty(0, np.int64)
    remote_idx = (np.concatenate(pipeline.remote_index)
                  if pipeline.remote_index else empty_i64)
    own_idx = np.concatenate(pipeline.own_index) if pipeline.own_index else empty_i64
    basis_arr = (np.concatenate(pipeline.remote_basis)
                 if pipeline.remote_basis else np.empty(0, np.uint8))
    times = (np.concatenate(pipeline.times)
             if pipeline.times else np.empty(0, np.float64))
    matched = int(remote_idx.size)
    counts = SiftCounts(matched, pipeline.n_unmatched, pipeline.n_accepted)
    ch.send(FrameType.CONTROL, _pack_match(remote_idx, counts))

    det_own = stream.detectors[own_idx]
    key = SiftedKey(bits=(det_own >> 1).astype(np.uint8), basis=basis_arr,
                    counts=counts,
                    span=(float(times[0]), float(times[-1])) if matched else (0.0, 0.0),
                    times=times)

    if matched < _MIN_SIFTED:
        decision = _json(ch.expect(FrameType.CONTROL))
        _bye(ch)
        return SessionResult(STATUS_NO_PAIRS, n_sifted=matched,
                             offset=pipeline.estimate)

    positions = shared_sample_positions(cfg.session_seed, len(key),
                                        cfg.qber_sample_fraction)
    sample_bits = key.bits[positions]
    ch.send(FrameType.QBER_SAMPLE,
            _SAMPLE_HEADER.pack(sample_bits.size) + np.packbits(sample_bits).tobytes())
    verdict = _json(ch.expect(FrameType.QBER_SAMPLE))
    q_hat = float(verdict["q"])
    key = key.drop(positions)

    decision = _json(ch.expect(FrameType.CONTROL))
    if decision.get("msg") == "pause":
        _bye(ch)
        status = STATUS_NO_PAIRS if decision.get("reason") == "no_pairs" else STATUS_QBER_HIGH
        return SessionResult(status, qber=q_hat, n_sifted=len(key),
                             offset=pipeline.estimate)
    if decision.get("msg") != "ec_start":
        raise TransportClosed(f"unexpected control message: {decision}")
    q_est = float(decision["q_est"])

    def exchange(request: bytes) -> bytes:
        ftype = FrameType.HASH if request[:1] == b"H" else FrameType.PARITY
        ch.send(ftype, request)
        return ch.expect(ftype).payload

    corrector = CascadeCorrector(key.bits, q_est, exchange, cfg.session_seed,
                                 cfg.target_residual)
    try:
        result = corrector.run()
    except CascadeVerificationError:
        ch.send(FrameType.CONTROL, control_payload(msg="ec_abort"))
        _bye(ch)
        return SessionResult(STATUS_VERIFY_FAILED, qber=q_hat, n_sifted=len(key),
                             offset=pipeline.estimate)
    ch.send(FrameType.CONTROL, control_payload(
        msg="ec_done", leaked=result.leaked_bits, corrections=result.corrections))

    pa = _json(ch.expect(FrameType.SEED))
    q_t_used = float(pa["q_t"])
    seeds = [int(s) for s in pa["seeds"]]
    reconciled = ReconciledKey(result.bits, result.leaked_bits, result.blocks,
                               result.verified, result.corrections,
                               result.pass_sizes, result.residual_estimate)
    final = privacy_amplify(reconciled, q_t_used, block_min=cfg.block_min, seeds=seeds)
    _bye(ch)
    return SessionResult(STATUS_OK, final_key=final, qber=q_hat, q_est_used=q_est,
                         offset=pipeline.estimate,
                         n_sifted=len(key) + int(positions.size),
                         leaked_bits=result.leaked_bits,
                         corrections=result.corrections,
                         accounting=final.accounting)
