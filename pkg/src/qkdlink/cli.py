"""Command line front end: one executable, one subcommand per stage.

Exit codes: 0 success, 2 usage, 3 acquisition failure, 4 QBER above the
threshold (no key), 5 reconciliation verification failure.
"""

from __future__ import annotations

import argparse
import json
import struct
import sys
import time

import numpy as np

from . import endpoint as ep
from . import linkmodel, pipeline, sidechannel
from .events import TimestampStream, read_stream, write_stream
from .framing import Listener, TransportClosed, connect
from .params import load_model_params
from .postproc import ReconciledKey, cascade_reconcile, privacy_amplify, seeded_seed_source
from .simulator import load_sim_config, simulate_session, write_ground_truth
from .timesync import AcquisitionError, SyncConfig, acquire_offset

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_ACQ_FAILED = 3
EXIT_QBER = 4
EXIT_VERIFY = 5

_STATUS_CODES = {
    ep.STATUS_OK: EXIT_OK,
    ep.STATUS_ACQ_FAILED: EXIT_ACQ_FAILED,
    ep.STATUS_QBER_HIGH: EXIT_QBER,
    ep.STATUS_NO_PAIRS: EXIT_QBER,
    ep.STATUS_VERIFY_FAILED: EXIT_VERIFY,
    pipeline.STATUS_OK: EXIT_OK,
    pipeline.STATUS_QBER_HIGH: EXIT_QBER,
    pipeline.STATUS_NO_PAIRS: EXIT_QBER,
}

_KEYFILE_MAGIC = b"QKDKEY01"


def write_key_file(path, bits: np.ndarray, basis: np.ndarray | None = None):
    """Sifted/corrected key container: magic, count, packed bits [, basis]."""
    bits = np.asarray(bits, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(_KEYFILE_MAGIC)
        fh.write(struct.pack("<QB", bits.size, 1 if basis is not None else 0))
        fh.write(np.packbits(bits).tobytes())
        if basis is not None:
            fh.write(np.packbits(np.asarray(basis, dtype=np.uint8)).tobytes())


def read_key_file(path) -> tuple[np.ndarray, np.ndarray | None]:
    with open(path, "rb") as fh:
        if fh.read(8) != _KEYFILE_MAGIC:
            raise ValueError(f"{path}: not a key file")
        count, has_basis = struct.unpack("<QB", fh.read(9))
        n_bytes = -(-count // 8)
        bits = np.unpackbits(np.frombuffer(fh.read(n_bytes), np.uint8))[:count]
        basis = None
        if has_basis:
            basis = np.unpackbits(np.frombuffer(fh.read(n_bytes), np.uint8))[:count]
    return bits, basis


def write_raw_key(path, bits: np.ndarray):
    """Final key output: packed bits, no header (sidecar CSV has the sizes)."""
    with open(path, "wb") as fh:
        fh.write(np.packbits(np.asarray(bits, dtype=np.uint8)).tobytes())


def write_accounting_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("block,n_in,qber,leak_ec,n_out\n")
        for row in rows:
            fh.write(f"{row.block},{row.n_in},{row.qber:.6f},{row.leak_ec},{row.n_out}\n")


def _sync_config(args) -> SyncConfig:
    kwargs = {}
    for name in ("acquisition_window", "coarse_bin", "fine_bin", "track_window",
                 "servo_tau"):
        val = getattr(args, name, None)
        if val is not None:
            kwargs[name] = val
    return SyncConfig(**kwargs)


# ----------------------------------------------------------------------
# Subcommands
# ----------------------------------------------------------------------


def cmd_model(args) -> int:
    src, ch, det = load_model_params(args.params)
    if args.action == "rates":
        rb = linkmodel.rate_breakdown(src, ch, det)
        qb = linkmodel.qber_total(src, ch, det, args.q_i)
        print(json.dumps({"r_sig": rb.r_sig, "r_a": rb.r_a, "alpha": rb.alpha,
                          "r_sig_prime": rb.r_sig_prime,
                          "r_total_detected": rb.r_total_detected,
                          "q_i": qb.q_i, "q_t": qb.q_t, "delta_q": qb.delta_q,
                          "delta_q_approx": qb.delta_q_approx}, indent=2))
        return EXIT_OK
    if args.action == "threshold":
        r_star = linkmodel.background_threshold(src, ch, det, args.q_limit, args.q_i)
        print(json.dumps({"q_limit": args.q_limit, "r_bg_threshold": r_star}))
        return EXIT_OK
    if args.action == "sweep":
        if args.log:
            grid = np.geomspace(max(args.rbg_min, 1.0), args.rbg_max, args.points)
        else:
            grid = np.linspace(args.rbg_min, args.rbg_max, args.points)
        rows = linkmodel.sweep(src, ch, det, grid, args.q_i)
        csv = linkmodel.sweep_csv(rows)
        if args.out:
            with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(csv)
        else:
            sys.stdout.write(csv)
        return EXIT_OK
    raise AssertionError(args.action)


def cmd_simulate(args) -> int:
    cfg = load_sim_config(args.config, seed=args.seed, duration=args.duration)
    a, b, truth = simulate_session(cfg)
    write_stream(a, args.out_a)
    write_stream(b, args.out_b)
    if args.truth:
        write_ground_truth(truth, args.truth)
    print(json.dumps({"events_a": len(a), "events_b": len(b),
                      "true_pairs": len(truth), "duration": cfg.duration}))
    return EXIT_OK


def cmd_sync(args) -> int:
    a = read_stream(args.a)
    b = read_stream(args.b)
    try:
        est = acquire_offset(a, b, _sync_config(args))
    except (AcquisitionError, ValueError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return EXIT_ACQ_FAILED
    print(json.dumps({"offset_s": est.offset, "confidence": est.confidence}))
    return EXIT_OK


def cmd_sift(args) -> int:
    from .sifter import find_coincidences, sift
    from .timesync import OffsetEstimate

    a = read_stream(args.a)
    b = read_stream(args.b)
    cfg = pipeline.PipelineConfig(sync=_sync_config(args), tau_c=args.tau_c)
    if args.offset is not None:
        est = OffsetEstimate(offset=args.offset)
        pairs, est = pipeline.tracked_coincidences(a, b, est, cfg)
    else:
        try:
            est = acquire_offset(a, b, cfg.sync)
        except (AcquisitionError, ValueError) as exc:
            print(json.dumps({"error": str(exc)}), file=sys.stderr)
            return EXIT_ACQ_FAILED
        pairs, est = pipeline.tracked_coincidences(a, b, est, cfg)
    key_a, key_b = sift(pairs)
    write_key_file(args.out_a, key_a.bits, key_a.basis)
    write_key_file(args.out_b, key_b.bits, key_b.basis)
    print(json.dumps({"coincidences": len(pairs),
                      "accepted": int(np.count_nonzero(pairs.accepted)),
                      "sifted": len(key_a), "offset_s": est.offset,
                      "sift_ratio": key_a.counts.matched / key_a.counts.total
                      if key_a.counts.total else 0.0}))
    return EXIT_OK


def cmd_reconcile(args) -> int:
    bits_a, _ = read_key_file(args.key_a)
    bits_b, _ = read_key_file(args.key_b)
    try:
        rk_a, rk_b = cascade_reconcile(bits_a, bits_b, args.qber,
                                       block_min=args.block_min,
                                       target_residual=args.target_residual,
                                       session_seed=args.seed)
    except Exception as exc:  # verification failure aborts the keys
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return EXIT_VERIFY
    write_key_file(args.out_a, rk_a.bits)
    write_key_file(args.out_b, rk_b.bits)
    print(json.dumps({"n": len(rk_b), "leaked_bits": rk_b.leaked_bits,
                      "corrections": rk_b.corrections,
                      "pass_sizes": rk_b.pass_sizes,
                      "residual_estimate": rk_b.residual_estimate,
                      "identical": bool(np.array_equal(rk_a.bits, rk_b.bits))}))
    return EXIT_OK


def cmd_amplify(args) -> int:
    bits, _ = read_key_file(args.key)
    rk = ReconciledKey(bits, args.leak, [], True)
    if args.entropy == "os":
        seed_source = None
    else:
        seed_source = seeded_seed_source(np.random.default_rng(args.seed))
    final = privacy_amplify(rk, args.qber, seed_source=seed_source,
                            block_min=args.block_min)
    write_raw_key(args.out, final.bits)
    if args.stats:
        write_accounting_csv(args.stats, final.accounting)
    print(json.dumps({"n_in": final.n_in, "n_out": final.n_out,
                      "leak_ec": final.leak_ec, "i_e_bits": final.i_e_bits}))
    return EXIT_OK


def cmd_analyze(args) -> int:
    if args.matrix:
        with open(args.matrix, "r", encoding="utf-8") as fh:
            matrix = sidechannel.parse_matrix_csv(fh.read())
    else:
        matrix = sidechannel.load_reference_matrix()
    report = sidechannel.asymmetry_stats(matrix)
    print(json.dumps({
        "hv_bit_ratio": report.hv_bit_ratio,
        "diag_bit_ratio": report.diag_bit_ratio,
        "basis_ratio": report.basis_ratio,
        "hv_entropy_leak": report.hv_entropy_leak,
        "diag_entropy_leak": report.diag_entropy_leak,
        "matched_key_events": matrix.matched_key_events,
    }, indent=2))
    return EXIT_OK


def cmd_endpoint(args) -> int:
    if args.simulate:
        cfg = load_sim_config(args.simulate, seed=args.seed)
        a, b, _ = simulate_session(cfg)
        stream = a if args.role == "sender" else b
    else:
        stream = read_stream(args.stream)
    session = ep.SessionConfig(session_seed=args.seed or 0,
                               sync=_sync_config(args),
                               qber_limit=args.qber_limit,
                               entropy=args.entropy,
                               qber_override=args.force_qber)
    listener = None
    if args.listen:
        host, port = _host_port(args.listen)
        listener = Listener(host, port)
    attempts = 0
    result = None
    while attempts < args.max_attempts:
        attempts += 1
        try:
            if listener is not None:
                channel = listener.accept()
            else:
                host, port = _host_port(args.connect)
                channel = connect(host, port)
            result = ep.run_endpoint(args.role, channel, stream, session)
            channel.close()
            break
        except TransportClosed as exc:
            # A lost transport aborts the session; the loop re-acquires on
            # the next connection, which is what makes interruptions cheap.
            print(json.dumps({"attempt": attempts, "transport_error": str(exc)}),
                  file=sys.stderr)
            result = None
            time.sleep(0.2)
        except ConnectionRefusedError:
            time.sleep(0.3)
    if listener is not None:
        listener.close()
    if result is None:
        return EXIT_ACQ_FAILED
    if result.final_key is not None:
        write_raw_key(args.out, result.final_key.bits)
        if args.stats:
            write_accounting_csv(args.stats, result.accounting)
    print(json.dumps({"status": result.status, "qber": result.qber,
                      "n_sifted": result.n_sifted,
                      "leaked_bits": result.leaked_bits,
                      "key_bits": int(result.key_bits.size)}))
    return _STATUS_CODES[result.status]


def cmd_pipeline(args) -> int:
    cfg = load_sim_config(args.config, seed=args.seed, duration=args.duration)
    a, b, _ = simulate_session(cfg)
    pcfg = pipeline.PipelineConfig(session_seed=cfg.seed, sync=_sync_config(args),
                                   tau_c=cfg.detector.tau_c,
                                   qber_limit=args.qber_limit)
    try:
        result = pipeline.run_local_pipeline(a, b, pcfg)
    except (AcquisitionError, ValueError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return EXIT_ACQ_FAILED
    if result.final_key is not None:
        write_raw_key(args.out, result.final_key.bits)
        if args.stats:
            write_accounting_csv(args.stats, result.accounting)
    summary = {"status": result.status, "n_sifted": result.n_sifted,
               "leaked_bits": result.leaked_bits,
               "key_bits": int(result.key_bits.size)}
    if result.qber is not None:
        summary["qber"] = result.qber.q
    if result.final_key is not None:
        summary["blocks"] = [
            {"block": r.block, "n_in": r.n_in, "qber": r.qber,
             "leak_ec": r.leak_ec, "n_out": r.n_out}
            for r in result.accounting]
    print(json.dumps(summary, indent=2))
    return _STATUS_CODES[result.status]


def _host_port(value: str) -> tuple[str, int]:
    host, _, port = value.rpartition(":")
    return host or "127.0.0.1", int(port)


# ----------------------------------------------------------------------
# Parser
# ----------------------------------------------------------------------


def _add_sync_options(p):
    p.add_argument("--acquisition-window", dest="acquisition_window", type=float)
    p.add_argument("--coarse-bin", dest="coarse_bin", type=float)
    p.add_argument("--fine-bin", dest="fine_bin", type=float)
    p.add_argument("--track-window", dest="track_window", type=float)
    p.add_argument("--servo-tau", dest="servo_tau", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qkdlink",
        description="Entanglement QKD link twin: model, simulator, post-processing")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("model", help="closed-form link model")
    p.add_argument("action", choices=["rates", "threshold", "sweep"])
    p.add_argument("--params", required=True)
    p.add_argument("--q-i", type=float, default=None,
                   help="override the intrinsic QBER (default: from visibilities)")
    p.add_argument("--q-limit", type=float, default=0.11)
    p.add_argument("--rbg-min", type=float, default=0.0)
    p.add_argument("--rbg-max", type=float, default=1e6)
    p.add_argument("--points", type=int, default=50)
    p.add_argument("--log", action="store_true")
    p.add_argument("--out")
    p.set_defaults(func=cmd_model)

    p = sub.add_parser("simulate", help="generate a timestamp stream pair")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--out-a", required=True)
    p.add_argument("--out-b", required=True)
    p.add_argument("--truth")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("sync", help="recover the clock offset between two streams")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    _add_sync_options(p)
    p.set_defaults(func=cmd_sync)

    p = sub.add_parser("sift", help="coincidences and basis sifting")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--offset", type=float, default=None,
                   help="known offset in seconds (default: acquire)")
    p.add_argument("--tau-c", type=float, default=2e-9)
    p.add_argument("--out-a", required=True)
    p.add_argument("--out-b", required=True)
    _add_sync_options(p)
    p.set_defaults(func=cmd_sift)

    p = sub.add_parser("reconcile", help="CASCADE error correction (loopback)")
    p.add_argument("--key-a", required=True)
    p.add_argument("--key-b", required=True)
    p.add_argument("--qber", type=float, required=True)
    p.add_argument("--block-min", type=int, default=5000)
    p.add_argument("--target-residual", type=float, default=1e-9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-a", required=True)
    p.add_argument("--out-b", required=True)
    p.set_defaults(func=cmd_reconcile)

    p = sub.add_parser("amplify", help="privacy amplification")
    p.add_argument("--key", required=True)
    p.add_argument("--qber", type=float, required=True)
    p.add_argument("--leak", type=int, required=True)
    p.add_argument("--block-min", type=int, default=5000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--entropy", choices=["seeded", "os"], default="seeded")
    p.add_argument("--out", required=True)
    p.add_argument("--stats")
    p.set_defaults(func=cmd_amplify)

    p = sub.add_parser("analyze", help="side-channel asymmetry report")
    p.add_argument("--matrix", help="correlation matrix CSV (default: bundled)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("endpoint", help="networked key-agreement endpoint")
    p.add_argument("--role", choices=["sender", "receiver"], required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--listen")
    group.add_argument("--connect")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--stream")
    src.add_argument("--simulate")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="key.bin")
    p.add_argument("--stats")
    p.add_argument("--qber-limit", type=float, default=0.11)
    p.add_argument("--force-qber", type=float, default=None)
    p.add_argument("--entropy", choices=["seeded", "os"], default="seeded")
    p.add_argument("--max-attempts", type=int, default=3)
    _add_sync_options(p)
    p.set_defaults(func=cmd_endpoint)

    p = sub.add_parser("pipeline", help="simulate + distill in one shot")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--duration", type=float, default=None)
    p.add_argument("--qber-limit", type=float, default=0.11)
    p.add_argument("--out", default="key.bin")
    p.add_argument("--stats")
    _add_sync_options(p)
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
