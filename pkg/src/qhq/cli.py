"""Command-line entry points.

Five tools share this module: ``compile`` (ahead-of-time compilation),
``qcn-broker`` (the control-node service), ``gateway`` (the integration
front door), ``calib`` (calibration runs and history export), and
``qmio-run`` (submit / vqe / bench). All of them exit 0 on success, 1 on
an operational error (message on stderr), 2 on bad usage.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from datetime import datetime, timezone

from .errors import QhqError


def _parse_address(text: str, default_port: int = 5555) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return (text or "127.0.0.1", default_port)
    try:
        return (host or "127.0.0.1", int(port))
    except ValueError:
        raise QhqError(f"bad address {text!r}; expected host:port")


def _load_model(path: str | None):
    from .hardware import bundled_model, load_model_file

    if path is None:
        return bundled_model("qmio32")
    return load_model_file(path)


def _fail(exc: Exception) -> int:
    print(f"error: {exc}", file=sys.stderr)
    return 1


# ---------------------------------------------------------------------------
# compile


def main_compile(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(
        prog="compile",
        description="Compile an OpenQASM 2.0 file into an executable artifact.",
    )
    ap.add_argument("qasm", help="OpenQASM 2.0 source file")
    ap.add_argument("--model", help="hardware model JSON (default: bundled qmio32)")
    ap.add_argument("--seed", type=int, default=0, help="routing tie-break seed")
    ap.add_argument("-o", "--output", help="artifact path (default: <input>.artifact.json)")
    args = ap.parse_args(argv)
    try:
        from .qasm import parse_qasm2
        from .transpile import compile_program, save_artifact

        with open(args.qasm, encoding="utf-8") as f:
            program = parse_qasm2(f.read())
        model = _load_model(args.model)
        artifact = compile_program(program, model, seed=args.seed)
        out = args.output or os.path.splitext(args.qasm)[0] + ".artifact.json"
        with open(out, "wb") as f:
            f.write(save_artifact(artifact))
    except (OSError, QhqError) as exc:
        return _fail(exc)
    prog = artifact.program
    print(
        f"compiled {args.qasm} for {artifact.model_name} v{artifact.model_version}: "
        f"{len(prog.ops)} ops over qubits {list(prog.qubits)}, "
        f"duration {prog.total_duration:.3e}s"
        + (f", parameters {list(prog.parameters)}" if prog.parameters else "")
    )
    print(f"wrote {out} (sha256 {artifact.checksum[:16]}...)")
    return 0


# ---------------------------------------------------------------------------
# qcn-broker


def main_broker(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(
        prog="qcn-broker",
        description="Serve the control-node broker that owns the QPU.",
    )
    ap.add_argument("--listen", default="127.0.0.1:5555", help="host:port to bind")
    ap.add_argument("--model", help="hardware model JSON (default: bundled qmio32)")
    ap.add_argument(
        "--engine", choices=("echo", "statevector"), default="statevector"
    )
    ap.add_argument("--seed", type=int, default=0, help="engine + transpile seed")
    ap.add_argument("--max-queue-depth", type=int, default=64)
    ap.add_argument("--per-job-timeout", type=float, default=120.0)
    ap.add_argument("--reject-uncompiled", action="store_true",
                    help="accept only precompiled artifacts")
    ap.add_argument("--stale-policy", choices=("warn", "reject"), default="warn")
    ap.add_argument("--event-log", help="write the job event log (JSONL) here on exit")
    args = ap.parse_args(argv)
    try:
        from .broker import Broker, BrokerConfig, BrokerServer

        model = _load_model(args.model)
        broker = Broker(
            model,
            BrokerConfig(
                engine_kind=args.engine,
                seed=args.seed,
                max_queue_depth=args.max_queue_depth,
                per_job_timeout=args.per_job_timeout,
                reject_uncompiled=args.reject_uncompiled,
                stale_artifact_policy=args.stale_policy,
            ),
        )
        server = BrokerServer(_parse_address(args.listen), broker)
    except (OSError, QhqError) as exc:
        return _fail(exc)
    # flush so supervisors reading a pipe see the readiness line at once
    print(
        f"qcn-broker listening on {server.server_address[0]}:{server.port} "
        f"(model {model.name} v{model.version}, engine {args.engine}, "
        f"seed {args.seed})",
        flush=True,
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        broker.close()
        if args.event_log:
            with open(args.event_log, "w", encoding="utf-8") as f:
                n = broker.export_event_log(f)
            print(f"wrote {n} events to {args.event_log}")
    return 0


# ---------------------------------------------------------------------------
# gateway


def main_gateway(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(
        prog="gateway",
        description="Front a broker with a resource-manager (A) or "
        "message-bus (B) integration.",
    )
    ap.add_argument("--broker", default="127.0.0.1:5555", help="broker host:port")
    ap.add_argument("--mode", choices=("A", "B"), default="A")
    ap.add_argument("--latency-min", type=float, default=1.0,
                    help="mode A injected latency lower bound, seconds")
    ap.add_argument("--latency-max", type=float, default=3.0,
                    help="mode A injected latency upper bound, seconds")
    ap.add_argument("--listen", default="127.0.0.1:5556", help="host:port to bind")
    ap.add_argument("--seed", type=int, default=0, help="latency draw seed")
    ap.add_argument("--report", help="write the latency report CSV here on exit")
    args = ap.parse_args(argv)
    try:
        from .gateway import Gateway, GatewayConfig, GatewayServer, IntegrationMode

        bhost, bport = _parse_address(args.broker)
        gateway = Gateway(
            GatewayConfig(
                broker_host=bhost,
                broker_port=bport,
                mode=IntegrationMode(args.mode),
                latency_min=args.latency_min,
                latency_max=args.latency_max,
                seed=args.seed,
            )
        )
        server = GatewayServer(_parse_address(args.listen, 5556), gateway)
    except (OSError, QhqError) as exc:
        return _fail(exc)
    inj = (
        f"injected latency [{args.latency_min}, {args.latency_max}]s"
        if args.mode == "A"
        else "pass-through"
    )
    print(
        f"gateway mode {args.mode} listening on "
        f"{server.server_address[0]}:{server.port} -> broker {args.broker} ({inj})",
        flush=True,
    )
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
        if args.report:
            with open(args.report, "w", encoding="utf-8") as f:
                f.write(gateway.report_csv())
            print(f"wrote {len(gateway.latency_rows)} rows to {args.report}")
        gateway.close()
    return 0


# ---------------------------------------------------------------------------
# calib


def _parse_when(text: str | None) -> datetime:
    if text is None:
        return datetime.now(timezone.utc)
    dt = datetime.fromisoformat(text)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return dt


def main_calib(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(
        prog="calib", description="Run calibrations and export metric history."
    )
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run one calibration and refresh the model")
    run.add_argument("--scope", choices=("daily", "weekly"), required=True)
    run.add_argument("--model", required=True, help="hardware model JSON to refresh")
    run.add_argument("--now", help="ISO timestamp of the run (default: now)")
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("-o", "--output", help="refreshed model path (default: in place)")
    run.add_argument("--history", help="append measurement rows to this CSV")

    exp = sub.add_parser("export", help="export history rows in a time range")
    exp.add_argument("--history", required=True, help="history CSV to read")
    exp.add_argument("--from", dest="start", help="ISO start (inclusive)")
    exp.add_argument("--to", dest="end", help="ISO end (inclusive)")
    exp.add_argument("-o", "--output", help="output CSV (default: stdout)")

    args = ap.parse_args(argv)
    try:
        if args.cmd == "run":
            import numpy as np

            from .calib import export_csv, run_calibration
            from .hardware import load_model_file, save_model

            model = load_model_file(args.model)
            now = _parse_when(args.now)
            rng = np.random.default_rng(args.seed)
            refreshed, rows = run_calibration(model, args.scope, now, rng)
            out = args.output or args.model
            with open(out, "wb") as f:
                f.write(save_model(refreshed))
            if args.history:
                text = export_csv(rows)
                if os.path.exists(args.history):
                    text = "".join(text.splitlines(keepends=True)[1:])
                with open(args.history, "a", encoding="utf-8") as f:
                    f.write(text)
            print(
                f"{args.scope} calibration at {now.isoformat()}: "
                f"{len(rows)} measurements, model v{model.version} -> "
                f"v{refreshed.version}, wrote {out}"
            )
        else:
            from .calib import export_csv, filter_rows, parse_csv

            with open(args.history, encoding="utf-8") as f:
                rows = parse_csv(f.read())
            start = _parse_when(args.start) if args.start else None
            end = _parse_when(args.end) if args.end else None
            picked = filter_rows(rows, start, end)
            text = export_csv(picked)
            if args.output:
                with open(args.output, "w", encoding="utf-8") as f:
                    f.write(text)
                print(f"wrote {len(picked)} rows to {args.output}")
            else:
                sys.stdout.write(text)
    except (OSError, ValueError, QhqError) as exc:
        return _fail(exc)
    return 0


# ---------------------------------------------------------------------------
# qmio-run


def _add_connection_args(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--host", default="127.0.0.1:5556",
                    help="gateway (or broker) host:port")
    ap.add_argument("--model", help="hardware model JSON for local compilation "
                    "(default: bundled qmio32)")
    ap.add_argument("--remote-compile", action="store_true",
                    help="ship OpenQASM text instead of compiling locally")
    ap.add_argument("--transpile-seed", type=int, default=0)


def _make_client(args):
    from .client import RuntimeClient, RuntimeConfig

    host, port = _parse_address(args.host, 5556)
    model = None if args.remote_compile else _load_model(args.model)
    return RuntimeClient(
        RuntimeConfig(
            host=host,
            port=port,
            model=model,
            compile_locally=not args.remote_compile,
            transpile_seed=args.transpile_seed,
        )
    )


def _parse_param(text: str) -> tuple[str, float]:
    name, sep, value = text.partition("=")
    if not sep or not name:
        raise QhqError(f"bad --param {text!r}; expected name=value")
    try:
        return name, float(value)
    except ValueError:
        raise QhqError(f"bad --param value in {text!r}")


def main_run(argv: list[str] | None = None) -> int:
    ap = argparse.ArgumentParser(
        prog="qmio-run", description="Submit circuits, optimize, benchmark."
    )
    sub = ap.add_subparsers(dest="cmd", required=True)

    s = sub.add_parser("submit", help="run one OpenQASM 2.0 circuit")
    s.add_argument("qasm", help="circuit file")
    s.add_argument("--shots", type=int, default=1024)
    s.add_argument("--rep-period", type=float, default=None,
                   help="repetition period per shot, seconds")
    s.add_argument("--format", choices=("counts", "memory"), default="counts")
    s.add_argument("--param", action="append", default=[],
                   help="bind a symbolic parameter, name=value (repeatable)")
    s.add_argument("--session", choices=("batch", "interactive"),
                   help="open a session of this kind for the job")
    _add_connection_args(s)

    v = sub.add_parser("vqe", help="minimize a Z-string Hamiltonian")
    v.add_argument("--ansatz", required=True,
                   help="compiled artifact JSON or OpenQASM file with one @param")
    v.add_argument("--ham", required=True,
                   help="Hamiltonian file: lines of 'coefficient pauli'")
    v.add_argument("--shots", type=int, default=10000)
    v.add_argument("--max-iters", type=int, default=30)
    v.add_argument("--trace", help="write the optimization trace JSON here")
    _add_connection_args(v)

    b = sub.add_parser("bench", help="compare integration modes")
    b.add_argument("--n", type=int, default=20, help="jobs per mode")
    b.add_argument("--mode-compare", action="store_true",
                   help="run the A-vs-B latency comparison (the default benchmark)")
    b.add_argument("--broker", default="127.0.0.1:5555", help="broker host:port")
    b.add_argument("--shots", type=int, default=100)
    b.add_argument("--latency-min", type=float, default=1.0)
    b.add_argument("--latency-max", type=float, default=3.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--report", help="write per-job rows CSV here")
    b.add_argument("--json", dest="json_out", help="write the full report JSON here")

    args = ap.parse_args(argv)
    try:
        if args.cmd == "submit":
            return _cmd_submit(args)
        if args.cmd == "vqe":
            return _cmd_vqe(args)
        return _cmd_bench(args)
    except (OSError, QhqError) as exc:
        return _fail(exc)


def _cmd_submit(args) -> int:
    with open(args.qasm, encoding="utf-8") as f:
        qasm_text = f.read()
    params = dict(_parse_param(p) for p in args.param) or None
    with _make_client(args) as client:
        session_id = args.session and client.open_session(args.session)
        outcome = client.run_circuit(
            qasm_text,
            shots=args.shots,
            parameter_values=params,
            repetition_period=args.rep_period,
            output_format=args.format,
            session_id=session_id,
        )
        if session_id:
            client.close_session(session_id)
    r = outcome.result
    doc = {
        "job_id": outcome.job_id_hex,
        "counts": r.counts,
        "shots": r.shots,
        "effective_period": r.effective_period,
        "estimated_wall_time": r.estimated_wall_time,
        "engine": r.engine,
        "model_version": r.model_version,
        "timings": outcome.timings,
    }
    if r.memory is not None:
        doc["memory"] = list(r.memory)
    if outcome.warnings:
        doc["warnings"] = list(outcome.warnings)
    json.dump(doc, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


def _cmd_vqe(args) -> int:
    from .client import parse_hamiltonian, run_vqe_toy
    from .transpile import ArtifactError, load_artifact_file

    try:
        ansatz = load_artifact_file(args.ansatz)
    except ArtifactError:
        with open(args.ansatz, encoding="utf-8") as f:
            ansatz = f.read()
    with open(args.ham, encoding="utf-8") as f:
        ham = parse_hamiltonian(f.read())
    with _make_client(args) as client:
        trace = run_vqe_toy(
            client, ansatz, ham, shots=args.shots, max_iters=args.max_iters
        )
    print(
        f"converged in {trace.evaluations} evaluations: "
        f"E = {trace.best_value:.6f} at parameter = {trace.best_parameter:.6f} "
        f"({trace.best_parameter / math.pi:.4f} pi)"
    )
    if args.trace:
        with open(args.trace, "w", encoding="utf-8") as f:
            json.dump(trace.to_doc(), f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"wrote trace to {args.trace}")
    return 0


def _cmd_bench(args) -> int:
    from .client import benchmark_modes

    host, port = _parse_address(args.broker)
    doc, csv_text = benchmark_modes(
        host,
        port,
        n=args.n,
        shots=args.shots,
        latency_min=args.latency_min,
        latency_max=args.latency_max,
        seed=args.seed,
    )
    for mode, s in doc["by_mode"].items():
        print(
            f"mode {mode}: {s['count']} jobs, median total "
            f"{s['median_total'] * 1000:.1f}ms, mean {s['mean_total'] * 1000:.1f}ms, "
            f"median injected {s['median_injected'] * 1000:.1f}ms"
        )
    if "a_over_b_median_ratio" in doc:
        print(f"A / B median ratio: {doc['a_over_b_median_ratio']:.1f}x")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as f:
            f.write(csv_text)
        print(f"wrote {args.report}")
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as f:
            json.dump(doc, f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"wrote {args.json_out}")
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main_run())
