"""Control-node broker: the one process allowed to drive the QPU.

Jobs arrive as SUBMIT frames over TCP, go into a bounded FIFO queue, and
a single executor thread serves them strictly one at a time, which is the
whole point: the device is an exclusive resource and every consumer goes
through this choke point. The submitting connection blocks until its
RESULT or ERROR frame comes back.

A calibration window closes the executor without dropping the queue:
begin_calibration() parks the executor, jobs pile up behind the window,
and end_calibration() releases them in order.

Each job keeps a timestamped state history (queued, compiling, executing,
then done/failed/cancelled); the full broker event log exports as JSONL.
Replies carry the broker-side timings (queue wait, compile, execute) so
callers can separate their own transport cost from processing cost.
"""

from __future__ import annotations

import collections
import json
import socket
import socketserver
import threading
import time
from dataclasses import dataclass, field

from .engines import EngineConfig, EngineError, make_engine
from .errors import QhqError
from .hardware import HardwareModel
from .protocol import (
    Envelope,
    ErrorCode,
    FrameError,
    JobSpec,
    JobSpecError,
    MsgType,
    error_envelope,
    jobspec_from_doc,
    recv_envelope,
    send_envelope,
)
from .qasm import ProgramValidationError, QasmError, parse_qasm2, validate_program
from .transpile import (
    ArtifactError,
    BindError,
    TranspileError,
    artifact_from_doc,
    artifact_model_mismatches,
    bind_parameters,
    compile_program,
)


class BrokerError(QhqError):
    pass


STALE_POLICIES = ("warn", "reject")


@dataclass(frozen=True)
class BrokerConfig:
    engine_kind: str = "statevector"
    seed: int = 0
    max_queue_depth: int = 64
    per_job_timeout: float = 120.0
    reject_uncompiled: bool = False
    stale_artifact_policy: str = "warn"
    max_qubits: int = 20

    def __post_init__(self):
        if self.max_queue_depth < 1:
            raise BrokerError("max_queue_depth must be >= 1")
        if self.per_job_timeout <= 0:
            raise BrokerError("per_job_timeout must be positive")
        if self.stale_artifact_policy not in STALE_POLICIES:
            raise BrokerError(
                f"stale_artifact_policy must be one of {STALE_POLICIES}"
            )


@dataclass
class JobRecord:
    job_id: bytes
    spec: JobSpec
    state: str = "queued"
    submitted_mono: float = 0.0
    events: list[dict] = field(default_factory=list)
    reply: Envelope | None = None
    done: threading.Event = field(default_factory=threading.Event)


class Broker:
    """Queue, executor, and job bookkeeping; no I/O of its own."""

    def __init__(self, model: HardwareModel, config: BrokerConfig | None = None):
        self.model = model
        self.config = config or BrokerConfig()
        self.engine = make_engine(
            self.config.engine_kind,
            model,
            EngineConfig(
                max_qubits=min(self.config.max_qubits, model.n_qubits)
                if model.n_qubits >= 1
                else self.config.max_qubits,
                rng_seed=self.config.seed,
            ),
        )
        self._lock = threading.Lock()
        self._work = threading.Condition(self._lock)
        self._queue: collections.deque[JobRecord] = collections.deque()
        self._records: dict[bytes, JobRecord] = {}
        self._calibrating = False
        self._stopping = False
        self._current: JobRecord | None = None
        self._completed = 0
        self._failed = 0
        self._started_mono = time.monotonic()
        self.event_log: list[dict] = []
        self._executor = threading.Thread(
            target=self._run_executor, name="qpu-executor", daemon=True
        )
        self._executor.start()

    # --- state transitions ---------------------------------------------------

    def _advance(self, rec: JobRecord, state: str, note: str = "") -> None:
        # callers hold self._lock
        rec.state = state
        event = {
            "ts": time.time(),
            "job_id": rec.job_id.hex(),
            "state": state,
            "note": note,
        }
        rec.events.append(event)
        self.event_log.append(event)

    def export_event_log(self, fileobj) -> int:
        """Write the event log as JSON lines; returns the line count."""
        with self._lock:
            entries = list(self.event_log)
        for entry in entries:
            fileobj.write(json.dumps(entry, sort_keys=True) + "\n")
        return len(entries)

    # --- public API ------------------------------------------------------------

    def submit(self, job_id: bytes, spec: JobSpec) -> JobRecord:
        """Enqueue; raises BrokerError when the queue is full or id is taken."""
        rec = JobRecord(job_id=job_id, spec=spec, submitted_mono=time.monotonic())
        with self._work:
            if self._stopping:
                raise BrokerError("broker is shutting down")
            if job_id in self._records and not self._records[job_id].done.is_set():
                raise BrokerError(f"job id {job_id.hex()} is already active")
            if len(self._queue) >= self.config.max_queue_depth:
                raise BrokerError(
                    f"queue is full ({self.config.max_queue_depth} jobs)"
                )
            self._records[job_id] = rec
            self._queue.append(rec)
            self._advance(rec, "queued")
            self._work.notify_all()
        return rec

    def wait(self, rec: JobRecord, timeout: float | None = None) -> Envelope:
        """Block until the job replies; on timeout the job is abandoned."""
        limit = self.config.per_job_timeout if timeout is None else timeout
        if rec.done.wait(limit):
            assert rec.reply is not None
            return rec.reply
        with self._work:
            if not rec.done.is_set():
                self._advance(rec, "failed", "per-job timeout")
                self._failed += 1
                rec.reply = error_envelope(
                    rec.job_id,
                    ErrorCode.TIMEOUT,
                    f"job did not finish within {limit}s",
                )
                rec.done.set()
        return rec.reply  # type: ignore[return-value]

    def submit_and_wait(
        self, job_id: bytes, spec: JobSpec, timeout: float | None = None
    ) -> Envelope:
        try:
            rec = self.submit(job_id, spec)
        except BrokerError as exc:
            code = (
                ErrorCode.QUEUE_FULL
                if "queue is full" in str(exc)
                else ErrorCode.BAD_JOBSPEC
            )
            return error_envelope(job_id, code, str(exc))
        return self.wait(rec, timeout)

    def cancel(self, job_id: bytes) -> bool:
        """Cancel a still-queued job. Executing or finished jobs stay put."""
        with self._work:
            rec = self._records.get(job_id)
            if rec is None or rec.state != "queued":
                return False
            self._advance(rec, "cancelled", "cancelled by request")
            rec.reply = error_envelope(
                job_id, ErrorCode.CANCELLED, "job cancelled while queued"
            )
            rec.done.set()
            return True

    def begin_calibration(self) -> None:
        with self._work:
            self._calibrating = True
            self.event_log.append(
                {"ts": time.time(), "job_id": None, "state": "calibration-start",
                 "note": "executor parked"}
            )

    def end_calibration(self) -> None:
        with self._work:
            self._calibrating = False
            self.event_log.append(
                {"ts": time.time(), "job_id": None, "state": "calibration-end",
                 "note": "executor released"}
            )
            self._work.notify_all()

    @property
    def calibrating(self) -> bool:
        return self._calibrating

    def status_doc(self) -> dict:
        with self._lock:
            queue_depth = len(self._queue)
            doc = {
                "engine": self.engine.name,
                "model": self.model.name,
                "model_version": self.model.version,
                "queue_depth": queue_depth,
                "max_queue_depth": self.config.max_queue_depth,
                "calibrating": self._calibrating,
                "queue_state": (
                    "queued-behind-calibration"
                    if self._calibrating and queue_depth
                    else "calibrating"
                    if self._calibrating
                    else "open"
                ),
                "current_job": self._current.job_id.hex() if self._current else None,
                "jobs_completed": self._completed,
                "jobs_failed": self._failed,
                "uptime": time.monotonic() - self._started_mono,
            }
        return doc

    def set_model(self, model: HardwareModel) -> None:
        """Swap the hardware model (after a calibration refresh)."""
        with self._work:
            self.model = model
            self.engine = make_engine(
                self.config.engine_kind,
                model,
                EngineConfig(
                    max_qubits=min(self.config.max_qubits, model.n_qubits),
                    rng_seed=self.config.seed,
                ),
            )

    def close(self) -> None:
        with self._work:
            self._stopping = True
            self._work.notify_all()
        self._executor.join(timeout=5)

    # --- executor ---------------------------------------------------------------

    def _run_executor(self) -> None:
        while True:
            with self._work:
                while not self._stopping and (
                    self._calibrating or not self._queue
                ):
                    self._work.wait()
                if self._stopping:
                    return
                rec = self._queue.popleft()
                if rec.done.is_set():
                    continue  # cancelled or timed out while queued
                self._current = rec
                queue_wait = time.monotonic() - rec.submitted_mono
                self._advance(rec, "compiling", f"queue_wait={queue_wait:.6f}")
            reply = self._process(rec, queue_wait)
            with self._work:
                self._current = None
                if rec.done.is_set():
                    pass  # reply raced with a timeout; keep the first answer
                else:
                    if reply.msg_type == MsgType.RESULT:
                        self._advance(rec, "done")
                        self._completed += 1
                    else:
                        code = (reply.payload or {}).get("code", "?")
                        self._advance(rec, "failed", code)
                        self._failed += 1
                    rec.reply = reply
                    rec.done.set()

    def _process(self, rec: JobRecord, queue_wait: float) -> Envelope:
        spec = rec.spec
        warnings: list[str] = []
        t0 = time.monotonic()
        try:
            if spec.ir_text is not None:
                if self.config.reject_uncompiled:
                    return error_envelope(
                        rec.job_id,
                        ErrorCode.UNCOMPILED,
                        "this broker only accepts precompiled artifacts",
                    )
                program = parse_qasm2(spec.ir_text)
                validate_program(program, self.model)
                artifact = compile_program(program, self.model, seed=self.config.seed)
            else:
                artifact = artifact_from_doc(spec.aot_artifact)
                mismatches = artifact_model_mismatches(artifact, self.model)
                if mismatches:
                    if self.config.stale_artifact_policy == "reject":
                        return error_envelope(
                            rec.job_id,
                            ErrorCode.STALE_ARTIFACT,
                            "; ".join(mismatches),
                        )
                    warnings.extend(mismatches)
            if artifact.parameters:
                values = spec.parameter_values or {}
                artifact = bind_parameters(artifact, values)
            elif spec.parameter_values:
                return error_envelope(
                    rec.job_id,
                    ErrorCode.BIND,
                    "parameter values supplied for a non-parametric program",
                )
        except QasmError as exc:
            return error_envelope(rec.job_id, ErrorCode.PARSE, str(exc))
        except ProgramValidationError as exc:
            return error_envelope(
                rec.job_id, ErrorCode.VALIDATION, str(exc), stage=exc.reason
            )
        except TranspileError as exc:
            return error_envelope(
                rec.job_id, ErrorCode.COMPILE, str(exc), stage=exc.stage
            )
        except BindError as exc:
            return error_envelope(rec.job_id, ErrorCode.BIND, str(exc))
        except ArtifactError as exc:
            return error_envelope(rec.job_id, ErrorCode.BAD_JOBSPEC, str(exc))
        compile_time = time.monotonic() - t0

        with self._lock:
            self._advance(rec, "executing", f"compile={compile_time:.6f}")
        t1 = time.monotonic()
        try:
            result = self.engine.execute(
                artifact.program,
                shots=spec.shots,
                repetition_period=spec.repetition_period,
                output_format=spec.output_format,
            )
        except EngineError as exc:
            return error_envelope(rec.job_id, ErrorCode.ENGINE, str(exc))
        execute_time = time.monotonic() - t1

        payload = {
            "status": "done",
            "result": result.to_doc(),
            "timings": {
                "queue_wait": queue_wait,
                "compile": compile_time,
                "execute": execute_time,
                "total_processing": queue_wait + compile_time + execute_time,
            },
            "warnings": warnings,
        }
        return Envelope(MsgType.RESULT, rec.job_id, payload)


# ---------------------------------------------------------------------------
# TCP front end


class _BrokerHandler(socketserver.BaseRequestHandler):
    def handle(self):  # one connection, many frames
        broker: Broker = self.server.broker  # type: ignore[attr-defined]
        rfile = self.request.makefile("rb")
        wfile = self.request.makefile("wb")
        try:
            while True:
                try:
                    env = recv_envelope(rfile)
                except FrameError as exc:
                    send_envelope(
                        wfile,
                        error_envelope(bytes(16), ErrorCode.BAD_FRAME, str(exc)),
                    )
                    return
                if env is None:
                    return
                reply = self._dispatch(broker, env)
                send_envelope(wfile, reply)
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            for f in (rfile, wfile):
                try:
                    f.close()
                except OSError:
                    pass

    @staticmethod
    def _dispatch(broker: Broker, env: Envelope) -> Envelope:
        if env.msg_type == MsgType.PING:
            return Envelope(MsgType.PONG, env.job_id)
        if env.msg_type == MsgType.STATUS_REQ:
            return Envelope(MsgType.STATUS_REP, env.job_id, broker.status_doc())
        if env.msg_type == MsgType.CANCEL:
            ok = broker.cancel(env.job_id)
            return Envelope(
                MsgType.STATUS_REP, env.job_id, {"cancelled": ok}
            )
        if env.msg_type == MsgType.SUBMIT:
            if env.payload is None:
                return error_envelope(
                    env.job_id, ErrorCode.BAD_JOBSPEC, "submit payload is empty"
                )
            try:
                spec = jobspec_from_doc(env.payload)
            except JobSpecError as exc:
                return error_envelope(env.job_id, ErrorCode.BAD_JOBSPEC, str(exc))
            return broker.submit_and_wait(env.job_id, spec)
        return error_envelope(
            env.job_id,
            ErrorCode.BAD_FRAME,
            f"broker does not accept {env.msg_type.name} frames",
        )


class BrokerServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], broker: Broker):
        super().__init__(address, _BrokerHandler)
        self.broker = broker

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve_broker(
    address: tuple[str, int],
    model: HardwareModel,
    config: BrokerConfig | None = None,
) -> tuple[BrokerServer, threading.Thread]:
    """Start a broker server on a daemon thread; returns (server, thread)."""
    server = BrokerServer(address, Broker(model, config))
    thread = threading.Thread(
        target=server.serve_forever, name="broker-server", daemon=True
    )
    thread.start()
    return server, thread


class BrokerClient:
    """Small blocking client for one broker connection (used by the
    gateway's bus mode, the runtime client, and tests)."""

    def __init__(self, host: str, port: int, timeout: float = 130.0):
        self.sock = socket.create_connection((host, port), timeout=timeout)
        self.rfile = self.sock.makefile("rb")
        self.wfile = self.sock.makefile("wb")

    def request(self, env: Envelope) -> Envelope:
        send_envelope(self.wfile, env)
        reply = recv_envelope(self.rfile)
        if reply is None:
            raise FrameError("broker closed the connection")
        return reply

    def close(self) -> None:
        for f in (self.rfile, self.wfile):
            try:
                f.close()
            except OSError:
                pass
        try:
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
