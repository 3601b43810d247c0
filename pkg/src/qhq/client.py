"""User-side runtime: submit circuits, estimate observables, optimize.

The client talks the wire protocol to a gateway (or directly to a
broker; the frames are identical). By default it compiles ahead of time
against a local hardware model and ships the finished artifact, so the
control node only binds parameters and executes; set compile_locally
False to ship OpenQASM text instead and let the control node compile.

The variational toy finds the ground state of a Z-string Hamiltonian
with a one-parameter ansatz and golden-section search over [0, 2*pi].
One optimizer evaluation costs exactly one job submission: all Z-string
terms are read from the same counts, and identity terms are constants.
"""

from __future__ import annotations

import math
import socket
import time
from dataclasses import dataclass, field

from .engines import ExecutionResult
from .errors import QhqError
from .hardware import HardwareModel
from .protocol import (
    DEFAULT_PORT,
    Envelope,
    FrameError,
    JobSpec,
    MsgType,
    jobspec_to_doc,
    new_job_id,
    recv_envelope,
    send_envelope,
)
from .qasm import Program, parse_qasm2, validate_program
from .transpile import (
    CompiledArtifact,
    artifact_to_doc,
    compile_program,
)


class ClientError(QhqError):
    def __init__(self, message: str, code: str = "client", stage: str | None = None):
        self.code = code
        self.stage = stage
        super().__init__(message)


@dataclass(frozen=True)
class RuntimeConfig:
    host: str = "127.0.0.1"
    port: int = DEFAULT_PORT
    shots: int = 1024
    timeout: float = 130.0
    compile_locally: bool = True
    model: HardwareModel | None = None
    transpile_seed: int = 0


@dataclass(frozen=True)
class RunOutcome:
    result: ExecutionResult
    timings: dict
    warnings: tuple[str, ...]
    job_id_hex: str


class RuntimeClient:
    """One persistent connection to a gateway or broker."""

    def __init__(self, config: RuntimeConfig):
        self.config = config
        self._sock = None
        self._rfile = None
        self._wfile = None

    # --- connection ----------------------------------------------------------

    def connect(self) -> "RuntimeClient":
        if self._sock is None:
            try:
                self._sock = socket.create_connection(
                    (self.config.host, self.config.port), timeout=self.config.timeout
                )
            except OSError as exc:
                raise ClientError(
                    f"cannot connect to {self.config.host}:{self.config.port}: {exc}"
                ) from exc
            self._rfile = self._sock.makefile("rb")
            self._wfile = self._sock.makefile("wb")
        return self

    def close(self) -> None:
        for f in (self._rfile, self._wfile, self._sock):
            if f is not None:
                try:
                    f.close()
                except OSError:
                    pass
        self._sock = self._rfile = self._wfile = None

    def __enter__(self):
        return self.connect()

    def __exit__(self, *exc):
        self.close()

    def _request(self, env: Envelope) -> Envelope:
        self.connect()
        try:
            send_envelope(self._wfile, env)
            reply = recv_envelope(self._rfile)
        except (OSError, FrameError) as exc:
            self.close()
            raise ClientError(f"connection failed: {exc}", code="transport") from exc
        if reply is None:
            self.close()
            raise ClientError("server closed the connection", code="transport")
        return reply

    def ping(self) -> float:
        t0 = time.monotonic()
        reply = self._request(Envelope(MsgType.PING))
        if reply.msg_type != MsgType.PONG:
            raise ClientError(f"expected PONG, got {reply.msg_type.name}")
        return time.monotonic() - t0

    def status(self) -> dict:
        reply = self._request(Envelope(MsgType.STATUS_REQ))
        if reply.msg_type != MsgType.STATUS_REP:
            raise ClientError(f"expected STATUS_REP, got {reply.msg_type.name}")
        return reply.payload or {}

    def command(self, command: str, **kwargs) -> dict:
        reply = self._request(
            Envelope(MsgType.STATUS_REQ, payload={"command": command, **kwargs})
        )
        if reply.msg_type == MsgType.ERROR:
            p = reply.payload or {}
            raise ClientError(p.get("message", "?"), code=p.get("code", "?"))
        return reply.payload or {}

    def open_session(self, kind: str, duration: float | None = None) -> str:
        doc = self.command(
            "open_session",
            **({"kind": kind} | ({"duration": duration} if duration else {})),
        )
        return str(doc["session_id"])

    def close_session(self, session_id: str) -> bool:
        return bool(self.command("close_session", session_id=session_id)["closed"])

    # --- circuits ---------------------------------------------------------------

    def _prepare_spec(
        self,
        circuit: str | Program | CompiledArtifact,
        shots: int,
        parameter_values: dict[str, float] | None,
        repetition_period: float | None,
        output_format: str,
        session_id: str | None,
    ) -> JobSpec:
        metadata = {"session_id": session_id} if session_id else {}
        common = dict(
            shots=shots,
            parameter_values=parameter_values,
            repetition_period=repetition_period,
            output_format=output_format,
            metadata=metadata,
        )
        if isinstance(circuit, CompiledArtifact):
            return JobSpec(aot_artifact=artifact_to_doc(circuit), **common)
        program = parse_qasm2(circuit) if isinstance(circuit, str) else circuit
        if self.config.model is not None:
            validate_program(program, self.config.model)
        if self.config.compile_locally:
            if self.config.model is None:
                raise ClientError(
                    "compile_locally needs a hardware model in RuntimeConfig"
                )
            artifact = compile_program(
                program, self.config.model, seed=self.config.transpile_seed
            )
            return JobSpec(aot_artifact=artifact_to_doc(artifact), **common)
        from .qasm import emit_qasm2

        return JobSpec(ir_text=emit_qasm2(program), **common)

    def run_circuit(
        self,
        circuit: str | Program | CompiledArtifact,
        shots: int | None = None,
        parameter_values: dict[str, float] | None = None,
        repetition_period: float | None = None,
        output_format: str = "counts",
        session_id: str | None = None,
    ) -> RunOutcome:
        """Submit one circuit and block for its outcome."""
        spec = self._prepare_spec(
            circuit,
            shots if shots is not None else self.config.shots,
            parameter_values,
            repetition_period,
            output_format,
            session_id,
        )
        job_id = new_job_id()
        reply = self._request(
            Envelope(MsgType.SUBMIT, job_id, jobspec_to_doc(spec))
        )
        if reply.msg_type == MsgType.ERROR:
            p = reply.payload or {}
            raise ClientError(
                p.get("message", "job failed"),
                code=p.get("code", "?"),
                stage=p.get("stage"),
            )
        if reply.msg_type != MsgType.RESULT:
            raise ClientError(f"unexpected reply {reply.msg_type.name}")
        payload = reply.payload or {}
        return RunOutcome(
            result=ExecutionResult.from_doc(payload["result"]),
            timings=dict(payload.get("timings", {})),
            warnings=tuple(payload.get("warnings", ())),
            job_id_hex=job_id.hex(),
        )


# ---------------------------------------------------------------------------
# Observables


def parse_hamiltonian(text: str) -> list[tuple[float, str]]:
    """Lines of ``coefficient pauli_string``; '#' comments and blanks skipped.

    Pauli strings are over {I, Z} with the rightmost character acting on
    clbit 0 (matching bitstring order). The all-I string is the identity
    term and costs nothing to measure.
    """
    terms: list[tuple[float, str]] = []
    for ln, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) != 2:
            raise ClientError(
                f"hamiltonian line {ln}: expected 'coefficient pauli', got {raw!r}"
            )
        try:
            coeff = float(parts[0])
        except ValueError as exc:
            raise ClientError(f"hamiltonian line {ln}: bad coefficient {parts[0]!r}") from exc
        if not math.isfinite(coeff):
            raise ClientError(f"hamiltonian line {ln}: coefficient must be finite")
        pauli = parts[1].upper()
        bad = set(pauli) - {"I", "Z"}
        if bad:
            raise ClientError(
                f"hamiltonian line {ln}: only I and Z are supported, found "
                f"{sorted(bad)}"
            )
        terms.append((coeff, pauli))
    if not terms:
        raise ClientError("hamiltonian has no terms")
    return terms


def zmask_of(pauli: str) -> int:
    """Bit q set when the pauli string has Z at clbit q (rightmost = 0)."""
    mask = 0
    for i, ch in enumerate(reversed(pauli)):
        if ch == "Z":
            mask |= 1 << i
    return mask


def expectation_from_counts(counts: dict[str, int], zmask: int) -> float:
    """<Z-string> from measured counts: +1 for even parity, -1 for odd."""
    shots = sum(counts.values())
    if shots == 0:
        raise ClientError("no shots in counts")
    acc = 0
    for bits, c in counts.items():
        parity = bin(int(bits, 2) & zmask).count("1") & 1 if bits else 0
        acc += (1 - 2 * parity) * c
    return acc / shots


def energy_from_counts(
    counts: dict[str, int], terms: list[tuple[float, str]]
) -> float:
    total = 0.0
    for coeff, pauli in terms:
        mask = zmask_of(pauli)
        if mask == 0:
            total += coeff  # identity term, nothing to measure
        else:
            total += coeff * expectation_from_counts(counts, mask)
    return total


# ---------------------------------------------------------------------------
# Variational toy


@dataclass(frozen=True)
class TraceStep:
    iteration: int
    parameter: float
    value: float


@dataclass(frozen=True)
class OptimizationTrace:
    steps: tuple[TraceStep, ...]
    best_parameter: float
    best_value: float

    @property
    def evaluations(self) -> int:
        return len(self.steps)

    def to_doc(self) -> dict:
        return {
            "steps": [
                {"iteration": s.iteration, "parameter": s.parameter, "value": s.value}
                for s in self.steps
            ],
            "best_parameter": self.best_parameter,
            "best_value": self.best_value,
            "evaluations": self.evaluations,
        }


_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


def run_vqe_toy(
    client: RuntimeClient,
    ansatz: CompiledArtifact | str | Program,
    hamiltonian: list[tuple[float, str]],
    shots: int = 10000,
    max_iters: int = 30,
    lo: float = 0.0,
    hi: float = 2.0 * math.pi,
    tol: float = 1e-3,
    session_id: str | None = None,
) -> OptimizationTrace:
    """Golden-section minimization of a one-parameter ansatz energy.

    Every evaluation submits the bound ansatz once and reads all
    Hamiltonian terms out of the same counts; the trace therefore has
    exactly one step per submission.
    """
    if isinstance(ansatz, str):
        ansatz = parse_qasm2(ansatz)
    params = (
        ansatz.parameters
        if isinstance(ansatz, CompiledArtifact)
        else ansatz.parameters
    )
    if len(params) != 1:
        raise ClientError(
            f"the toy optimizer drives exactly one parameter, ansatz has "
            f"{len(params)}: {list(params)}"
        )
    (pname,) = params
    steps: list[TraceStep] = []

    def evaluate(theta: float) -> float:
        outcome = client.run_circuit(
            ansatz,
            shots=shots,
            parameter_values={pname: theta},
            session_id=session_id,
        )
        value = energy_from_counts(outcome.result.counts, hamiltonian)
        steps.append(TraceStep(len(steps), theta, value))
        return value

    a, b = lo, hi
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc = evaluate(c)
    fd = evaluate(d)
    while len(steps) < max_iters and (b - a) > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = evaluate(c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = evaluate(d)
    best = min(steps, key=lambda s: s.value)
    return OptimizationTrace(
        steps=tuple(steps), best_parameter=best.parameter, best_value=best.value
    )


# ---------------------------------------------------------------------------
# Mode benchmarking


def benchmark_modes(
    broker_host: str,
    broker_port: int,
    n: int = 20,
    shots: int = 100,
    latency_min: float = 1.0,
    latency_max: float = 3.0,
    seed: int = 0,
    model: HardwareModel | None = None,
):
    """Submit ``n`` jobs through a Mode A and a Mode B gateway against the
    same broker, sequentially, and return (report_doc, report_csv).

    The jobs are deliberately trivial so the comparison isolates the
    integration path: with an echo broker the device cost is microseconds
    while Mode A pays seconds of injected scheduling latency per job.
    """
    from .gateway import (
        GatewayConfig,
        IntegrationMode,
        latency_report_csv,
        latency_report_doc,
        serve_gateway,
    )

    qasm = (
        "OPENQASM 2.0;\n"
        'include "qelib1.inc";\n'
        "qreg q[1];\n"
        "creg c[1];\n"
        "x q[0];\n"
        "measure q[0] -> c[0];\n"
    )
    rows = []
    for mode in (IntegrationMode.A, IntegrationMode.B):
        server, _ = serve_gateway(
            ("127.0.0.1", 0),
            GatewayConfig(
                broker_host,
                broker_port,
                mode=mode,
                latency_min=latency_min,
                latency_max=latency_max,
                seed=seed,
            ),
        )
        try:
            cfg = RuntimeConfig(
                host="127.0.0.1",
                port=server.port,
                compile_locally=model is not None,
                model=model,
            )
            with RuntimeClient(cfg) as rc:
                for _ in range(n):
                    rc.run_circuit(qasm, shots=shots)
            rows.extend(server.gateway.latency_rows)
        finally:
            server.shutdown()
            server.gateway.close()
    return latency_report_doc(rows), latency_report_csv(rows)
