"""Gateway between user-side clients and the control-node broker.

Two integration modes, selected at startup:

- Mode A treats the QPU like a batch compute resource behind a resource
  manager: every dispatch first pays a scheduling delay drawn uniformly
  from [latency_min, latency_max] seconds (defaults 1 and 3). That delay
  is the dominant cost of running one circuit at a time through a batch
  scheduler, reproduced here as an explicit, measurable injection.
- Mode B is a message-bus pass-through: frames go straight to the broker
  with no injected wait, so the floor is transport plus processing.

The gateway owns allocations: a batch session gets the device exclusively
for its lifetime (default 7200 s), interactive sessions (default 300 s)
are served FIFO but always behind any waiting batch work. A session
establishes its broker route once and reuses it for every job, and the
gateway counts how many routes it ever opened.

Every successfully forwarded job leaves a LatencyLog row that splits the
measured wall time into queue wait, injected delay, transport, compile,
and execute, with the invariant that the parts sum to the total (well
under 5 ms of bookkeeping slack).
"""

from __future__ import annotations

import collections
import enum
import socketserver
import statistics
import threading
import time
import uuid
from dataclasses import dataclass

import numpy as np

from .broker import BrokerClient
from .errors import QhqError
from .protocol import (
    Envelope,
    ErrorCode,
    FrameError,
    MsgType,
    error_envelope,
    recv_envelope,
    send_envelope,
)


class GatewayError(QhqError):
    pass


class IntegrationMode(enum.Enum):
    A = "A"  # resource-manager integration, injected scheduling latency
    B = "B"  # message-bus integration, pass-through


BATCH_DURATION = 7200.0
INTERACTIVE_DURATION = 300.0

SESSION_EXPIRED = "session-expired"
UNKNOWN_SESSION = "unknown-session"


@dataclass(frozen=True)
class GatewayConfig:
    broker_host: str
    broker_port: int
    mode: IntegrationMode = IntegrationMode.A
    latency_min: float = 1.0
    latency_max: float = 3.0
    seed: int = 0
    request_timeout: float = 130.0

    def __post_init__(self):
        if not 0 <= self.latency_min <= self.latency_max:
            raise GatewayError(
                f"need 0 <= latency_min <= latency_max, got "
                f"[{self.latency_min}, {self.latency_max}]"
            )


@dataclass(frozen=True)
class Allocation:
    session_id: str
    kind: str  # "batch" or "interactive"
    duration: float
    opened_mono: float

    def expired(self, now_mono: float) -> bool:
        return now_mono - self.opened_mono > self.duration


@dataclass
class _SessionState:
    allocation: Allocation
    route: BrokerClient | None = None
    jobs: int = 0


@dataclass(frozen=True)
class LatencyLog:
    mode: str
    job_id_hex: str
    queue_wait: float
    injected: float
    transport: float
    compile: float
    execute: float
    total: float


LATENCY_CSV_HEADER = "mode,job_id,queue_wait,injected,transport,compile,execute,total"


def latency_report_csv(rows: list[LatencyLog]) -> str:
    lines = [LATENCY_CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.mode},{r.job_id_hex},{r.queue_wait!r},{r.injected!r},"
            f"{r.transport!r},{r.compile!r},{r.execute!r},{r.total!r}"
        )
    return "\n".join(lines) + "\n"


def parse_latency_csv(text: str) -> list[LatencyLog]:
    lines = [ln for ln in text.splitlines() if ln]
    if not lines or lines[0] != LATENCY_CSV_HEADER:
        raise GatewayError("bad latency report header")
    out = []
    for ln in lines[1:]:
        parts = ln.split(",")
        if len(parts) != 8:
            raise GatewayError(f"bad latency row: {ln!r}")
        out.append(
            LatencyLog(
                mode=parts[0],
                job_id_hex=parts[1],
                queue_wait=float(parts[2]),
                injected=float(parts[3]),
                transport=float(parts[4]),
                compile=float(parts[5]),
                execute=float(parts[6]),
                total=float(parts[7]),
            )
        )
    return out


def latency_report_doc(rows: list[LatencyLog]) -> dict:
    by_mode: dict[str, list[LatencyLog]] = {}
    for r in rows:
        by_mode.setdefault(r.mode, []).append(r)
    summary = {}
    for mode, mrows in sorted(by_mode.items()):
        totals = [r.total for r in mrows]
        summary[mode] = {
            "count": len(mrows),
            "median_total": statistics.median(totals),
            "mean_total": statistics.fmean(totals),
            "min_total": min(totals),
            "max_total": max(totals),
            "median_injected": statistics.median([r.injected for r in mrows]),
        }
    doc = {"rows": [vars(r) | {} for r in rows], "by_mode": summary}
    if {"A", "B"} <= set(summary):
        b_med = summary["B"]["median_total"]
        doc["a_over_b_median_ratio"] = (
            summary["A"]["median_total"] / b_med if b_med > 0 else float("inf")
        )
    return doc


class Gateway:
    """Dispatch core: sessions, turn-taking, latency accounting."""

    def __init__(self, config: GatewayConfig):
        self.config = config
        self._rng = np.random.default_rng(config.seed)
        self._lock = threading.Lock()
        self._busy = False
        self._batch_q: collections.deque[threading.Event] = collections.deque()
        self._inter_q: collections.deque[threading.Event] = collections.deque()
        self._sessions: dict[str, _SessionState] = {}
        self._default_session: str | None = None
        self.connection_count = 0
        self.jobs_forwarded = 0
        self.jobs_failed = 0
        self.latency_rows: list[LatencyLog] = []
        self._started = time.monotonic()

    # --- turn taking (FIFO within class, batch ahead of interactive) -------

    def _acquire_turn(self, kind: str) -> None:
        with self._lock:
            if not self._busy and not self._batch_q and (
                kind == "batch" or not self._inter_q
            ):
                self._busy = True
                return
            ev = threading.Event()
            (self._batch_q if kind == "batch" else self._inter_q).append(ev)
        ev.wait()

    def _release_turn(self) -> None:
        with self._lock:
            if self._batch_q:
                self._batch_q.popleft().set()  # baton pass, stays busy
            elif self._inter_q:
                self._inter_q.popleft().set()
            else:
                self._busy = False

    # --- sessions ------------------------------------------------------------

    def open_session(self, kind: str, duration: float | None = None) -> Allocation:
        if kind not in ("batch", "interactive"):
            raise GatewayError(f"session kind must be batch or interactive, got {kind!r}")
        if duration is None:
            duration = BATCH_DURATION if kind == "batch" else INTERACTIVE_DURATION
        if duration <= 0:
            raise GatewayError("session duration must be positive")
        alloc = Allocation(
            session_id=uuid.uuid4().hex,
            kind=kind,
            duration=duration,
            opened_mono=time.monotonic(),
        )
        with self._lock:
            self._sessions[alloc.session_id] = _SessionState(allocation=alloc)
        return alloc

    def close_session(self, session_id: str) -> bool:
        with self._lock:
            state = self._sessions.pop(session_id, None)
        if state is None:
            return False
        if state.route is not None:
            state.route.close()
        return True

    def _session_for(self, env: Envelope) -> tuple[_SessionState | None, str | None]:
        """Resolve the job's session; (None, error-code) when unusable."""
        meta = (env.payload or {}).get("metadata") or {}
        sid = meta.get("session_id")
        with self._lock:
            if sid is None:
                if self._default_session is None or (
                    self._default_session not in self._sessions
                ):
                    alloc = Allocation(
                        session_id=uuid.uuid4().hex,
                        kind="interactive",
                        duration=INTERACTIVE_DURATION,
                        opened_mono=time.monotonic(),
                    )
                    self._sessions[alloc.session_id] = _SessionState(allocation=alloc)
                    self._default_session = alloc.session_id
                sid = self._default_session
            state = self._sessions.get(sid)
        if state is None:
            return None, UNKNOWN_SESSION
        if state.allocation.expired(time.monotonic()):
            # The default session quietly renews; explicit ones expire hard.
            if sid == self._default_session:
                with self._lock:
                    self._sessions.pop(sid, None)
                    self._default_session = None
                return self._session_for(env)
            return None, SESSION_EXPIRED
        return state, None

    def _route_of(self, state: _SessionState) -> BrokerClient:
        if state.route is None:
            state.route = BrokerClient(
                self.config.broker_host,
                self.config.broker_port,
                timeout=self.config.request_timeout,
            )
            with self._lock:
                self.connection_count += 1
        return state.route

    # --- dispatch --------------------------------------------------------------

    def dispatch(self, env: Envelope) -> Envelope:
        """Forward one SUBMIT through the mode pipeline, logging latency."""
        t_accept = time.monotonic()
        state, err = self._session_for(env)
        if state is None:
            self.jobs_failed += 1
            return error_envelope(
                env.job_id,
                err or UNKNOWN_SESSION,
                "job refers to a session the gateway does not hold",
            )
        kind = state.allocation.kind
        self._acquire_turn(kind)
        try:
            gate_wait = time.monotonic() - t_accept
            if self.config.mode is IntegrationMode.A:
                injected = float(
                    self._rng.uniform(self.config.latency_min, self.config.latency_max)
                )
                time.sleep(injected)
            else:
                injected = 0.0
            route = self._route_of(state)
            t_send = time.monotonic()
            try:
                reply = route.request(env)
            except (OSError, FrameError) as exc:
                state.route = None
                self.jobs_failed += 1
                return error_envelope(
                    env.job_id, ErrorCode.INTERNAL, f"broker route failed: {exc}"
                )
            rtt = time.monotonic() - t_send
        finally:
            self._release_turn()
        state.jobs += 1
        total = time.monotonic() - t_accept
        if reply.msg_type == MsgType.RESULT:
            timings = (reply.payload or {}).get("timings", {})
            broker_queue = float(timings.get("queue_wait", 0.0))
            compile_t = float(timings.get("compile", 0.0))
            execute_t = float(timings.get("execute", 0.0))
            processing = float(
                timings.get(
                    "total_processing", broker_queue + compile_t + execute_t
                )
            )
            row = LatencyLog(
                mode=self.config.mode.value,
                job_id_hex=env.job_id.hex(),
                queue_wait=gate_wait + broker_queue,
                injected=injected,
                transport=max(0.0, rtt - processing),
                compile=compile_t,
                execute=execute_t,
                total=total,
            )
            with self._lock:
                self.latency_rows.append(row)
                self.jobs_forwarded += 1
        else:
            with self._lock:
                self.jobs_failed += 1
        return reply

    def forward_simple(self, env: Envelope) -> Envelope:
        """Pass a non-job frame (status, cancel) to the broker unmodified."""
        state, err = self._session_for(Envelope(MsgType.SUBMIT, env.job_id, {}))
        if state is None:
            return error_envelope(env.job_id, err or UNKNOWN_SESSION, "no usable session")
        try:
            return self._route_of(state).request(env)
        except (OSError, FrameError) as exc:
            state.route = None
            return error_envelope(
                env.job_id, ErrorCode.INTERNAL, f"broker route failed: {exc}"
            )

    def status_doc(self) -> dict:
        with self._lock:
            return {
                "mode": self.config.mode.value,
                "broker": f"{self.config.broker_host}:{self.config.broker_port}",
                "sessions_open": len(self._sessions),
                "connection_count": self.connection_count,
                "jobs_forwarded": self.jobs_forwarded,
                "jobs_failed": self.jobs_failed,
                "latency_rows": len(self.latency_rows),
                "injected_latency_range": [
                    self.config.latency_min,
                    self.config.latency_max,
                ]
                if self.config.mode is IntegrationMode.A
                else [0.0, 0.0],
                "uptime": time.monotonic() - self._started,
            }

    def report_doc(self) -> dict:
        with self._lock:
            rows = list(self.latency_rows)
        return latency_report_doc(rows)

    def report_csv(self) -> str:
        with self._lock:
            rows = list(self.latency_rows)
        return latency_report_csv(rows)

    def close(self) -> None:
        with self._lock:
            states = list(self._sessions.values())
            self._sessions.clear()
        for s in states:
            if s.route is not None:
                s.route.close()


# ---------------------------------------------------------------------------
# TCP front door


class _GatewayHandler(socketserver.BaseRequestHandler):
    def handle(self):
        gw: Gateway = self.server.gateway  # type: ignore[attr-defined]
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
                send_envelope(wfile, self._dispatch(gw, env))
        except (BrokenPipeError, ConnectionResetError, OSError):
            pass
        finally:
            for f in (rfile, wfile):
                try:
                    f.close()
                except OSError:
                    pass

    @staticmethod
    def _dispatch(gw: Gateway, env: Envelope) -> Envelope:
        if env.msg_type == MsgType.PING:
            return Envelope(MsgType.PONG, env.job_id)
        if env.msg_type == MsgType.SUBMIT:
            return gw.dispatch(env)
        if env.msg_type == MsgType.CANCEL:
            return gw.forward_simple(env)
        if env.msg_type == MsgType.STATUS_REQ:
            cmd = (env.payload or {}).get("command", "status")
            if cmd == "status":
                return Envelope(MsgType.STATUS_REP, env.job_id, gw.status_doc())
            if cmd == "broker-status":
                return gw.forward_simple(Envelope(MsgType.STATUS_REQ, env.job_id))
            if cmd == "report":
                return Envelope(MsgType.STATUS_REP, env.job_id, gw.report_doc())
            if cmd == "open_session":
                payload = env.payload or {}
                try:
                    alloc = gw.open_session(
                        str(payload.get("kind", "interactive")),
                        payload.get("duration"),
                    )
                except GatewayError as exc:
                    return error_envelope(env.job_id, ErrorCode.BAD_JOBSPEC, str(exc))
                return Envelope(
                    MsgType.STATUS_REP,
                    env.job_id,
                    {
                        "session_id": alloc.session_id,
                        "kind": alloc.kind,
                        "duration": alloc.duration,
                    },
                )
            if cmd == "close_session":
                sid = str((env.payload or {}).get("session_id", ""))
                return Envelope(
                    MsgType.STATUS_REP,
                    env.job_id,
                    {"closed": gw.close_session(sid)},
                )
            return error_envelope(
                env.job_id, ErrorCode.BAD_JOBSPEC, f"unknown command {cmd!r}"
            )
        return error_envelope(
            env.job_id,
            ErrorCode.BAD_FRAME,
            f"gateway does not accept {env.msg_type.name} frames",
        )


class GatewayServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, address: tuple[str, int], gateway: Gateway):
        super().__init__(address, _GatewayHandler)
        self.gateway = gateway

    @property
    def port(self) -> int:
        return self.server_address[1]


def serve_gateway(
    address: tuple[str, int], config: GatewayConfig
) -> tuple[GatewayServer, threading.Thread]:
    server = GatewayServer(address, Gateway(config))
    thread = threading.Thread(
        target=server.serve_forever, name="gateway-server", daemon=True
    )
    thread.start()
    return server, thread
