"""Binary wire protocol between clients, gateway, and control-node broker.

Frame layout, fixed 25-byte header then payload:

    offset  size  field
    0       4     magic, always b"QHQ1"
    4       1     message type (MsgType)
    5       16    job id, raw bytes (uuid4 for new jobs)
    21      4     payload length, unsigned big-endian
    25      n     payload, UTF-8 canonical JSON object (may be empty)

Canonical JSON means sorted keys, separators ("," ":"), ensure_ascii off.
An empty payload (length 0) decodes to payload None; PING and PONG are
always exactly the bare 25-byte header.

Decoding distinguishes two failure shapes on purpose: an incomplete
buffer is a normal streaming condition (try_decode returns None, the
caller waits for more bytes), while a malformed frame raises FrameError
and the connection should be dropped. A frame prefix is judged as early
as possible: bad magic or a bad type byte fails before the rest arrives.
"""

from __future__ import annotations

import enum
import json
import math
import struct
import uuid
from dataclasses import dataclass, field

from .errors import QhqError

MAGIC = b"QHQ1"
HEADER_LEN = 25
MAX_PAYLOAD = 64 * 1024 * 1024
DEFAULT_PORT = 5555


class MsgType(enum.IntEnum):
    SUBMIT = 1
    RESULT = 2
    ERROR = 3
    STATUS_REQ = 4
    STATUS_REP = 5
    CANCEL = 6
    PING = 7
    PONG = 8


class ProtocolError(QhqError):
    pass


class FrameError(ProtocolError):
    """The byte stream is not a valid frame; the connection is poisoned."""


class JobSpecError(ProtocolError):
    """Submitted job description violates the schema."""


# Error payload ``code`` vocabulary.
class ErrorCode:
    BAD_FRAME = "bad-frame"
    BAD_JOBSPEC = "bad-jobspec"
    PARSE = "parse-error"
    VALIDATION = "validation-failed"
    COMPILE = "compile-failed"
    BIND = "bind-failed"
    ENGINE = "engine-failed"
    QUEUE_FULL = "queue-full"
    TIMEOUT = "timeout"
    CANCELLED = "cancelled"
    STALE_ARTIFACT = "stale-artifact"
    UNCOMPILED = "uncompiled-rejected"
    UNKNOWN_JOB = "unknown-job"
    INTERNAL = "internal"


NULL_JOB_ID = bytes(16)


def new_job_id() -> bytes:
    return uuid.uuid4().bytes


@dataclass(frozen=True)
class Envelope:
    msg_type: MsgType
    job_id: bytes = NULL_JOB_ID
    payload: dict | None = None

    def __post_init__(self):
        if len(self.job_id) != 16:
            raise ProtocolError(f"job_id must be 16 bytes, got {len(self.job_id)}")

    @property
    def job_id_hex(self) -> str:
        return self.job_id.hex()


def canonical_json(doc: dict) -> bytes:
    return json.dumps(
        doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def encode_envelope(env: Envelope) -> bytes:
    if env.payload is None:
        body = b""
    elif isinstance(env.payload, dict):
        body = canonical_json(env.payload)
    else:
        raise ProtocolError(
            f"payload must be a dict or None, got {type(env.payload).__name__}"
        )
    if len(body) > MAX_PAYLOAD:
        raise FrameError(
            f"payload of {len(body)} bytes exceeds the {MAX_PAYLOAD} byte cap"
        )
    return (
        MAGIC
        + struct.pack(">B", int(env.msg_type))
        + env.job_id
        + struct.pack(">I", len(body))
        + body
    )


def try_decode(buf: bytes | bytearray | memoryview) -> tuple[Envelope, int] | None:
    """Decode one frame from the front of ``buf``.

    Returns (envelope, bytes consumed), or None if the buffer holds a
    valid but incomplete frame. Raises FrameError as soon as the bytes
    present cannot be the prefix of any valid frame.
    """
    view = bytes(buf[: HEADER_LEN + 8])  # header checks never need more
    n = len(buf)
    prefix = min(n, 4)
    if view[:prefix] != MAGIC[:prefix]:
        raise FrameError(f"bad magic {view[:prefix]!r}")
    if n < 5:
        return None
    type_byte = view[4]
    try:
        msg_type = MsgType(type_byte)
    except ValueError:
        raise FrameError(f"unknown message type {type_byte}")
    if n < HEADER_LEN:
        return None
    header = bytes(buf[:HEADER_LEN])
    job_id = header[5:21]
    (payload_len,) = struct.unpack(">I", header[21:25])
    if payload_len > MAX_PAYLOAD:
        raise FrameError(
            f"declared payload of {payload_len} bytes exceeds the "
            f"{MAX_PAYLOAD} byte cap"
        )
    total = HEADER_LEN + payload_len
    if n < total:
        return None
    if payload_len == 0:
        payload = None
    else:
        raw = bytes(buf[HEADER_LEN:total])
        try:
            doc = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FrameError(f"payload is not UTF-8 JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise FrameError(
                f"payload must be a JSON object, got {type(doc).__name__}"
            )
        payload = doc
    return Envelope(msg_type, job_id, payload), total


class StreamDecoder:
    """Incremental frame decoder; safe under arbitrary byte chunking."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Envelope]:
        self._buf.extend(data)
        out: list[Envelope] = []
        while True:
            got = try_decode(self._buf)
            if got is None:
                return out
            env, used = got
            del self._buf[:used]
            out.append(env)

    @property
    def pending_bytes(self) -> int:
        return len(self._buf)


# --- blocking stream helpers (file-like objects from socket.makefile) ------


def read_exactly(rfile, n: int) -> bytes | None:
    """Read n bytes; None on clean EOF before any byte, FrameError mid-way."""
    chunks = bytearray()
    while len(chunks) < n:
        got = rfile.read(n - len(chunks))
        if not got:
            if not chunks:
                return None
            raise FrameError(
                f"connection closed mid-frame ({len(chunks)}/{n} bytes)"
            )
        chunks.extend(got)
    return bytes(chunks)


def recv_envelope(rfile) -> Envelope | None:
    """Blocking read of one envelope; None on clean EOF between frames."""
    header = read_exactly(rfile, HEADER_LEN)
    if header is None:
        return None
    got = try_decode(header)
    if got is not None:
        return got[0]
    (payload_len,) = struct.unpack(">I", header[21:25])
    body = read_exactly(rfile, payload_len)
    if body is None:
        raise FrameError("connection closed before payload")
    env, _ = try_decode(header + body)
    return env


def send_envelope(wfile, env: Envelope) -> None:
    wfile.write(encode_envelope(env))
    wfile.flush()


def error_envelope(
    job_id: bytes, code: str, message: str, stage: str | None = None
) -> Envelope:
    payload = {"code": code, "message": message, "stage": stage}
    return Envelope(MsgType.ERROR, job_id, payload)


# ---------------------------------------------------------------------------
# Job documents


OUTPUT_FORMATS = ("counts", "memory")


@dataclass(frozen=True)
class JobSpec:
    """What a client asks the QPU to run.

    Exactly one of ir_text (OpenQASM 2.0 source, compiled on the control
    node) or aot_artifact (a compiled-program document produced ahead of
    time) is set. parameter_values bind any symbolic parameters.
    """

    shots: int
    ir_kind: str = "qasm2"
    ir_text: str | None = None
    aot_artifact: dict | None = None
    parameter_values: dict[str, float] | None = None
    repetition_period: float | None = None
    output_format: str = "counts"
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        validate_jobspec(self)


def validate_jobspec(spec: JobSpec) -> None:
    if spec.ir_kind != "qasm2":
        raise JobSpecError(f"only ir_kind 'qasm2' is supported, got {spec.ir_kind!r}")
    has_text = spec.ir_text is not None
    has_artifact = spec.aot_artifact is not None
    if has_text == has_artifact:
        raise JobSpecError(
            "exactly one of ir_text and aot_artifact must be provided"
        )
    if has_text and not isinstance(spec.ir_text, str):
        raise JobSpecError("ir_text must be a string")
    if has_artifact and not isinstance(spec.aot_artifact, dict):
        raise JobSpecError("aot_artifact must be a compiled-program document")
    if not isinstance(spec.shots, int) or isinstance(spec.shots, bool) or spec.shots < 1:
        raise JobSpecError(f"shots must be a positive integer, got {spec.shots!r}")
    if spec.repetition_period is not None:
        rp = spec.repetition_period
        if not isinstance(rp, (int, float)) or not math.isfinite(rp) or rp <= 0:
            raise JobSpecError(f"repetition_period must be positive, got {rp!r}")
    if spec.output_format not in OUTPUT_FORMATS:
        raise JobSpecError(
            f"output_format must be one of {OUTPUT_FORMATS}, "
            f"got {spec.output_format!r}"
        )
    if spec.parameter_values is not None:
        if not isinstance(spec.parameter_values, dict):
            raise JobSpecError("parameter_values must map names to numbers")
        for k, v in spec.parameter_values.items():
            if not isinstance(k, str):
                raise JobSpecError(f"parameter name must be a string, got {k!r}")
            if not isinstance(v, (int, float)) or not math.isfinite(v):
                raise JobSpecError(f"parameter {k!r} must be finite, got {v!r}")
    if not isinstance(spec.metadata, dict):
        raise JobSpecError("metadata must be an object")


def jobspec_to_doc(spec: JobSpec) -> dict:
    return {
        "ir_kind": spec.ir_kind,
        "ir_text": spec.ir_text,
        "aot_artifact": spec.aot_artifact,
        "parameter_values": spec.parameter_values,
        "shots": spec.shots,
        "repetition_period": spec.repetition_period,
        "output_format": spec.output_format,
        "metadata": spec.metadata,
    }


def jobspec_from_doc(doc: dict) -> JobSpec:
    if not isinstance(doc, dict):
        raise JobSpecError("job document must be a JSON object")
    known = {
        "ir_kind", "ir_text", "aot_artifact", "parameter_values",
        "shots", "repetition_period", "output_format", "metadata",
    }
    unknown = set(doc) - known
    if unknown:
        raise JobSpecError(f"unknown job fields: {sorted(unknown)}")
    if "shots" not in doc:
        raise JobSpecError("job is missing 'shots'")
    pv = doc.get("parameter_values")
    if pv is not None:
        if not isinstance(pv, dict):
            raise JobSpecError("parameter_values must map names to numbers")
        pv = {str(k): v for k, v in pv.items()}
    shots = doc["shots"]
    if isinstance(shots, bool) or not isinstance(shots, int):
        raise JobSpecError(f"shots must be a positive integer, got {shots!r}")
    return JobSpec(
        shots=shots,
        ir_kind=doc.get("ir_kind", "qasm2"),
        ir_text=doc.get("ir_text"),
        aot_artifact=doc.get("aot_artifact"),
        parameter_values=pv,
        repetition_period=doc.get("repetition_period"),
        output_format=doc.get("output_format", "counts"),
        metadata=doc.get("metadata") or {},
    )
