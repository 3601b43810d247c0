"""Lower programs onto a hardware model: decompose, route, schedule.

The pipeline is compile_program = decompose -> route -> decompose ->
schedule. The second decompose lowers the swap gates inserted by routing.
Output is a CompiledArtifact: a fully timed physical program plus the
layout permutation and enough provenance (model name/version, basis,
seed, checksum) to detect staleness and corruption later.

Compilation is ahead-of-time friendly: artifacts serialize to a canonical
JSON document whose sha256 is embedded, and symbolic rz angles survive
into the artifact so parameter binding never re-triggers compilation.
Binding cannot change timing because rz is virtual (zero duration).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import QhqError
from .hardware import KNOWN_GATE_KINDS, HardwareModel, neighbors
from .qasm import GateOp, ParamRef, Program, check_program

_PI = math.pi


class TranspileError(QhqError):
    """Pipeline failure; ``stage`` is one of decompose, route, schedule."""

    def __init__(self, stage: str, message: str):
        self.stage = stage
        super().__init__(f"[{stage}] {message}")


class ArtifactError(QhqError):
    """Artifact document is malformed, corrupt, or fails checksum."""


class BindError(QhqError):
    """Parameter values do not match the artifact's parameter set."""


# ---------------------------------------------------------------------------
# Capability closure


def lowerable_kinds(basis: frozenset[str]) -> frozenset[str]:
    """All gate kinds expressible in ``basis`` via the rewrite rules here."""
    low = set(basis) & KNOWN_GATE_KINDS
    while True:
        grown = set(low)
        if {"rz", "sx"} <= grown:
            grown |= {"h", "u"}
        if "sx" in grown:
            grown.add("x")
        if "cx" in grown:
            grown.add("swap")
            if "h" in grown:
                grown.add("cz")
        if grown == low:
            return frozenset(low)
        low = grown


# ---------------------------------------------------------------------------
# Decompose


def _require_concrete(op: GateOp) -> tuple[float, ...]:
    if any(isinstance(p, ParamRef) for p in op.params):
        raise TranspileError(
            "decompose",
            f"symbolic parameters are only supported as bare rz angles, "
            f"found one in {op.kind!r}",
        )
    return op.params  # type: ignore[return-value]


def _lower_op(op: GateOp, basis: frozenset[str], out: list[GateOp]) -> None:
    if op.kind in ("measure", "barrier") or op.kind in basis:
        out.append(op)
        return
    q = op.qubits
    if op.kind == "h":
        for sub in (
            GateOp("rz", q, params=(_PI / 2,)),
            GateOp("sx", q),
            GateOp("rz", q, params=(_PI / 2,)),
        ):
            _lower_op(sub, basis, out)
    elif op.kind == "u":
        theta, phi, lam = _require_concrete(op)
        for sub in (
            GateOp("rz", q, params=(lam,)),
            GateOp("sx", q),
            GateOp("rz", q, params=(theta + _PI,)),
            GateOp("sx", q),
            GateOp("rz", q, params=(phi + _PI,)),
        ):
            _lower_op(sub, basis, out)
    elif op.kind == "x":
        for sub in (GateOp("sx", q), GateOp("sx", q)):
            _lower_op(sub, basis, out)
    elif op.kind == "swap":
        a, b = q
        for sub in (
            GateOp("cx", (a, b)),
            GateOp("cx", (b, a)),
            GateOp("cx", (a, b)),
        ):
            _lower_op(sub, basis, out)
    elif op.kind == "cz":
        a, b = q
        for sub in (GateOp("h", (b,)), GateOp("cx", (a, b)), GateOp("h", (b,))):
            _lower_op(sub, basis, out)
    else:
        raise TranspileError(
            "decompose",
            f"no rule lowers {op.kind!r} to basis {sorted(basis)}",
        )


def decompose(program: Program, basis: frozenset[str]) -> Program:
    """Rewrite every gate into ``basis`` kinds (measure/barrier pass through).

    Symbolic rz ops require rz in the basis; any other symbolic gate is
    rejected because its rewrite would need arithmetic on the symbol.
    """
    if program.is_parametric() and "rz" not in basis:
        raise TranspileError(
            "decompose", "symbolic parameters require rz in the device basis"
        )
    out: list[GateOp] = []
    for op in program.ops:
        if op.kind == "rz" and any(isinstance(p, ParamRef) for p in op.params):
            out.append(op)  # symbolic rz passes through untouched
            continue
        _lower_op(op, basis, out)
    return replace(program, ops=tuple(out))


# ---------------------------------------------------------------------------
# Route


@dataclass(frozen=True)
class LayoutMap:
    """logical -> physical permutation over the whole model, at program
    start and end. Logical indices >= the source program's qubit count are
    filler tracking otherwise-idle physical qubits through routing swaps."""

    initial: tuple[int, ...]
    final: tuple[int, ...]


def _shortest_path(
    model: HardwareModel, src: int, dst: int, rng: np.random.Generator
) -> list[int]:
    """One BFS-shortest path src..dst; ties broken by the supplied rng."""
    dist = {dst: 0}
    frontier = [dst]
    while frontier and src not in dist:
        nxt: list[int] = []
        for u in frontier:
            for v in neighbors(model, u):
                if v not in dist:
                    dist[v] = dist[u] + 1
                    nxt.append(v)
        frontier = nxt
    if src not in dist:
        raise TranspileError("route", f"no path between qubits {src} and {dst}")
    path = [src]
    u = src
    while u != dst:
        cands = [v for v in neighbors(model, u) if dist.get(v, -1) == dist[u] - 1]
        u = cands[int(rng.integers(len(cands)))] if len(cands) > 1 else cands[0]
        path.append(u)
    return path


def route(
    program: Program, model: HardwareModel, seed: int = 0
) -> tuple[Program, LayoutMap]:
    """Map logical qubits onto the coupling graph, inserting swap chains so
    every two-qubit gate lands on a coupled pair.

    The initial layout is the identity. The same seed always yields the
    same swaps; the seed only breaks ties between equally short paths.
    """
    rng = np.random.default_rng(seed)
    n = model.n_qubits
    phys_of = list(range(n))
    log_of = list(range(n))
    out: list[GateOp] = []

    def do_swap(x: int, y: int) -> None:
        out.append(GateOp("swap", (x, y)))
        lx, ly = log_of[x], log_of[y]
        log_of[x], log_of[y] = ly, lx
        phys_of[lx], phys_of[ly] = y, x

    for op in program.ops:
        if op.kind == "measure":
            out.append(GateOp("measure", (phys_of[op.qubits[0]],), op.clbits))
        elif len(op.qubits) == 1:
            out.append(GateOp(op.kind, (phys_of[op.qubits[0]],), params=op.params))
        elif op.kind == "barrier":
            out.append(GateOp("barrier", tuple(phys_of[q] for q in op.qubits)))
        else:
            a, b = op.qubits
            pa, pb = phys_of[a], phys_of[b]
            if not model.has_edge(pa, pb):
                path = _shortest_path(model, pa, pb, rng)
                for i in range(len(path) - 2):
                    do_swap(path[i], path[i + 1])
                pa, pb = phys_of[a], phys_of[b]
            out.append(GateOp(op.kind, (pa, pb), params=op.params))

    routed = Program(
        n_qubits=n,
        n_clbits=program.n_clbits,
        ops=tuple(out),
        parameters=program.parameters,
    )
    return routed, LayoutMap(initial=tuple(range(n)), final=tuple(phys_of))


# ---------------------------------------------------------------------------
# Schedule


@dataclass(frozen=True)
class TimedOp:
    kind: str
    qubits: tuple[int, ...]
    clbits: tuple[int, ...]
    params: tuple[float | ParamRef, ...]
    start: float
    duration: float


@dataclass(frozen=True)
class TimedProgram:
    """Physical program with start times in seconds.

    ``qubits`` is every physical qubit the program occupies, including
    qubits the source program declared but never gated."""

    qubits: tuple[int, ...]
    n_clbits: int
    ops: tuple[TimedOp, ...]
    total_duration: float
    parameters: tuple[str, ...] = ()

    def is_parametric(self) -> bool:
        return any(
            isinstance(p, ParamRef) for op in self.ops for p in op.params
        )


def schedule(
    program: Program,
    model: HardwareModel,
    occupied: tuple[int, ...] | None = None,
) -> TimedProgram:
    """ASAP per-qubit schedule.

    rz is virtual (zero width); other one-qubit gates take the model's
    single-qubit duration, two-qubit gates take their edge's duration,
    measure takes the readout duration, and barrier is a zero-width sync
    point across its qubits. Exceeding the model's program duration
    budget is an error at this stage.
    """
    edge_map = model.edge_map()
    ready_q: dict[int, float] = {}
    ready_c: dict[int, float] = {}
    timed: list[TimedOp] = []
    for op in program.ops:
        start = max((ready_q.get(q, 0.0) for q in op.qubits), default=0.0)
        if op.kind == "measure":
            start = max(start, ready_c.get(op.clbits[0], 0.0))
            duration = model.readout_duration
            ready_c[op.clbits[0]] = start + duration
        elif op.kind == "barrier":
            duration = 0.0
        elif op.kind == "rz":
            duration = 0.0
        elif len(op.qubits) == 1:
            duration = model.single_qubit_gate_duration
        else:
            a, b = op.qubits
            key = (a, b) if a < b else (b, a)
            if key not in edge_map:
                raise TranspileError(
                    "schedule", f"two-qubit gate on uncoupled pair {a},{b}"
                )
            duration = edge_map[key].gate_duration
        for q in op.qubits:
            ready_q[q] = start + duration
        timed.append(
            TimedOp(op.kind, op.qubits, op.clbits, op.params, start, duration)
        )
    total = max(
        max(ready_q.values(), default=0.0), max(ready_c.values(), default=0.0)
    )
    if total > model.max_program_duration:
        raise TranspileError(
            "schedule",
            f"program duration {total:.6g}s exceeds budget "
            f"{model.max_program_duration:.6g}s",
        )
    qubits = set(ready_q)
    if occupied is not None:
        qubits |= set(occupied)
    return TimedProgram(
        qubits=tuple(sorted(qubits)),
        n_clbits=program.n_clbits,
        ops=tuple(timed),
        total_duration=total,
        parameters=program.parameters,
    )


# ---------------------------------------------------------------------------
# Artifacts


@dataclass(frozen=True)
class CompiledArtifact:
    model_name: str
    model_version: int
    basis_gates: frozenset[str]
    program: TimedProgram
    layout: LayoutMap
    seed: int
    checksum: str

    @property
    def parameters(self) -> tuple[str, ...]:
        return self.program.parameters


def _canonical_bytes(doc: dict) -> bytes:
    return json.dumps(
        doc, sort_keys=True, separators=(",", ":"), ensure_ascii=False,
        allow_nan=False,
    ).encode("utf-8")


def _doc_sans_checksum(a: CompiledArtifact) -> dict:
    def param_doc(p: float | ParamRef):
        if isinstance(p, ParamRef):
            return {"ref": p.name}
        return float(p)

    return {
        "kind": "compiled-program",
        "model_name": a.model_name,
        "model_version": a.model_version,
        "basis_gates": sorted(a.basis_gates),
        "seed": a.seed,
        "layout": {
            "initial": list(a.layout.initial),
            "final": list(a.layout.final),
        },
        "program": {
            "qubits": list(a.program.qubits),
            "n_clbits": a.program.n_clbits,
            "total_duration": a.program.total_duration,
            "parameters": list(a.program.parameters),
            "ops": [
                {
                    "kind": op.kind,
                    "qubits": list(op.qubits),
                    "clbits": list(op.clbits),
                    "params": [param_doc(p) for p in op.params],
                    "start": op.start,
                    "duration": op.duration,
                }
                for op in a.program.ops
            ],
        },
    }


def compute_checksum(doc_sans_checksum: dict) -> str:
    return hashlib.sha256(_canonical_bytes(doc_sans_checksum)).hexdigest()


def artifact_to_doc(a: CompiledArtifact) -> dict:
    doc = _doc_sans_checksum(a)
    doc["checksum"] = a.checksum
    return doc


def _finalize(a: CompiledArtifact) -> CompiledArtifact:
    return replace(a, checksum=compute_checksum(_doc_sans_checksum(a)))


def artifact_from_doc(doc) -> CompiledArtifact:
    """Rebuild an artifact, verifying structure and checksum."""
    try:
        if doc.get("kind") != "compiled-program":
            raise ArtifactError("not a compiled-program document")
        def param_from(p):
            if isinstance(p, dict):
                return ParamRef(str(p["ref"]))
            return float(p)

        ops = tuple(
            TimedOp(
                kind=str(o["kind"]),
                qubits=tuple(int(q) for q in o["qubits"]),
                clbits=tuple(int(c) for c in o["clbits"]),
                params=tuple(param_from(p) for p in o["params"]),
                start=float(o["start"]),
                duration=float(o["duration"]),
            )
            for o in doc["program"]["ops"]
        )
        prog = TimedProgram(
            qubits=tuple(int(q) for q in doc["program"]["qubits"]),
            n_clbits=int(doc["program"]["n_clbits"]),
            ops=ops,
            total_duration=float(doc["program"]["total_duration"]),
            parameters=tuple(str(s) for s in doc["program"]["parameters"]),
        )
        art = CompiledArtifact(
            model_name=str(doc["model_name"]),
            model_version=int(doc["model_version"]),
            basis_gates=frozenset(str(g) for g in doc["basis_gates"]),
            program=prog,
            layout=LayoutMap(
                initial=tuple(int(q) for q in doc["layout"]["initial"]),
                final=tuple(int(q) for q in doc["layout"]["final"]),
            ),
            seed=int(doc["seed"]),
            checksum=str(doc["checksum"]),
        )
    except ArtifactError:
        raise
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ArtifactError(f"malformed artifact document: {exc}") from exc
    expect = compute_checksum(_doc_sans_checksum(art))
    if art.checksum != expect:
        raise ArtifactError(
            f"artifact checksum mismatch: stored {art.checksum[:12]}..., "
            f"computed {expect[:12]}..."
        )
    return art


def save_artifact(a: CompiledArtifact) -> bytes:
    text = json.dumps(
        artifact_to_doc(a), sort_keys=True, indent=2, ensure_ascii=False,
        allow_nan=False,
    )
    return (text + "\n").encode("utf-8")


def load_artifact(data: bytes | str) -> CompiledArtifact:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ArtifactError(f"artifact is not UTF-8: {exc}") from exc
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"artifact is not valid JSON: {exc}") from exc
    return artifact_from_doc(doc)


def load_artifact_file(path) -> CompiledArtifact:
    with open(path, "rb") as f:
        return load_artifact(f.read())


# ---------------------------------------------------------------------------
# Binding and staleness


def bind_parameters(
    a: CompiledArtifact, values: dict[str, float]
) -> CompiledArtifact:
    """Substitute concrete angles for every symbolic rz in the artifact.

    ``values`` must cover exactly the artifact's parameter set. Binding
    never changes timing: symbolic angles only occur on zero-width rz.
    """
    want = set(a.program.parameters)
    got = set(values)
    if got != want:
        missing = sorted(want - got)
        extra = sorted(got - want)
        bits = []
        if missing:
            bits.append(f"missing {missing}")
        if extra:
            bits.append(f"unexpected {extra}")
        raise BindError("parameter set mismatch: " + ", ".join(bits))
    conc: dict[str, float] = {}
    for name, v in values.items():
        f = float(v)
        if not math.isfinite(f):
            raise BindError(f"parameter {name!r} is not finite: {v!r}")
        conc[name] = f
    ops = tuple(
        replace(
            op,
            params=tuple(
                conc[p.name] if isinstance(p, ParamRef) else p
                for p in op.params
            ),
        )
        for op in a.program.ops
    )
    bound = replace(a, program=replace(a.program, ops=ops, parameters=()))
    return _finalize(bound)


def artifact_model_mismatches(
    a: CompiledArtifact, model: HardwareModel
) -> list[str]:
    """Human-readable reasons this artifact does not match ``model`` as it
    currently stands. Empty list means fresh."""
    issues = []
    if a.model_name != model.name:
        issues.append(f"artifact built for model {a.model_name!r}, not {model.name!r}")
    if a.model_version != model.version:
        issues.append(
            f"artifact built against model version {a.model_version}, "
            f"current is {model.version}"
        )
    if not a.basis_gates <= model.basis_gates:
        issues.append(
            f"artifact basis {sorted(a.basis_gates)} not within model basis "
            f"{sorted(model.basis_gates)}"
        )
    return issues


# ---------------------------------------------------------------------------
# Driver


def compile_program(
    program: Program, model: HardwareModel, seed: int = 0
) -> CompiledArtifact:
    """Full pipeline: validate, decompose, route, lower swaps, schedule."""
    from .qasm import validate_program

    check_program(program)
    validate_program(program, model)
    lowered = decompose(program, model.basis_gates)
    routed, layout = route(lowered, model, seed)
    flat = decompose(routed, model.basis_gates)
    occupied = tuple(layout.initial[i] for i in range(program.n_qubits))
    timed = schedule(flat, model, occupied=occupied)
    art = CompiledArtifact(
        model_name=model.name,
        model_version=model.version,
        basis_gates=model.basis_gates,
        program=timed,
        layout=layout,
        seed=seed,
        checksum="",
    )
    return _finalize(art)
