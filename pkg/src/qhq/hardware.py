"""Serializable QPU description: topology, basis gates, calibration, timing.

The hardware model is the one data structure every other layer consumes:
the frontend validates qubit counts against it, the transpiler reads the
coupling map and gate durations, the engines read the timing budget, and
the calibration monitor swaps in re-calibrated versions of it.

Models are immutable values. Recalibration never mutates a model, it
builds a new one with a bumped ``version`` (see `qhq.calib`), so models
can be shared freely across threads.

Model documents are canonical JSON: UTF-8, sorted keys, two-space indent,
trailing newline. ``load_model(save_model(m))`` is the identity and
``save_model`` output is byte-stable, so documents diff cleanly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from importlib import resources
from typing import IO, Iterable

from .errors import QhqError

# Frequency band for superconducting transmon qubits, used when a model
# sets enforce_bands.
FREQ_BAND_HZ = (4e9, 6e9)

# Nominal calibration values used by generators and daily recalibration.
# Typical transmon magnitudes, tunable, never ground truth.
NOMINAL = {
    "t1": 50e-6,
    "t2": 60e-6,
    "readout_fidelity": 0.98,
    "single_qubit_fidelity": 0.999,
    "two_qubit_fidelity": 0.99,
    "anharmonicity": 1.85e8,
    "single_qubit_gate_duration": 40e-9,
    "two_qubit_gate_duration": 300e-9,
    "readout_duration": 1e-6,
    "max_program_duration": 500e-6,
    "default_repetition_period": 1e-3,
    "mix_chamber_temperature": 0.010,
}

DEFAULT_BASIS_GATES = frozenset({"rz", "sx", "x", "cx"})

# Gate names the toolchain can represent at all; a model declaring a basis
# gate outside this set could never be scheduled.
KNOWN_GATE_KINDS = frozenset({"u", "rz", "sx", "x", "h", "cx", "cz", "swap"})

# Reference epoch for generated models: a Monday, so calendar simulations
# starting from a fresh lattice line up with the weekly cadence.
DEFAULT_EPOCH = datetime(2025, 1, 6, 0, 0, tzinfo=timezone.utc)


class ModelError(QhqError):
    """Base class for hardware-model errors."""


class ModelParseError(ModelError):
    """The model document is not well-formed."""


class ModelValidationError(ModelError):
    """The document parsed but violates a model invariant."""

    def __init__(self, report: "ValidationReport"):
        self.report = report
        lines = "; ".join(f"{i.path}: {i.message}" for i in report.errors())
        super().__init__(f"model validation failed: {lines}")


@dataclass(frozen=True)
class Issue:
    severity: str  # "error" or "warning"
    path: str
    message: str


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    issues: tuple[Issue, ...]

    def errors(self) -> list[Issue]:
        return [i for i in self.issues if i.severity == "error"]


@dataclass(frozen=True)
class QubitSpec:
    index: int
    frequency: float  # Hz
    anharmonicity: float  # Hz
    t1: float  # s
    t2: float  # s
    readout_fidelity: float


@dataclass(frozen=True)
class CouplingEdge:
    """Undirected coupling, stored with a < b."""

    a: int
    b: int
    two_qubit_fidelity: float
    gate_duration: float  # s

    def __post_init__(self):
        if self.a > self.b:
            lo, hi = self.b, self.a
            object.__setattr__(self, "a", lo)
            object.__setattr__(self, "b", hi)


@dataclass(frozen=True)
class CalibrationSet:
    """Snapshot of every calibrated metric at one instant.

    Per-qubit tuples are aligned with qubit index. ``t2_timestamp`` tracks
    the weekly T2 / benchmarking refresh separately from the daily run,
    and ``mix_chamber_temperature`` is the simulated environmental channel.
    """

    timestamp: datetime
    t2_timestamp: datetime
    t1: tuple[float, ...]
    t2: tuple[float, ...]
    readout_fidelity: tuple[float, ...]
    single_qubit_fidelity: tuple[float, ...]
    two_qubit_fidelity: tuple[tuple[int, int, float], ...]  # (a, b, value), a < b
    mix_chamber_temperature: float  # K

    def n_qubits(self) -> int:
        return len(self.t1)


@dataclass(frozen=True)
class HardwareModel:
    name: str
    qubits: tuple[QubitSpec, ...]
    edges: tuple[CouplingEdge, ...]
    basis_gates: frozenset[str]
    single_qubit_gate_duration: float
    readout_duration: float
    max_program_duration: float
    default_repetition_period: float
    calibration: CalibrationSet
    version: int
    enforce_bands: bool = False
    _adjacency: dict[int, tuple[int, ...]] = field(
        default_factory=dict, repr=False, compare=False
    )

    def __post_init__(self):
        adj: dict[int, list[int]] = {q.index: [] for q in self.qubits}
        for e in self.edges:
            # Out-of-range endpoints are reported by validate_model, not here.
            if e.a in adj and e.b in adj:
                adj[e.a].append(e.b)
                adj[e.b].append(e.a)
        object.__setattr__(
            self, "_adjacency", {k: tuple(sorted(v)) for k, v in adj.items()}
        )

    @property
    def n_qubits(self) -> int:
        return len(self.qubits)

    def edge_map(self) -> dict[tuple[int, int], CouplingEdge]:
        return {(e.a, e.b): e for e in self.edges}

    def has_edge(self, a: int, b: int) -> bool:
        if a > b:
            a, b = b, a
        return (a, b) in self.edge_map()


def neighbors(model: HardwareModel, q: int) -> list[int]:
    """Qubits coupled to ``q``, sorted ascending."""
    if q not in model._adjacency:
        raise ModelError(f"qubit index {q} out of range for {model.n_qubits}-qubit model")
    return list(model._adjacency[q])


# ---------------------------------------------------------------------------
# Validation


def _check(issues, cond, path, message, severity="error"):
    if not cond:
        issues.append(Issue(severity, path, message))


def validate_model(model: HardwareModel) -> ValidationReport:
    issues: list[Issue] = []
    n = model.n_qubits
    _check(issues, n >= 1, "qubits", "model must declare at least one qubit")
    seen = set()
    for k, q in enumerate(model.qubits):
        path = f"qubits[{k}]"
        _check(issues, q.index == k, f"{path}.index", f"expected index {k}, got {q.index}")
        _check(issues, q.index not in seen, f"{path}.index", "duplicate qubit index")
        seen.add(q.index)
        _check(issues, q.t1 > 0, f"{path}.t1", "t1 must be positive")
        _check(issues, q.t2 > 0, f"{path}.t2", "t2 must be positive")
        _check(issues, q.t2 <= 2 * q.t1, f"{path}.t2", f"t2={q.t2} exceeds 2*t1={2 * q.t1}")
        _check(
            issues,
            0.0 <= q.readout_fidelity <= 1.0,
            f"{path}.readout_fidelity",
            "readout fidelity must lie in [0, 1]",
        )
        if model.enforce_bands:
            lo, hi = FREQ_BAND_HZ
            _check(
                issues,
                lo <= q.frequency <= hi,
                f"{path}.frequency",
                f"frequency {q.frequency} outside band [{lo}, {hi}]",
            )
    seen_edges = set()
    for k, e in enumerate(model.edges):
        path = f"edges[{k}]"
        _check(issues, e.a != e.b, path, "self-coupling not allowed")
        _check(issues, 0 <= e.a < n and 0 <= e.b < n, path, "edge endpoint out of range")
        _check(issues, (e.a, e.b) not in seen_edges, path, "duplicate edge")
        seen_edges.add((e.a, e.b))
        _check(
            issues,
            0.0 <= e.two_qubit_fidelity <= 1.0,
            f"{path}.two_qubit_fidelity",
            "fidelity must lie in [0, 1]",
        )
        _check(issues, e.gate_duration > 0, f"{path}.gate_duration", "duration must be positive")
    if n > 1 and not issues:
        reached = _bfs_reachable(model, 0)
        _check(
            issues,
            len(reached) == n,
            "edges",
            f"coupling graph is disconnected ({len(reached)}/{n} reachable from 0)",
        )
    _check(issues, model.max_program_duration > 0, "timing.max_program_duration", "must be positive")
    _check(issues, model.single_qubit_gate_duration > 0, "timing.single_qubit_gate_duration", "must be positive")
    _check(issues, model.readout_duration > 0, "timing.readout_duration", "must be positive")
    _check(issues, model.default_repetition_period > 0, "timing.default_repetition_period", "must be positive")
    _check(issues, isinstance(model.version, int) and model.version >= 0, "version", "must be a non-negative integer")
    _check(issues, len(model.basis_gates) > 0, "basis_gates", "basis gate set is empty")
    for g in sorted(model.basis_gates):
        _check(issues, g in KNOWN_GATE_KINDS, "basis_gates", f"unknown basis gate {g!r}")
    cal = model.calibration
    for name in ("t1", "t2", "readout_fidelity", "single_qubit_fidelity"):
        vals = getattr(cal, name)
        _check(issues, len(vals) == n, f"calibration.{name}", f"expected {n} entries, got {len(vals)}")
    for k, (a, b, v) in enumerate(cal.two_qubit_fidelity):
        _check(
            issues,
            (a, b) in seen_edges,
            f"calibration.two_qubit_fidelity[{k}]",
            f"({a}, {b}) is not a model edge",
        )
        _check(
            issues,
            0.0 <= v <= 1.0,
            f"calibration.two_qubit_fidelity[{k}]",
            "fidelity must lie in [0, 1]",
        )
    if len(cal.t1) == n:
        for i, q in enumerate(model.qubits):
            _check(
                issues,
                cal.t1[i] == q.t1 and cal.t2[i] == q.t2 and cal.readout_fidelity[i] == q.readout_fidelity,
                f"calibration[{i}]",
                "calibration snapshot disagrees with qubit values",
            )
    ok = not any(i.severity == "error" for i in issues)
    return ValidationReport(ok=ok, issues=tuple(issues))


def _bfs_reachable(model: HardwareModel, start: int) -> set[int]:
    seen = {start}
    frontier = [start]
    while frontier:
        nxt = []
        for q in frontier:
            for nb in model._adjacency[q]:
                if nb not in seen:
                    seen.add(nb)
                    nxt.append(nb)
        frontier = nxt
    return seen


# ---------------------------------------------------------------------------
# Serialization


def _cal_to_doc(cal: CalibrationSet) -> dict:
    return {
        "timestamp": cal.timestamp.isoformat(),
        "t2_timestamp": cal.t2_timestamp.isoformat(),
        "single_qubit_fidelity": list(cal.single_qubit_fidelity),
        "mix_chamber_temperature": cal.mix_chamber_temperature,
    }


def model_to_doc(model: HardwareModel) -> dict:
    """Plain-dict form of the model, ready for canonical JSON dumping.

    Per-qubit calibration lives on the qubit entries and per-edge fidelity
    on the edge entries; the ``calibration`` block carries only the fields
    with no other home (timestamps, 1q fidelities, environment channel).
    """
    return {
        "name": model.name,
        "version": model.version,
        "basis_gates": sorted(model.basis_gates),
        "enforce_bands": model.enforce_bands,
        "qubits": [
            {
                "index": q.index,
                "frequency": q.frequency,
                "anharmonicity": q.anharmonicity,
                "t1": q.t1,
                "t2": q.t2,
                "readout_fidelity": q.readout_fidelity,
            }
            for q in model.qubits
        ],
        "edges": [
            {
                "a": e.a,
                "b": e.b,
                "two_qubit_fidelity": e.two_qubit_fidelity,
                "gate_duration": e.gate_duration,
            }
            for e in model.edges
        ],
        "timing": {
            "single_qubit_gate_duration": model.single_qubit_gate_duration,
            "readout_duration": model.readout_duration,
            "max_program_duration": model.max_program_duration,
            "default_repetition_period": model.default_repetition_period,
        },
        "calibration": _cal_to_doc(model.calibration),
    }


def save_model(model: HardwareModel) -> bytes:
    """Canonical document bytes: sorted keys, 2-space indent, trailing newline."""
    text = json.dumps(model_to_doc(model), sort_keys=True, indent=2, ensure_ascii=False)
    return (text + "\n").encode("utf-8")


def _parse_ts(doc: dict, key: str, path: str) -> datetime:
    try:
        return datetime.fromisoformat(doc[key])
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelParseError(f"{path}.{key}: bad or missing timestamp") from exc


def model_from_doc(doc: dict) -> HardwareModel:
    """Build and validate a model from a parsed document dict."""
    try:
        qubits = tuple(
            QubitSpec(
                index=int(q["index"]),
                frequency=float(q["frequency"]),
                anharmonicity=float(q["anharmonicity"]),
                t1=float(q["t1"]),
                t2=float(q["t2"]),
                readout_fidelity=float(q["readout_fidelity"]),
            )
            for q in doc["qubits"]
        )
        edges = tuple(
            CouplingEdge(
                a=int(e["a"]),
                b=int(e["b"]),
                two_qubit_fidelity=float(e["two_qubit_fidelity"]),
                gate_duration=float(e["gate_duration"]),
            )
            for e in doc["edges"]
        )
        timing = doc["timing"]
        caldoc = doc.get("calibration", {})
        cal = CalibrationSet(
            timestamp=_parse_ts(caldoc, "timestamp", "calibration"),
            t2_timestamp=_parse_ts(caldoc, "t2_timestamp", "calibration"),
            t1=tuple(q.t1 for q in qubits),
            t2=tuple(q.t2 for q in qubits),
            readout_fidelity=tuple(q.readout_fidelity for q in qubits),
            single_qubit_fidelity=tuple(float(v) for v in caldoc["single_qubit_fidelity"]),
            two_qubit_fidelity=tuple((e.a, e.b, e.two_qubit_fidelity) for e in edges),
            mix_chamber_temperature=float(caldoc["mix_chamber_temperature"]),
        )
        model = HardwareModel(
            name=str(doc["name"]),
            qubits=qubits,
            edges=edges,
            basis_gates=frozenset(str(g) for g in doc["basis_gates"]),
            single_qubit_gate_duration=float(timing["single_qubit_gate_duration"]),
            readout_duration=float(timing["readout_duration"]),
            max_program_duration=float(timing["max_program_duration"]),
            default_repetition_period=float(timing["default_repetition_period"]),
            calibration=cal,
            version=int(doc["version"]),
            enforce_bands=bool(doc.get("enforce_bands", False)),
        )
    except ModelParseError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelParseError(f"malformed model document: {exc!r}") from exc
    report = validate_model(model)
    if not report.ok:
        raise ModelValidationError(report)
    return model


def load_model(source: bytes | str | IO) -> HardwareModel:
    """Parse, build, and validate a model from document bytes or a stream."""
    if hasattr(source, "read"):
        source = source.read()
    if isinstance(source, bytes):
        source = source.decode("utf-8")
    try:
        doc = json.loads(source)
    except json.JSONDecodeError as exc:
        raise ModelParseError(f"not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ModelParseError("top level of a model document must be an object")
    return model_from_doc(doc)


def load_model_file(path) -> HardwareModel:
    with open(path, "rb") as fh:
        return load_model(fh)


def bundled_model(name: str = "qmio32") -> HardwareModel:
    """Load one of the model documents shipped inside the package."""
    try:
        data = resources.files("qhq").joinpath(f"data/{name}.json").read_bytes()
    except (FileNotFoundError, ModuleNotFoundError) as exc:
        raise ModelError(f"no bundled model named {name!r}") from exc
    return load_model(data)


def with_calibration(
    model: HardwareModel, cal: CalibrationSet, *, bump_version: bool = False
) -> HardwareModel:
    """New model whose qubit/edge metrics reflect ``cal``.

    Drift monitoring uses bump_version=False (same calibration epoch,
    degraded values); recalibration uses bump_version=True.
    """
    if cal.n_qubits() != model.n_qubits:
        raise ModelError("calibration set size does not match model")
    qubits = tuple(
        replace(q, t1=cal.t1[i], t2=cal.t2[i], readout_fidelity=cal.readout_fidelity[i])
        for i, q in enumerate(model.qubits)
    )
    fid = {(a, b): v for a, b, v in cal.two_qubit_fidelity}
    edges = tuple(
        replace(e, two_qubit_fidelity=fid.get((e.a, e.b), e.two_qubit_fidelity))
        for e in model.edges
    )
    return replace(
        model,
        qubits=qubits,
        edges=edges,
        calibration=cal,
        version=model.version + 1 if bump_version else model.version,
    )


# ---------------------------------------------------------------------------
# Lattice generation


def hex_lattice_edges(n_qubits: int) -> list[tuple[int, int]]:
    """Brick-wall hexagonal embedding: row-major chains plus alternating
    vertical rungs, max degree 3, connected, deterministic per n."""
    if n_qubits < 2:
        raise ModelError("a lattice needs at least 2 qubits")
    width = max(2, math.isqrt(n_qubits - 1) + 1)
    edges: list[tuple[int, int]] = []
    for i in range(n_qubits):
        r, c = divmod(i, width)
        if c + 1 < width and i + 1 < n_qubits:
            edges.append((i, i + 1))
    n_rows = (n_qubits + width - 1) // width
    for r in range(n_rows - 1):
        placed = False
        for c in range(width):
            if c % 2 != r % 2:
                continue
            top, bottom = r * width + c, (r + 1) * width + c
            if bottom < n_qubits:
                edges.append((top, bottom))
                placed = True
        if not placed:
            # Short last row missed every rung column; tie it at column 0.
            edges.append((r * width, (r + 1) * width))
    return edges


def nominal_calibration(
    n_qubits: int,
    edges: Iterable[tuple[int, int]],
    timestamp: datetime = DEFAULT_EPOCH,
) -> CalibrationSet:
    return CalibrationSet(
        timestamp=timestamp,
        t2_timestamp=timestamp,
        t1=(NOMINAL["t1"],) * n_qubits,
        t2=(NOMINAL["t2"],) * n_qubits,
        readout_fidelity=(NOMINAL["readout_fidelity"],) * n_qubits,
        single_qubit_fidelity=(NOMINAL["single_qubit_fidelity"],) * n_qubits,
        two_qubit_fidelity=tuple(
            (a, b, NOMINAL["two_qubit_fidelity"]) for a, b in sorted(edges)
        ),
        mix_chamber_temperature=NOMINAL["mix_chamber_temperature"],
    )


def generate_hex_lattice(n_qubits: int, name: str | None = None) -> HardwareModel:
    """Connected hexagonal-lattice model with nominal calibration."""
    raw = hex_lattice_edges(n_qubits)
    lo, hi = FREQ_BAND_HZ
    span = hi - lo
    qubits = tuple(
        QubitSpec(
            index=i,
            # Deterministic spread across the middle of the band.
            frequency=lo + span * (0.15 + 0.7 * (i / max(1, n_qubits - 1))),
            anharmonicity=NOMINAL["anharmonicity"],
            t1=NOMINAL["t1"],
            t2=NOMINAL["t2"],
            readout_fidelity=NOMINAL["readout_fidelity"],
        )
        for i in range(n_qubits)
    )
    edges = tuple(
        CouplingEdge(a, b, NOMINAL["two_qubit_fidelity"], NOMINAL["two_qubit_gate_duration"])
        for a, b in sorted(raw)
    )
    model = HardwareModel(
        name=name or f"hex{n_qubits}",
        qubits=qubits,
        edges=edges,
        basis_gates=DEFAULT_BASIS_GATES,
        single_qubit_gate_duration=NOMINAL["single_qubit_gate_duration"],
        readout_duration=NOMINAL["readout_duration"],
        max_program_duration=NOMINAL["max_program_duration"],
        default_repetition_period=NOMINAL["default_repetition_period"],
        calibration=nominal_calibration(n_qubits, raw),
        version=1,
        enforce_bands=True,
    )
    report = validate_model(model)
    if not report.ok:  # pragma: no cover - generator bug guard
        raise ModelValidationError(report)
    return model


def line_model(n_qubits: int, name: str | None = None) -> HardwareModel:
    """Linear-chain model, handy for routing tests and tiny examples."""
    if n_qubits < 1:
        raise ModelError("need at least one qubit")
    base = generate_hex_lattice(max(2, n_qubits), name=name or f"line{n_qubits}")
    edges = tuple(
        CouplingEdge(i, i + 1, NOMINAL["two_qubit_fidelity"], NOMINAL["two_qubit_gate_duration"])
        for i in range(n_qubits - 1)
    )
    qubits = base.qubits[:n_qubits]
    model = replace(
        base,
        name=name or f"line{n_qubits}",
        qubits=qubits,
        edges=edges,
        calibration=nominal_calibration(n_qubits, [(e.a, e.b) for e in edges]),
    )
    report = validate_model(model)
    if not report.ok:  # pragma: no cover
        raise ModelValidationError(report)
    return model
