"""Execution engines for scheduled programs.

Two engines share one interface. The echo engine never touches quantum
state: it validates the program, accounts for wall time shot-by-shot, and
returns all-zeros counts, which makes it the right backend for exercising
the control plane at scale. The statevector engine simulates the program
exactly, over only the qubits the program occupies, so a small job on a
big device stays small.

Measurement is deferred: measure ops record a clbit -> qubit binding and
sampling happens once at the end. A gate touching an already-measured
qubit is an error rather than a silent wrong answer.

Determinism contract: an execution draws all randomness from a generator
freshly seeded with the engine config's seed, so the same seed, program,
and shot count reproduce counts bit-for-bit.
"""

from __future__ import annotations

import cmath
import math
from dataclasses import dataclass

import numpy as np

from .errors import QhqError
from .hardware import HardwareModel
from .qasm import ParamRef
from .transpile import TimedProgram

# 2**34 amplitudes is already far past desk scale; the cap exists so a
# config typo fails loudly instead of attempting a 256 GiB allocation.
HARD_MAX_QUBITS = 34


class EngineError(QhqError):
    pass


@dataclass(frozen=True)
class EngineConfig:
    max_qubits: int = 20
    rng_seed: int = 0


@dataclass(frozen=True)
class ExecutionResult:
    counts: dict[str, int]
    shots: int
    requested_repetition_period: float | None
    effective_period: float
    estimated_wall_time: float
    engine: str
    seed: int
    model_version: int
    memory: tuple[str, ...] | None = None

    def to_doc(self) -> dict:
        doc = {
            "counts": dict(self.counts),
            "shots": self.shots,
            "requested_repetition_period": self.requested_repetition_period,
            "effective_period": self.effective_period,
            "estimated_wall_time": self.estimated_wall_time,
            "engine": self.engine,
            "seed": self.seed,
            "model_version": self.model_version,
            "memory": list(self.memory) if self.memory is not None else None,
        }
        return doc

    @classmethod
    def from_doc(cls, doc: dict) -> "ExecutionResult":
        try:
            req = doc["requested_repetition_period"]
            mem = doc["memory"]
            return cls(
                counts={str(k): int(v) for k, v in doc["counts"].items()},
                shots=int(doc["shots"]),
                requested_repetition_period=None if req is None else float(req),
                effective_period=float(doc["effective_period"]),
                estimated_wall_time=float(doc["estimated_wall_time"]),
                engine=str(doc["engine"]),
                seed=int(doc["seed"]),
                model_version=int(doc["model_version"]),
                memory=None if mem is None else tuple(str(s) for s in mem),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise EngineError(f"malformed result document: {exc}") from exc


def _gate_matrix(kind: str, params: tuple[float, ...]) -> np.ndarray:
    if kind == "x":
        return np.array([[0, 1], [1, 0]], dtype=complex)
    if kind == "sx":
        return 0.5 * np.array(
            [[1 + 1j, 1 - 1j], [1 - 1j, 1 + 1j]], dtype=complex
        )
    if kind == "h":
        r = 1.0 / math.sqrt(2.0)
        return np.array([[r, r], [r, -r]], dtype=complex)
    if kind == "rz":
        (t,) = params
        return np.array(
            [[cmath.exp(-0.5j * t), 0], [0, cmath.exp(0.5j * t)]], dtype=complex
        )
    if kind == "u":
        theta, phi, lam = params
        c, s = math.cos(theta / 2), math.sin(theta / 2)
        return np.array(
            [
                [c, -cmath.exp(1j * lam) * s],
                [cmath.exp(1j * phi) * s, cmath.exp(1j * (phi + lam)) * c],
            ],
            dtype=complex,
        )
    # Two-qubit kinds, local index = bit(qubits[0]) + 2*bit(qubits[1]).
    if kind == "cx":
        m = np.zeros((4, 4), dtype=complex)
        for c in range(2):
            for t in range(2):
                m[c + 2 * (t ^ c), c + 2 * t] = 1
        return m
    if kind == "cz":
        return np.diag([1.0, 1.0, 1.0, -1.0]).astype(complex)
    if kind == "swap":
        m = np.zeros((4, 4), dtype=complex)
        for a in range(2):
            for b in range(2):
                m[b + 2 * a, a + 2 * b] = 1
        return m
    raise EngineError(f"engine has no matrix for gate kind {kind!r}")


def _apply_1q(psi: np.ndarray, g: np.ndarray, i: int, k: int) -> np.ndarray:
    """Apply 2x2 g on local qubit i of a k-qubit state (bit i of the index)."""
    t = psi.reshape(2 ** (k - 1 - i), 2, 2**i)
    lo = g[0, 0] * t[:, 0, :] + g[0, 1] * t[:, 1, :]
    hi = g[1, 0] * t[:, 0, :] + g[1, 1] * t[:, 1, :]
    return np.stack([lo, hi], axis=1).reshape(-1)


def _apply_2q(psi: np.ndarray, g: np.ndarray, i: int, j: int, k: int) -> np.ndarray:
    """Apply 4x4 g on local qubits (i, j); g's local index is bit_i + 2*bit_j."""
    t = psi.reshape([2] * k)
    ai, aj = k - 1 - i, k - 1 - j  # axis of each qubit (C order, bit 0 last)
    t = np.moveaxis(t, (aj, ai), (0, 1))
    rest = t.shape[2:]
    t = g @ t.reshape(4, -1)  # flat index 2*bit_j + bit_i matches g's layout
    t = t.reshape(2, 2, *rest)
    t = np.moveaxis(t, (0, 1), (aj, ai))
    return t.reshape(-1)


def _check_runnable(program: TimedProgram, shots: int,
                    repetition_period: float | None, output_format: str) -> None:
    if program.is_parametric():
        names = sorted(
            {p.name for op in program.ops for p in op.params if isinstance(p, ParamRef)}
        )
        raise EngineError(f"program has unbound parameters: {names}")
    if not isinstance(shots, int) or isinstance(shots, bool) or shots < 1:
        raise EngineError(f"shots must be a positive integer, got {shots!r}")
    if repetition_period is not None and not (
        isinstance(repetition_period, (int, float))
        and math.isfinite(repetition_period)
        and repetition_period > 0
    ):
        raise EngineError(f"bad repetition period: {repetition_period!r}")
    if output_format not in ("counts", "memory"):
        raise EngineError(f"unknown output format {output_format!r}")


class Engine:
    """Shared façade: period resolution, validation, result assembly."""

    name = "abstract"

    def __init__(self, model: HardwareModel, config: EngineConfig | None = None):
        config = config or EngineConfig()
        if not 1 <= config.max_qubits <= HARD_MAX_QUBITS:
            raise EngineError(
                f"max_qubits must be in [1, {HARD_MAX_QUBITS}], "
                f"got {config.max_qubits}"
            )
        self.model = model
        self.config = config

    def execute(
        self,
        program: TimedProgram,
        shots: int,
        repetition_period: float | None = None,
        output_format: str = "counts",
    ) -> ExecutionResult:
        _check_runnable(program, shots, repetition_period, output_format)
        requested = (
            repetition_period
            if repetition_period is not None
            else self.model.default_repetition_period
        )
        effective = max(requested, program.total_duration)
        counts, memory = self._run(program, shots, output_format)
        return ExecutionResult(
            counts=counts,
            shots=shots,
            requested_repetition_period=repetition_period,
            effective_period=effective,
            estimated_wall_time=shots * effective,
            engine=self.name,
            seed=self.config.rng_seed,
            model_version=self.model.version,
            memory=memory,
        )

    def _run(self, program, shots, output_format):
        raise NotImplementedError


class EchoEngine(Engine):
    """Timing-faithful no-op backend: all-zeros counts, real accounting."""

    name = "echo"

    def _run(self, program: TimedProgram, shots: int, output_format: str):
        for op in program.ops:
            if op.kind not in _RUNNABLE_KINDS:
                raise EngineError(f"engine has no matrix for gate kind {op.kind!r}")
        key = "0" * program.n_clbits
        counts = {key: shots}
        memory = tuple([key] * shots) if output_format == "memory" else None
        return counts, memory


class StatevectorEngine(Engine):
    """Exact simulation over the occupied qubits only."""

    name = "statevector"

    def _run(self, program: TimedProgram, shots: int, output_format: str):
        occupied = program.qubits
        k = len(occupied)
        if k > self.config.max_qubits:
            raise EngineError(
                f"program occupies {k} qubits, engine cap is "
                f"{self.config.max_qubits}"
            )
        local = {q: i for i, q in enumerate(occupied)}
        psi = np.zeros(2**k, dtype=complex)
        psi[0] = 1.0
        measured: set[int] = set()  # local qubits already read out
        clbit_of: dict[int, int] = {}  # clbit -> local qubit, last write wins
        for op in program.ops:
            if op.kind == "measure":
                lq = local[op.qubits[0]]
                measured.add(lq)
                clbit_of[op.clbits[0]] = lq
                continue
            if op.kind == "barrier":
                continue
            locs = tuple(local[q] for q in op.qubits)
            for lq in locs:
                if lq in measured:
                    raise EngineError(
                        f"gate {op.kind!r} after measurement on qubit "
                        f"{op.qubits[locs.index(lq)]}; measurements must "
                        "come last"
                    )
            g = _gate_matrix(op.kind, tuple(op.params))  # type: ignore[arg-type]
            if len(locs) == 1:
                psi = _apply_1q(psi, g, locs[0], k)
            else:
                psi = _apply_2q(psi, g, locs[0], locs[1], k)

        probs = np.abs(psi) ** 2
        rng = np.random.default_rng(self.config.rng_seed)
        cum = np.cumsum(probs)
        draws = rng.random(shots)
        idx = np.searchsorted(cum, draws * cum[-1], side="right")
        idx = np.minimum(idx, len(probs) - 1)

        n_cl = program.n_clbits

        def bitstring(state_index: int) -> str:
            bits = ["0"] * n_cl
            for c, lq in clbit_of.items():
                bits[n_cl - 1 - c] = str((state_index >> lq) & 1)
            return "".join(bits)

        uniq, cnt = np.unique(idx, return_counts=True)
        labels = {int(u): bitstring(int(u)) for u in uniq}
        counts: dict[str, int] = {}
        for u, c in zip(uniq, cnt):
            key = labels[int(u)]
            counts[key] = counts.get(key, 0) + int(c)
        memory = None
        if output_format == "memory":
            memory = tuple(labels[int(i)] for i in idx)
        return counts, memory


_RUNNABLE_KINDS = frozenset(
    {"x", "sx", "h", "rz", "u", "cx", "cz", "swap", "measure", "barrier"}
)

ENGINE_KINDS = ("echo", "statevector")


def make_engine(
    kind: str, model: HardwareModel, config: EngineConfig | None = None
) -> Engine:
    if kind == "echo":
        return EchoEngine(model, config)
    if kind == "statevector":
        return StatevectorEngine(model, config)
    raise EngineError(f"unknown engine kind {kind!r}; know {ENGINE_KINDS}")
