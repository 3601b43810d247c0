"""OpenQASM 2.0 subset frontend: lex, parse, validate, emit.

Supported surface: the version header, ``include "qelib1.inc"`` (accepted
as a marker for the builtin gate vocabulary, never read from disk),
``qreg``/``creg`` declarations, applications of the gate kinds in
GATE_SIGNATURES, ``measure`` (single-bit and whole-register), and
``barrier``. ``gate`` definitions, ``if``, ``opaque``, and ``reset`` are
rejected with an error naming the construct, never skipped.

Symbolic parameters are a documented extension: a pragma comment of the
form ``// @param theta`` declares a parameter which may then appear as a
bare ``rz`` angle. Parameter arithmetic inside expressions is rejected;
a parametric angle is either a literal constant expression or exactly one
declared name.

Multiple quantum (classical) registers are flattened into one qubit
(clbit) index space in declaration order.

All functions here are pure; parsing is safe to run concurrently.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

from .errors import QhqError

# kind -> (qubit arity, parameter arity)
GATE_SIGNATURES: dict[str, tuple[int, int]] = {
    "u": (1, 3),
    "rz": (1, 1),
    "sx": (1, 0),
    "x": (1, 0),
    "h": (1, 0),
    "cx": (2, 0),
    "cz": (2, 0),
    "swap": (2, 0),
}

_REJECTED_KEYWORDS = {"gate", "if", "opaque", "reset"}

# Registers above this size are refused; keeps broadcast expansion bounded.
MAX_REGISTER_SIZE = 4096

_MAX_EXPR_DEPTH = 50

_PRAGMA_RE = re.compile(r"^\s*//\s*@param\s+([A-Za-z_][A-Za-z0-9_]*)\s*$")


class QasmError(QhqError):
    """Positioned frontend error."""

    def __init__(self, message: str, line: int, col: int):
        self.line = line
        self.col = col
        super().__init__(f"{message} (line {line}, column {col})")


class QasmLexError(QasmError):
    pass


class QasmSyntaxError(QasmError):
    pass


class UnsupportedFeatureError(QasmError):
    """Construct is valid OpenQASM 2.0 but outside the supported subset."""


class QasmSemanticError(QasmError):
    pass


class ProgramValidationError(QhqError):
    """Program cannot run on the given hardware model."""

    def __init__(self, reason: str, message: str):
        self.reason = reason  # "too-many-qubits" or "unlowerable-gate"
        super().__init__(message)


@dataclass(frozen=True)
class ParamRef:
    """Reference to a declared symbolic parameter."""

    name: str


@dataclass(frozen=True)
class GateOp:
    kind: str
    qubits: tuple[int, ...]
    clbits: tuple[int, ...] = ()
    params: tuple[float | ParamRef, ...] = ()


@dataclass(frozen=True)
class Program:
    n_qubits: int
    n_clbits: int
    ops: tuple[GateOp, ...]
    parameters: tuple[str, ...] = ()

    def is_parametric(self) -> bool:
        return any(
            isinstance(p, ParamRef) for op in self.ops for p in op.params
        )


def check_program(p: Program) -> None:
    """Raise if a structural invariant of the IR is broken."""
    if len(set(p.parameters)) != len(p.parameters):
        raise QhqError("parameter names are not unique")
    for op in p.ops:
        if op.kind in GATE_SIGNATURES:
            nq, npar = GATE_SIGNATURES[op.kind]
            if len(op.qubits) != nq or len(op.params) != npar:
                raise QhqError(f"bad arity for {op.kind}: {op}")
        elif op.kind == "measure":
            if len(op.qubits) != 1 or len(op.clbits) != 1:
                raise QhqError(f"bad arity for measure: {op}")
        elif op.kind == "barrier":
            if not op.qubits:
                raise QhqError("barrier needs at least one qubit")
        else:
            raise QhqError(f"unknown op kind {op.kind!r}")
        for q in op.qubits:
            if not 0 <= q < p.n_qubits:
                raise QhqError(f"qubit index {q} out of range")
        for c in op.clbits:
            if not 0 <= c < p.n_clbits:
                raise QhqError(f"clbit index {c} out of range")
        for v in op.params:
            if isinstance(v, ParamRef):
                if v.name not in p.parameters:
                    raise QhqError(f"undeclared parameter {v.name!r}")
            elif not math.isfinite(v):
                raise QhqError(f"non-finite angle in {op.kind}")
        if len(set(op.qubits)) != len(op.qubits):
            raise QhqError(f"repeated qubit in {op.kind}")


# ---------------------------------------------------------------------------
# Lexer

_TWO_CHAR = ("->", "==")
_ONE_CHAR = ";,[](){}+-*/^"

_REAL_RE = re.compile(r"(\d+\.\d*|\.\d+)([eE][+-]?\d+)?|\d+[eE][+-]?\d+")
_INT_RE = re.compile(r"\d+")
_ID_RE = re.compile(r"[A-Za-z_][A-Za-z0-9_]*")


@dataclass(frozen=True)
class _Tok:
    type: str  # ID, REAL, INT, STRING, SYM, EOF
    value: str
    line: int
    col: int


def _lex(text: str) -> list[_Tok]:
    toks: list[_Tok] = []
    line, col = 1, 1
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch == "\n":
            line += 1
            col = 1
            i += 1
            continue
        if ch in " \t\r":
            i += 1
            col += 1
            continue
        if text.startswith("//", i):
            j = text.find("\n", i)
            i = n if j < 0 else j
            continue
        if ch == '"':
            j = text.find('"', i + 1)
            if j < 0 or "\n" in text[i + 1 : j]:
                raise QasmLexError("unterminated string literal", line, col)
            toks.append(_Tok("STRING", text[i + 1 : j], line, col))
            col += j - i + 1
            i = j + 1
            continue
        m = _REAL_RE.match(text, i)
        if m:
            toks.append(_Tok("REAL", m.group(0), line, col))
            col += len(m.group(0))
            i = m.end()
            continue
        m = _INT_RE.match(text, i)
        if m:
            toks.append(_Tok("INT", m.group(0), line, col))
            col += len(m.group(0))
            i = m.end()
            continue
        m = _ID_RE.match(text, i)
        if m:
            toks.append(_Tok("ID", m.group(0), line, col))
            col += len(m.group(0))
            i = m.end()
            continue
        if text.startswith(_TWO_CHAR, i):
            toks.append(_Tok("SYM", text[i : i + 2], line, col))
            i += 2
            col += 2
            continue
        if ch in _ONE_CHAR:
            toks.append(_Tok("SYM", ch, line, col))
            i += 1
            col += 1
            continue
        raise QasmLexError(f"unexpected character {ch!r}", line, col)
    toks.append(_Tok("EOF", "", line, col))
    return toks


# ---------------------------------------------------------------------------
# Parser


class _Parser:
    def __init__(self, text: str):
        self.params: list[str] = []
        for ln, raw in enumerate(text.splitlines(), start=1):
            m = _PRAGMA_RE.match(raw)
            if m:
                if m.group(1) in self.params:
                    raise QasmSemanticError(
                        f"duplicate parameter {m.group(1)!r}", ln, 1
                    )
                self.params.append(m.group(1))
        self.toks = _lex(text)
        self.pos = 0
        self.qregs: dict[str, tuple[int, int]] = {}  # name -> (offset, size)
        self.cregs: dict[str, tuple[int, int]] = {}
        self.n_qubits = 0
        self.n_clbits = 0
        self.ops: list[GateOp] = []

    def peek(self) -> _Tok:
        return self.toks[self.pos]

    def next(self) -> _Tok:
        t = self.toks[self.pos]
        if t.type != "EOF":
            self.pos += 1
        return t

    def expect(self, type_: str, value: str | None = None) -> _Tok:
        t = self.next()
        if t.type != type_ or (value is not None and t.value != value):
            want = value if value is not None else type_
            raise QasmSyntaxError(
                f"expected {want!r}, got {t.value!r}", t.line, t.col
            )
        return t

    # --- entry -------------------------------------------------------------

    def parse(self) -> Program:
        self.expect("ID", "OPENQASM")
        vtok = self.next()
        if vtok.type != "REAL" or vtok.value != "2.0":
            raise UnsupportedFeatureError(
                f"only OPENQASM 2.0 is supported, got {vtok.value!r}",
                vtok.line,
                vtok.col,
            )
        self.expect("SYM", ";")
        while self.peek().type != "EOF":
            self.statement()
        prog = Program(
            n_qubits=self.n_qubits,
            n_clbits=self.n_clbits,
            ops=tuple(self.ops),
            parameters=tuple(self.params),
        )
        check_program(prog)
        return prog

    def statement(self) -> None:
        t = self.peek()
        if t.type != "ID":
            raise QasmSyntaxError(f"expected a statement, got {t.value!r}", t.line, t.col)
        if t.value in _REJECTED_KEYWORDS:
            raise UnsupportedFeatureError(
                f"{t.value!r} statements are not supported", t.line, t.col
            )
        if t.value == "include":
            self.next()
            fname = self.expect("STRING")
            if fname.value != "qelib1.inc":
                raise UnsupportedFeatureError(
                    f'only include "qelib1.inc" is supported, got "{fname.value}"',
                    fname.line,
                    fname.col,
                )
            self.expect("SYM", ";")
        elif t.value in ("qreg", "creg"):
            self.register_decl(t.value)
        elif t.value == "measure":
            self.measure_stmt()
        elif t.value == "barrier":
            self.barrier_stmt()
        elif t.value in GATE_SIGNATURES:
            self.gate_stmt()
        else:
            raise UnsupportedFeatureError(
                f"unsupported gate or statement {t.value!r}", t.line, t.col
            )

    def register_decl(self, kw: str) -> None:
        self.next()
        name = self.expect("ID")
        self.expect("SYM", "[")
        size_tok = self.expect("INT")
        self.expect("SYM", "]")
        self.expect("SYM", ";")
        size = int(size_tok.value)
        if size < 1:
            raise QasmSemanticError("register size must be >= 1", size_tok.line, size_tok.col)
        if size > MAX_REGISTER_SIZE:
            raise QasmSemanticError(
                f"register size {size} exceeds limit {MAX_REGISTER_SIZE}",
                size_tok.line,
                size_tok.col,
            )
        table = self.qregs if kw == "qreg" else self.cregs
        if name.value in self.qregs or name.value in self.cregs:
            raise QasmSemanticError(f"register {name.value!r} already declared", name.line, name.col)
        if kw == "qreg":
            table[name.value] = (self.n_qubits, size)
            self.n_qubits += size
        else:
            table[name.value] = (self.n_clbits, size)
            self.n_clbits += size

    # --- arguments ----------------------------------------------------------

    def argument(self, table: dict, what: str) -> tuple[str, int | None, _Tok]:
        """Return (register name, index or None for whole register, name token)."""
        name = self.expect("ID")
        if name.value not in table:
            raise QasmSemanticError(
                f"undeclared {what} register {name.value!r}", name.line, name.col
            )
        if self.peek().type == "SYM" and self.peek().value == "[":
            self.next()
            idx_tok = self.expect("INT")
            self.expect("SYM", "]")
            idx = int(idx_tok.value)
            _, size = table[name.value]
            if idx >= size:
                raise QasmSemanticError(
                    f"index {idx} out of bounds for {name.value}[{size}]",
                    idx_tok.line,
                    idx_tok.col,
                )
            return name.value, idx, name
        return name.value, None, name

    def _flat(self, table: dict, name: str, idx: int) -> int:
        offset, _ = table[name]
        return offset + idx

    def measure_stmt(self) -> None:
        self.next()
        qname, qidx, qtok = self.argument(self.qregs, "quantum")
        self.expect("SYM", "->")
        cname, cidx, ctok = self.argument(self.cregs, "classical")
        self.expect("SYM", ";")
        if (qidx is None) != (cidx is None):
            raise QasmSemanticError(
                "measure needs both sides indexed or both whole registers",
                qtok.line,
                qtok.col,
            )
        if qidx is None:
            qsize = self.qregs[qname][1]
            csize = self.cregs[cname][1]
            if qsize != csize:
                raise QasmSemanticError(
                    f"register size mismatch in measure: {qname}[{qsize}] -> {cname}[{csize}]",
                    qtok.line,
                    qtok.col,
                )
            for i in range(qsize):
                self.ops.append(
                    GateOp(
                        "measure",
                        (self._flat(self.qregs, qname, i),),
                        (self._flat(self.cregs, cname, i),),
                    )
                )
        else:
            self.ops.append(
                GateOp(
                    "measure",
                    (self._flat(self.qregs, qname, qidx),),
                    (self._flat(self.cregs, cname, cidx),),
                )
            )

    def barrier_stmt(self) -> None:
        kw = self.next()
        qubits: list[int] = []
        while True:
            qname, qidx, _ = self.argument(self.qregs, "quantum")
            if qidx is None:
                offset, size = self.qregs[qname]
                qubits.extend(range(offset, offset + size))
            else:
                qubits.append(self._flat(self.qregs, qname, qidx))
            if self.peek().type == "SYM" and self.peek().value == ",":
                self.next()
                continue
            break
        self.expect("SYM", ";")
        # A qubit listed twice in one barrier is harmless; dedupe, keep order.
        seen: list[int] = []
        for q in qubits:
            if q not in seen:
                seen.append(q)
        self.ops.append(GateOp("barrier", tuple(seen)))
        del kw

    def gate_stmt(self) -> None:
        name = self.next()
        n_qubits, n_params = GATE_SIGNATURES[name.value]
        params: tuple[float | ParamRef, ...] = ()
        if self.peek().type == "SYM" and self.peek().value == "(":
            self.next()
            plist: list[float | ParamRef] = []
            if not (self.peek().type == "SYM" and self.peek().value == ")"):
                while True:
                    plist.append(self.expression())
                    if self.peek().type == "SYM" and self.peek().value == ",":
                        self.next()
                        continue
                    break
            self.expect("SYM", ")")
            params = tuple(plist)
        if len(params) != n_params:
            raise QasmSyntaxError(
                f"{name.value} takes {n_params} parameter(s), got {len(params)}",
                name.line,
                name.col,
            )
        args: list[tuple[str, int | None]] = []
        while True:
            qname, qidx, _ = self.argument(self.qregs, "quantum")
            args.append((qname, qidx))
            if self.peek().type == "SYM" and self.peek().value == ",":
                self.next()
                continue
            break
        self.expect("SYM", ";")
        if len(args) != n_qubits:
            raise QasmSemanticError(
                f"{name.value} takes {n_qubits} qubit argument(s), got {len(args)}",
                name.line,
                name.col,
            )
        if any(idx is None for _, idx in args):
            if n_qubits != 1 or len(args) != 1:
                raise UnsupportedFeatureError(
                    "register broadcast is only supported for single-qubit gates",
                    name.line,
                    name.col,
                )
            qname = args[0][0]
            offset, size = self.qregs[qname]
            for i in range(size):
                self.ops.append(GateOp(name.value, (offset + i,), params=params))
            return
        qubits = tuple(self._flat(self.qregs, q, i) for q, i in args)
        if len(set(qubits)) != len(qubits):
            raise QasmSemanticError(
                f"{name.value} applied to the same qubit twice", name.line, name.col
            )
        self.ops.append(GateOp(name.value, qubits, params=params))

    # --- expressions ---------------------------------------------------------

    def expression(self) -> float | ParamRef:
        start = self.pos
        value = self._expr_add(0)
        if isinstance(value, ParamRef):
            # A symbolic angle must be exactly one bare identifier.
            if self.pos != start + 1:
                t = self.toks[start]
                raise UnsupportedFeatureError(
                    "parameter arithmetic is not supported; use a bare parameter name",
                    t.line,
                    t.col,
                )
            return value
        if not math.isfinite(value):
            t = self.toks[start]
            raise QasmSemanticError("angle expression is not finite", t.line, t.col)
        return value

    def _symbolic_guard(self, v, tok) -> float:
        if isinstance(v, ParamRef):
            raise UnsupportedFeatureError(
                "parameter arithmetic is not supported; use a bare parameter name",
                tok.line,
                tok.col,
            )
        return v

    def _expr_add(self, depth: int) -> float | ParamRef:
        if depth > _MAX_EXPR_DEPTH:
            t = self.peek()
            raise QasmSyntaxError("expression too deeply nested", t.line, t.col)
        left = self._expr_mul(depth + 1)
        while self.peek().type == "SYM" and self.peek().value in "+-":
            op = self.next()
            left = self._symbolic_guard(left, op)
            right = self._symbolic_guard(self._expr_mul(depth + 1), op)
            left = left + right if op.value == "+" else left - right
        return left

    def _expr_mul(self, depth: int) -> float | ParamRef:
        left = self._expr_pow(depth + 1)
        while self.peek().type == "SYM" and self.peek().value in "*/":
            op = self.next()
            left = self._symbolic_guard(left, op)
            right = self._symbolic_guard(self._expr_pow(depth + 1), op)
            if op.value == "*":
                left = left * right
            else:
                if right == 0:
                    raise QasmSemanticError("division by zero in angle expression", op.line, op.col)
                left = left / right
        return left

    def _expr_pow(self, depth: int) -> float | ParamRef:
        base = self._expr_atom(depth + 1)
        if self.peek().type == "SYM" and self.peek().value == "^":
            op = self.next()
            base = self._symbolic_guard(base, op)
            exp = self._symbolic_guard(self._expr_pow(depth + 1), op)  # right assoc
            try:
                return float(base) ** float(exp)
            except (OverflowError, ValueError) as exc:
                raise QasmSemanticError(f"bad power expression: {exc}", op.line, op.col)
        return base

    def _expr_atom(self, depth: int) -> float | ParamRef:
        if depth > _MAX_EXPR_DEPTH:
            t = self.peek()
            raise QasmSyntaxError("expression too deeply nested", t.line, t.col)
        t = self.next()
        if t.type in ("REAL", "INT"):
            return float(t.value)
        if t.type == "ID":
            if t.value == "pi":
                return math.pi
            if t.value in self.params:
                return ParamRef(t.value)
            raise QasmSemanticError(
                f"unknown identifier {t.value!r} in expression "
                "(declare parameters with a '// @param name' pragma)",
                t.line,
                t.col,
            )
        if t.type == "SYM" and t.value == "-":
            v = self._expr_atom(depth + 1)
            return self._symbolic_guard(v, t) * -1.0
        if t.type == "SYM" and t.value == "+":
            return self._symbolic_guard(self._expr_atom(depth + 1), t)
        if t.type == "SYM" and t.value == "(":
            v = self._expr_add(depth + 1)
            self.expect("SYM", ")")
            if isinstance(v, ParamRef):
                raise UnsupportedFeatureError(
                    "parameter arithmetic is not supported; use a bare parameter name",
                    t.line,
                    t.col,
                )
            return v
        raise QasmSyntaxError(f"expected an expression, got {t.value!r}", t.line, t.col)


def parse_qasm2(text: str) -> Program:
    """Parse OpenQASM 2.0 text into a Program.

    Total over all inputs: returns a Program or raises a QasmError with
    line and column, never anything else.
    """
    if not isinstance(text, str):
        raise QasmLexError("input must be text", 1, 1)
    return _Parser(text).parse()


# ---------------------------------------------------------------------------
# Emission


def _fmt_param(p: float | ParamRef) -> str:
    if isinstance(p, ParamRef):
        return p.name
    return repr(float(p))


def emit_qasm2(p: Program) -> str:
    """Render a Program back to OpenQASM 2.0 text.

    parse_qasm2(emit_qasm2(p)) is structurally equal to p for any valid
    Program (registers come back flattened into q/c).
    """
    check_program(p)
    lines = ["OPENQASM 2.0;", 'include "qelib1.inc";']
    for name in p.parameters:
        lines.append(f"// @param {name}")
    if p.n_qubits:
        lines.append(f"qreg q[{p.n_qubits}];")
    if p.n_clbits:
        lines.append(f"creg c[{p.n_clbits}];")
    for op in p.ops:
        if op.kind == "measure":
            lines.append(f"measure q[{op.qubits[0]}] -> c[{op.clbits[0]}];")
        elif op.kind == "barrier":
            args = ", ".join(f"q[{q}]" for q in op.qubits)
            lines.append(f"barrier {args};")
        else:
            args = ", ".join(f"q[{q}]" for q in op.qubits)
            if op.params:
                pl = ",".join(_fmt_param(v) for v in op.params)
                lines.append(f"{op.kind}({pl}) {args};")
            else:
                lines.append(f"{op.kind} {args};")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Model-level validation


def validate_program(p: Program, model) -> Program:
    """Check that ``p`` can run on ``model``: fits the qubit count and every
    gate kind lowers to the model's basis. Basis membership itself is not
    required here; decomposition happens later in the pipeline."""
    if p.n_qubits > model.n_qubits:
        raise ProgramValidationError(
            "too-many-qubits",
            f"program uses {p.n_qubits} qubits, model has {model.n_qubits}",
        )
    from .transpile import lowerable_kinds

    allowed = lowerable_kinds(model.basis_gates)
    for op in p.ops:
        if op.kind in ("measure", "barrier"):
            continue
        if op.kind not in allowed:
            raise ProgramValidationError(
                "unlowerable-gate",
                f"gate kind {op.kind!r} cannot be lowered to basis "
                f"{sorted(model.basis_gates)}",
            )
    return p
