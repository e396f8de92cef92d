"""State-space extraction and transfer functions.

The compiled schedule is affine in (x, u) whenever no parameter is
modulated, so ``A``/``B`` are read column by column from evaluations at
unit basis vectors, with no differencing error.  Modulated parameters are
first frozen at an operating point, which yields the same affine form.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .compiler import BondGraphError, OdeSystem
from .core import Probe
from .sim import format_number

__all__ = ["StateSpace", "TransferFunction", "extract", "transfer_function", "MAX_ORDER"]

MAX_ORDER = 64


@dataclass(frozen=True, eq=False)
class StateSpace:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray
    D: np.ndarray
    state_labels: tuple[str, ...] = ()
    input_labels: tuple[str, ...] = ()
    output_labels: tuple[str, ...] = ()
    frozen: bool = False
    operating_point: tuple = field(default=(), compare=False)

    def __post_init__(self):
        n, m, p = self.A.shape[0], self.B.shape[1], self.C.shape[0]
        if self.A.shape != (n, n) or self.B.shape != (n, m) or self.C.shape != (p, n) or self.D.shape != (p, m):
            raise ValueError(
                f"inconsistent shapes A{self.A.shape} B{self.B.shape} C{self.C.shape} D{self.D.shape}"
            )

    @property
    def n(self) -> int:
        return self.A.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, StateSpace):
            return NotImplemented
        return (
            all(np.array_equal(getattr(self, m), getattr(other, m)) for m in "ABCD")
            and (self.state_labels, self.input_labels, self.output_labels, self.frozen)
            == (other.state_labels, other.input_labels, other.output_labels, other.frozen)
        )

    __hash__ = None

    def to_text(self) -> str:
        lines = []
        if self.state_labels:
            lines.append("# states " + " ".join(self.state_labels))
        if self.input_labels:
            lines.append("# inputs " + " ".join(self.input_labels))
        if self.output_labels:
            lines.append("# outputs " + " ".join(self.output_labels))
        if self.frozen:
            lines.append("# parameters frozen at the operating point")
        for name in "ABCD":
            mat = getattr(self, name)
            lines.append(f"{name} {mat.shape[0]} {mat.shape[1]}")
            for row in mat:
                lines.append(" ".join(format_number(v) for v in row))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "StateSpace":
        mats: dict[str, np.ndarray] = {}
        labels = {"states": (), "inputs": (), "outputs": ()}
        frozen = False
        lines = iter(text.splitlines())
        for line in lines:
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                words = line[1:].split()
                if words and words[0] in labels:
                    labels[words[0]] = tuple(words[1:])
                elif "frozen" in words:
                    frozen = True
                continue
            name, r, c = line.split()
            r, c = int(r), int(c)
            rows = [[float(v) for v in next(lines).split()] for _ in range(r)]
            mats[name] = np.array(rows, dtype=float).reshape(r, c)
        missing = set("ABCD") - set(mats)
        if missing:
            raise ValueError(f"missing matrix blocks: {sorted(missing)}")
        return cls(
            mats["A"], mats["B"], mats["C"], mats["D"],
            labels["states"], labels["inputs"], labels["outputs"], frozen,
        )


@dataclass(frozen=True)
class TransferFunction:
    """Ratio of polynomials in s, coefficients highest power first."""

    num: np.ndarray
    den: np.ndarray

    def __call__(self, s: complex) -> complex:
        return np.polyval(self.num, s) / np.polyval(self.den, s)

    def to_text(self) -> str:
        return (
            "num " + " ".join(format_number(v) for v in self.num) + "\n"
            "den " + " ".join(format_number(v) for v in self.den) + "\n"
        )


def _resolve_outputs(system: OdeSystem, outputs) -> list[Probe]:
    if outputs is None:
        return list(system.graph.probes)
    out = []
    for o in outputs:
        if isinstance(o, Probe):
            out.append(o)
        else:
            quantity, target = str(o).split(".", 1)
            out.append(Probe(target, quantity))
    return out


def _output_value(system: OdeSystem, slots: np.ndarray, probe: Probe) -> np.ndarray:
    g = system.graph
    q, tgt = probe.quantity, probe.target
    if q in ("effort", "flow"):
        b = g.bond(tgt)
        at = (system.effort_slot if q == "effort" else system.flow_slot)[b.id]
        return slots[at : at + b.dim].copy()
    if q in ("momentum", "displacement"):
        s = next(s for s in system.states if s.element == tgt)
        return slots[system.x_slot + s.offset : system.x_slot + s.offset + s.dim].copy()
    raise ValueError(f"unsupported probe quantity {q!r}")


def _power_terms(system: OdeSystem, probe: Probe):
    g = system.graph
    if probe.target in g.bond_map:
        return [(1, g.bond(probe.target))]
    return [(p.sign, p.bond) for p in g.ports(probe.target)]


def extract(
    system: OdeSystem,
    outputs: Iterable[Probe | str] | None = None,
    operating_point: tuple[float, Sequence[float], Sequence[float]] | None = None,
) -> StateSpace:
    """Linear model ``dx = A x + B u``, ``y = C x + D u``.

    ``outputs`` are probes (or ``"quantity.target"`` labels); the graph's
    own probes are used when omitted.  Power outputs are bilinear in the
    bond variables and are linearized about the operating point.
    """
    nx, nu = system.nx, system.nu
    if operating_point is None:
        t0, x0, u0 = 0.0, np.zeros(nx), system.u0
    else:
        t0, x0, u0 = operating_point
        x0 = np.asarray(x0, dtype=float)
        u0 = system.u0 if u0 is None else np.asarray(u0, dtype=float)
    probes = _resolve_outputs(system, outputs)

    frozen = None
    if system.modulated:
        frozen = system.modulation_values(t0, x0, u0)
        bad = [k for k, v in frozen.items() if not np.isfinite(v)]
        if bad:
            owner = system.param_owner(bad[0])
            raise BondGraphError(f"parameter of {owner} is not finite at the operating point")
        program = system.build_program(frozen=frozen)
    else:
        program = system.program

    def run(x, u):
        return system.run(program, t0, x, u)

    base = run(np.zeros(nx), np.zeros(nu))
    cols_x = [run(np.eye(nx)[j], np.zeros(nu)) for j in range(nx)]
    cols_u = [run(np.zeros(nx), np.eye(nu)[j]) for j in range(nu)]
    op = run(x0, u0) if any(p.quantity == "power" for p in probes) else None

    def dx(sl):
        return sl[system.dx_slot : system.dx_slot + nx]

    A = np.array([dx(c) - dx(base) for c in cols_x]).T.reshape(nx, nx)
    B = np.array([dx(c) - dx(base) for c in cols_u]).T.reshape(nx, nu)

    c_rows, d_rows, labels = [], [], []
    for probe in probes:
        if probe.quantity == "power":
            # d(e.f) = f0.de + e0.df
            crow, drow = np.zeros(nx), np.zeros(nu)
            for sign, b in _power_terms(system, probe):
                e_at, f_at = system.effort_slot[b.id], system.flow_slot[b.id]
                e0, f0 = op[e_at : e_at + b.dim], op[f_at : f_at + b.dim]

                def lin(sl, b=b, e_at=e_at, f_at=f_at, e0=e0, f0=f0):
                    de = sl[e_at : e_at + b.dim] - base[e_at : e_at + b.dim]
                    df = sl[f_at : f_at + b.dim] - base[f_at : f_at + b.dim]
                    return float(np.dot(f0, de) + np.dot(e0, df))

                crow += sign * np.array([lin(c) for c in cols_x])
                drow += sign * np.array([lin(c) for c in cols_u])
            c_rows.append(crow[None, :])
            d_rows.append(drow[None, :])
            labels.append(probe.label)
            continue
        y0 = _output_value(system, base, probe)
        cy = np.array([_output_value(system, c, probe) - y0 for c in cols_x]).T.reshape(len(y0), nx)
        dy = np.array([_output_value(system, c, probe) - y0 for c in cols_u]).T.reshape(len(y0), nu)
        c_rows.append(cy)
        d_rows.append(dy)
        labels += [probe.label] if len(y0) == 1 else [f"{probe.label}.{k + 1}" for k in range(len(y0))]
    C = np.vstack(c_rows) if c_rows else np.zeros((0, nx))
    D = np.vstack(d_rows) if d_rows else np.zeros((0, nu))
    for name, mat in (("A", A), ("B", B), ("C", C), ("D", D)):
        if not np.all(np.isfinite(mat)):
            raise BondGraphError(f"non-finite entries in {name}; a frozen parameter is singular")
    return StateSpace(
        A, B, C, D,
        tuple(system.state_labels), tuple(system.input_labels), tuple(labels),
        frozen is not None, (t0, tuple(x0), tuple(u0)),
    )


def characteristic_and_adjugate(A: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Faddeev-LeVerrier recursion.

    Returns the characteristic polynomial coefficients ``[1, c_{n-1}, ..., c_0]``
    and matrices ``M_1..M_n`` with ``adj(sI - A) = sum_k M_k s^(n-k)``.
    """
    n = A.shape[0]
    if n > MAX_ORDER:
        raise ValueError(f"order {n} exceeds the supported limit of {MAX_ORDER}")
    coeffs = [1.0]
    mats = []
    M = np.zeros((n, n))
    eye = np.eye(n)
    for k in range(1, n + 1):
        M = A @ M + coeffs[-1] * eye
        mats.append(M)
        coeffs.append(-np.trace(A @ M) / k)
    return np.array(coeffs), mats


def transfer_function(ss: StateSpace, input: int = 0, output: int = 0) -> TransferFunction:
    """Transfer function from input ``input`` to output ``output``."""
    if not (0 <= input < ss.B.shape[1]) or not (0 <= output < ss.C.shape[0]):
        raise IndexError(f"input {input} / output {output} out of range")
    den, mats = characteristic_and_adjugate(ss.A)
    b = ss.B[:, input]
    c = ss.C[output, :]
    d = ss.D[output, input]
    num = d * den
    for k, M in enumerate(mats, start=1):
        num[k] += c @ M @ b
    return TransferFunction(num, den)
