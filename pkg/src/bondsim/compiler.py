"""Compile a causally assigned bond graph into an explicit ODE system.

Each element relation (or junction sum) becomes a small computation that
reads already-known variables and writes bond efforts/flows.  The
computations are topologically sorted; a cycle is an algebraic loop and
is rejected.  The sorted schedule is lowered to a flat instruction tape
(see ``_opcodes``) that one of the kernels executes.

Sign conventions:

* sources are literal on their bond: ``e = K_E`` / ``f = K_F``;
* passive elements and two-ports see the flow oriented into the port,
  ``sigma * f`` with ``sigma = +1`` when the half arrow points at them;
* junctions use literal flows/efforts, bonds pointing in count ``+``.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np

from . import _opcodes as oc
from .causality import CausalAssignment, assign
from .core import BondGraph, Element, ElementKind, PortRef, validate
from .expr import (
    Binary,
    Call,
    ExpressionError,
    Name,
    Num,
    SOURCE_FUNCTIONS,
    Unary,
    free_names,
    parse_expr,
)

__all__ = [
    "BondGraphError",
    "AlgebraicLoopError",
    "DifferentialCausalityError",
    "CausalityConflictError",
    "StructureError",
    "SingularParameterError",
    "ModulationError",
    "StateVar",
    "InputVar",
    "Computation",
    "Program",
    "OdeSystem",
    "Evaluation",
    "derive",
    "compile_graph",
    "evaluate",
]


class BondGraphError(Exception):
    """Base class for model errors raised by the compiler and simulator."""


class StructureError(BondGraphError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


class CausalityConflictError(BondGraphError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


class DifferentialCausalityError(BondGraphError):
    def __init__(self, diagnostics):
        self.diagnostics = list(diagnostics)
        super().__init__("; ".join(str(d) for d in self.diagnostics))


class AlgebraicLoopError(BondGraphError):
    def __init__(self, bonds: Sequence[str], elements: Sequence[str]):
        self.bonds = list(bonds)
        self.elements = list(elements)
        super().__init__(f"algebraic loop through bonds {', '.join(self.bonds)} (elements {', '.join(self.elements)})")


class SingularParameterError(BondGraphError):
    def __init__(self, element: str, t: float | None = None):
        self.element = element
        self.t = t
        when = f" at t={t!r}" if t is not None else ""
        super().__init__(f"parameter of {element} is singular (zero / non-invertible){when}")


class ModulationError(BondGraphError):
    def __init__(self, owner: str, message: str, line: int, col: int, t: float | None = None):
        self.owner = owner
        self.line = line
        self.col = col
        self.t = t
        when = f" at t={t!r}" if t is not None else ""
        super().__init__(f"{owner}: {message} (expression line {line}, column {col}){when}")


@dataclass(frozen=True)
class StateVar:
    element: str
    kind: str  # "momentum" | "displacement"
    offset: int  # index into the state vector
    dim: int
    initial: tuple[float, ...]


@dataclass(frozen=True)
class InputVar:
    element: str
    offset: int  # index into the input vector
    dim: int
    default: tuple[float, ...]


@dataclass(frozen=True)
class Computation:
    label: str
    element: str
    reads: frozenset
    writes: frozenset
    code: tuple[int, ...] = field(repr=False)
    param_expr: bool = False


@dataclass
class Program:
    """Executable tape plus the slot template it runs on."""

    code: np.ndarray
    consts: np.ndarray
    slots: np.ndarray
    tags: list

    def fresh_slots(self) -> np.ndarray:
        return self.slots.copy()


class _Consts:
    def __init__(self):
        self.values: list[float] = []
        self.index: dict[float, int] = {}

    def __call__(self, v: float) -> int:
        v = float(v)
        key = v if v == v else "nan"
        if key not in self.index or (v == 0.0 and np.signbit(v) != np.signbit(self.values[self.index[key]])):
            self.index[key] = len(self.values)
            self.values.append(v)
        return self.index[key]


class _Slots:
    def __init__(self):
        self.n = 0
        self.init: dict[int, float] = {}

    def alloc(self, size: int, values=None) -> int:
        base = self.n
        self.n += size
        if values is not None:
            for i, v in enumerate(np.ravel(values)):
                self.init[base + i] = float(v)
        return base


@dataclass
class _Par:
    slot: int
    scalar: bool
    modulated: bool


_FN_OPS = {
    "sin": oc.X_SIN,
    "cos": oc.X_COS,
    "exp": oc.X_EXP,
    "sqrt": oc.X_SQRT,
    "abs": oc.X_ABS,
    "min": oc.X_MIN,
    "max": oc.X_MAX,
    "pow": oc.X_POW,
}
_BIN_OPS = {"+": oc.X_ADD, "-": oc.X_SUB, "*": oc.X_MUL, "/": oc.X_DIV}
_TAGGED = {oc.X_DIV, oc.X_SQRT, oc.X_POW}


def compile_expression(
    node,
    consts: _Consts,
    tags: list,
    owner: str,
    resolve: Callable[[Name], tuple[str, float]],
    source: Callable[[Call], int] | None = None,
) -> tuple[list[int], int]:
    """Lower an expression tree to stack code.  Returns (program, max depth).

    ``resolve(name)`` returns ``("slot", index)`` or ``("const", value)``.
    """
    prog: list[int] = []

    def tag(n) -> int:
        tags.append(("expr", owner, n.line, n.col))
        return len(tags) - 1

    def walk(n, depth: int) -> int:
        if isinstance(n, Num):
            prog.extend((oc.X_PUSHC, consts(n.value)))
            return depth + 1
        if isinstance(n, Name):
            kind, v = resolve(n)
            if kind == "slot":
                prog.extend((oc.X_PUSHS, int(v)))
            else:
                prog.extend((oc.X_PUSHC, consts(v)))
            return depth + 1
        if isinstance(n, Unary):
            d = walk(n.operand, depth)
            prog.append(oc.X_NEG)
            return d
        if isinstance(n, Binary):
            d1 = walk(n.left, depth)
            d2 = walk(n.right, depth + 1)
            op = _BIN_OPS[n.op]
            prog.append(op)
            if op in _TAGGED:
                prog.append(tag(n))
            return max(d1, d2)
        if isinstance(n, Call):
            if n.func in SOURCE_FUNCTIONS:
                if source is None:
                    raise ExpressionError(f"{n.func}() not allowed here", n.line, n.col)
                prog.extend((oc.X_PUSHS, source(n)))
                return depth + 1
            d = depth
            for i, a in enumerate(n.args):
                d = max(d, walk(a, depth + i))
            op = _FN_OPS[n.func]
            prog.append(op)
            if op in _TAGGED:
                prog.append(tag(n))
            return d
        raise TypeError(f"not an expression node: {n!r}")

    depth = walk(node, 0)
    return prog, depth


class _Builder:
    """Collects computations and lays out slots for one graph."""

    def __init__(self, graph: BondGraph, asg: CausalAssignment):
        self.g = graph
        self.a = asg
        self.slots = _Slots()
        self.consts = _Consts()
        self.tags: list = []
        self.nodes: list[Computation] = []
        self.max_scratch = 0
        self.max_stack = 0
        self.scratch_users: list[int] = []
        self.t_slot = self.slots.alloc(1, [0.0])
        self.states: list[StateVar] = []
        self.inputs: list[InputVar] = []
        self.state_slot: dict[str, int] = {}
        self.input_slot: dict[str, int] = {}
        self.layout_states()
        self.layout_inputs()
        self.e: dict[str, int] = {}
        self.f: dict[str, int] = {}
        for b in graph.bonds:
            self.e[b.id] = self.slots.alloc(b.dim)
            self.f[b.id] = self.slots.alloc(b.dim)
        self.signal_slot = {s.name: self.slots.alloc(1) for s in graph.signals}
        self.dx_slot = self.slots.alloc(self.nx + len(self.quadratures))
        self.pars: dict[str, _Par] = {}
        self.deriv_code: list[int] = []

    # ---------------------------------------------------------------- layout
    @property
    def nx(self) -> int:
        return sum(s.dim for s in self.states)

    @property
    def nu(self) -> int:
        return sum(u.dim for u in self.inputs)

    def layout_states(self) -> None:
        offset = 0
        for el in self.g.elements:
            if not el.kind.is_storage:
                continue
            dim = sum(p.bond.dim for p in self.g.ports(el.id))
            kind = "momentum" if el.kind in (ElementKind.STORAGE_I, ElementKind.STORAGE_I_FIELD) else "displacement"
            init = el.initial or (0.0,)
            init = tuple(init) * dim if len(init) == 1 else tuple(init)
            self.states.append(StateVar(el.id, kind, offset, dim, init))
            offset += dim
        # energy accumulators ride along as extra integrator states
        self.quadratures: list[tuple[str, str | None]] = [("supplied", None), ("dissipated", None)]
        for el in self.g.elements:
            if el.kind.is_storage and el.parameter is not None and el.parameter.modulated:
                self.quadratures.append(("stored", el.id))
        init = [v for s in self.states for v in s.initial] + [0.0] * len(self.quadratures)
        self.x_slot = self.slots.alloc(offset + len(self.quadratures), init)
        for s in self.states:
            self.state_slot[s.element] = self.x_slot + s.offset

    def layout_inputs(self) -> None:
        offset = 0
        vals = []
        for el in self.g.elements:
            if el.kind.is_source and not el.parameter.modulated:
                dim = self.g.ports(el.id)[0].bond.dim
                v = np.broadcast_to(el.parameter.array(), (dim,))
                self.inputs.append(InputVar(el.id, offset, dim, tuple(float(x) for x in v)))
                vals.extend(v)
                offset += dim
        self.u_slot = self.slots.alloc(offset, vals)
        for u in self.inputs:
            self.input_slot[u.element] = self.u_slot + u.offset

    # ----------------------------------------------------------------- utils
    def c(self, v: float) -> int:
        return self.consts(v)

    def tag(self, owner: str) -> int:
        self.tags.append(("element", owner))
        return len(self.tags) - 1

    def scratch(self, size: int) -> int:
        # placeholder slot; patched to the shared scratch area in finish()
        self.max_scratch = max(self.max_scratch, size)
        return -1

    def sigma(self, p: PortRef) -> int:
        return p.sign

    def eff_in(self, p: PortRef, eid: str) -> bool:
        return self.a.effort_in(p.bond, eid)

    def node(self, label, element, reads, writes, code, param_expr=False) -> None:
        self.nodes.append(
            Computation(label, element, frozenset(reads), frozenset(writes), tuple(code), param_expr)
        )

    def lin(self, dst: int, n: int, terms) -> list[int]:
        code = [oc.OP_LIN, dst, n, len(terms)]
        for src, coef in terms:
            code += [src, self.c(coef)]
        return code

    def mul(self, dst: int, par: _Par, src: int, n: int, coef: float, trans: bool = False) -> list[int]:
        if par.scalar:
            return [oc.OP_MULS, dst, par.slot, src, n, self.c(coef)]
        return [oc.OP_MATVEC, dst, par.slot, src, n, int(trans), self.c(coef)]

    def inv(self, dst: int, par: _Par, src: int, n: int, coef: float, owner: str, trans: bool = False) -> list[int]:
        if par.scalar:
            return [oc.OP_DIVS, dst, par.slot, src, n, self.c(coef), self.tag(owner)]
        self.scratch(n * n + n)
        return [oc.OP_SOLVE, dst, par.slot, src, n, int(trans), self.c(coef), self.tag(owner), -1]

    def temp(self, n: int) -> int:
        return self.slots.alloc(n)

    # ------------------------------------------------------------ parameters
    def resolve_name(self, owner: str):
        params = self.g.param_map

        def resolve(n: Name):
            if n.id == "t":
                return ("slot", self.t_slot)
            if n.id in self.signal_slot:
                return ("slot", self.signal_slot[n.id])
            if n.id in params:
                return ("const", params[n.id])
            raise ExpressionError(f"undefined name {n.id!r} in {owner}", n.line, n.col)

        return resolve

    def expr_code(self, dst: int, tree, owner: str, source=None) -> list[int]:
        prog, depth = compile_expression(tree, self.consts, self.tags, owner, self.resolve_name(owner), source)
        self.max_stack = max(self.max_stack, depth)
        return [oc.OP_EXPR, dst, -2, len(prog)] + prog

    def param(self, el: Element, n: int) -> _Par:
        """Slots for an element's parameter; schedules EXPR code if modulated."""
        if el.id in self.pars:
            return self.pars[el.id]
        p = el.parameter
        if not p.modulated:
            arr = p.array()
            par = _Par(self.slots.alloc(arr.size, arr), arr.ndim == 0 or (arr.ndim == 1 and el.kind.is_source), False)
            if el.kind.is_source and arr.ndim == 1:
                par.scalar = False
        else:
            tree = p.value.tree
            flat = _flatten(tree)
            slot = self.slots.alloc(len(flat))
            code: list[int] = []
            for i, node in enumerate(flat):
                code += self.expr_code(slot + i, node, el.id)
            names = free_names(tree)
            reads = {("sig", s) for s in names if s in self.signal_slot}
            self.node(f"modulation {el.id}", el.id, reads, {("par", el.id)}, code, param_expr=True)
            scalar = not isinstance(tree, list)
            par = _Par(slot, scalar, True)
        self.pars[el.id] = par
        return par

    def par_reads(self, el: Element) -> set:
        p = el.parameter
        return {("par", el.id)} if p is not None and p.modulated else set()

    # --------------------------------------------------------------- signals
    def signals(self) -> None:
        for s in self.g.signals:
            reads = {("sig", n) for n in free_names(s.expr.tree) if n in self.signal_slot}

            def source(call: Call, reads=reads) -> int:
                target = call.args[0].id
                idx = int(call.args[1].value) - 1 if len(call.args) == 2 else 0
                if call.func == "effort":
                    reads.add(("e", target))
                    return self.e[target] + idx
                if call.func == "flow":
                    reads.add(("f", target))
                    return self.f[target] + idx
                return self.state_slot[target] + idx

            code = self.expr_code(self.signal_slot[s.name], s.expr.tree, s.name, source)
            self.node(f"signal {s.name}", s.name, reads, {("sig", s.name)}, code)

    # -------------------------------------------------------------- elements
    def elements(self) -> None:
        for el in self.g.elements:
            getattr(self, "el_" + el.kind.name.lower())(el)

    def el_source_effort(self, el: Element) -> None:
        self._source(el, "e")

    def el_source_flow(self, el: Element) -> None:
        self._source(el, "f")

    def _source(self, el: Element, var: str) -> None:
        p = self.g.ports(el.id)[0]
        b, n = p.bond, p.bond.dim
        dst = (self.e if var == "e" else self.f)[b.id]
        if not el.parameter.modulated:
            code = self.lin(dst, n, [(self.input_slot[el.id], 1.0)])
        else:
            par = self.param(el, n)
            if par.scalar:
                code = []
                for k in range(n):
                    code += self.lin(dst + k, 1, [(par.slot, 1.0)])
            else:
                code = self.lin(dst, n, [(par.slot, 1.0)])
        self.node(f"source {el.id}", el.id, self.par_reads(el), {(var, b.id)}, code)

    def el_resistor(self, el: Element) -> None:
        p = self.g.ports(el.id)[0]
        b, n, sg = p.bond, p.bond.dim, p.sign
        par = self.param(el, n)
        if not self.eff_in(p, el.id):
            code = self.mul(self.e[b.id], par, self.f[b.id], n, sg)
            self.node(f"R {el.id} e=K*f", el.id, {("f", b.id)} | self.par_reads(el), {("e", b.id)}, code)
        else:
            code = self.inv(self.f[b.id], par, self.e[b.id], n, sg, el.id)
            self.node(f"R {el.id} f=e/K", el.id, {("e", b.id)} | self.par_reads(el), {("f", b.id)}, code)

    def el_storage_i(self, el: Element) -> None:
        p = self.g.ports(el.id)[0]
        b, n, sg = p.bond, p.bond.dim, p.sign
        par = self.param(el, n)
        x = self.state_slot[el.id]
        code = self.inv(self.f[b.id], par, x, n, sg, el.id)
        self.node(f"I {el.id} f=p/K", el.id, self.par_reads(el), {("f", b.id)}, code)
        self.deriv_code += self.lin(self.dx_slot + (x - self.x_slot), n, [(self.e[b.id], 1.0)])

    def el_storage_c(self, el: Element) -> None:
        p = self.g.ports(el.id)[0]
        b, n, sg = p.bond, p.bond.dim, p.sign
        par = self.param(el, n)
        x = self.state_slot[el.id]
        code = self.inv(self.e[b.id], par, x, n, 1.0, el.id)
        self.node(f"C {el.id} e=q/K", el.id, self.par_reads(el), {("e", b.id)}, code)
        self.deriv_code += self.lin(self.dx_slot + (x - self.x_slot), n, [(self.f[b.id], float(sg))])

    def el_transformer(self, el: Element) -> None:
        p1, p2 = self.g.ports(el.id)
        b1, b2, n = p1.bond, p2.bond, p1.bond.dim
        s1, s2 = p1.sign, p2.sign
        par = self.param(el, n)
        pr = self.par_reads(el)
        if not self.eff_in(p1, el.id):
            # left: e1 = K^T e2, f2 = K f1 (oriented flows)
            self.node(
                f"TF {el.id} e1", el.id, {("e", b2.id)} | pr, {("e", b1.id)},
                self.mul(self.e[b1.id], par, self.e[b2.id], n, 1.0, trans=True),
            )
            self.node(
                f"TF {el.id} f2", el.id, {("f", b1.id)} | pr, {("f", b2.id)},
                self.mul(self.f[b2.id], par, self.f[b1.id], n, -s1 * s2),
            )
        else:
            # right: e2 = K^-T e1, f1 = K^-1 f2
            self.node(
                f"TF {el.id} e2", el.id, {("e", b1.id)} | pr, {("e", b2.id)},
                self.inv(self.e[b2.id], par, self.e[b1.id], n, 1.0, el.id, trans=True),
            )
            self.node(
                f"TF {el.id} f1", el.id, {("f", b2.id)} | pr, {("f", b1.id)},
                self.inv(self.f[b1.id], par, self.f[b2.id], n, -s1 * s2, el.id),
            )

    def el_gyrator(self, el: Element) -> None:
        p1, p2 = self.g.ports(el.id)
        b1, b2, n = p1.bond, p2.bond, p1.bond.dim
        s1, s2 = p1.sign, p2.sign
        par = self.param(el, n)
        pr = self.par_reads(el)
        if not self.eff_in(p1, el.id):
            # outer: e2 = K f1, e1 = K^T f2
            self.node(
                f"GY {el.id} e2", el.id, {("f", b1.id)} | pr, {("e", b2.id)},
                self.mul(self.e[b2.id], par, self.f[b1.id], n, s1),
            )
            self.node(
                f"GY {el.id} e1", el.id, {("f", b2.id)} | pr, {("e", b1.id)},
                self.mul(self.e[b1.id], par, self.f[b2.id], n, -s2, trans=True),
            )
        else:
            # inner: f2 = K^-T e1, f1 = K^-1 e2
            self.node(
                f"GY {el.id} f2", el.id, {("e", b1.id)} | pr, {("f", b2.id)},
                self.inv(self.f[b2.id], par, self.e[b1.id], n, -s2, el.id, trans=True),
            )
            self.node(
                f"GY {el.id} f1", el.id, {("e", b2.id)} | pr, {("f", b1.id)},
                self.inv(self.f[b1.id], par, self.e[b2.id], n, s1, el.id),
            )

    def _junction(self, el: Element, common: str) -> None:
        # common = "f" for 1-junctions, "e" for 0-junctions
        ports = self.g.junction_ports(el.id)
        special_in = common == "e"
        b0 = next(p for p in ports if self.eff_in(p, el.id) == special_in)
        others = [p for p in ports if p is not b0]
        n = b0.bond.dim
        cs = self.f if common == "f" else self.e
        ss = self.e if common == "f" else self.f
        summed = "e" if common == "f" else "f"
        code: list[int] = []
        for p in others:
            code += self.lin(cs[p.bond.id], n, [(cs[b0.bond.id], 1.0)])
        self.node(
            f"{el.kind.keyword}-junction {el.id} common {common}", el.id,
            {(common, b0.bond.id)}, {(common, p.bond.id) for p in others}, code,
        )
        terms = [(ss[p.bond.id], -float(b0.sign * p.sign)) for p in others]
        self.node(
            f"{el.kind.keyword}-junction {el.id} sum {summed}", el.id,
            {(summed, p.bond.id) for p in others}, {(summed, b0.bond.id)},
            self.lin(ss[b0.bond.id], n, terms),
        )

    def el_junction_1(self, el: Element) -> None:
        self._junction(el, "f")

    def el_junction_0(self, el: Element) -> None:
        self._junction(el, "e")

    def _activated(self, el: Element, measured: str) -> None:
        p = self.g.ports(el.id)[0]
        b, n = p.bond, p.bond.dim
        host = self.g.element(b.other(el.id))
        jports = self.g.junction_ports(host.id)
        common = "f" if host.kind is ElementKind.JUNCTION_1 else "e"
        slots = self.e if measured == "e" else self.f
        if measured == common:
            special_in = common == "e"
            src = next(q for q in jports if self.eff_in(q, host.id) == special_in)
            reads = {(measured, src.bond.id)}
            terms = [(slots[src.bond.id], 1.0)]
        else:
            # non-common variable: sum over bonds pointing into the host junction
            inbound = [q for q in jports if q.inward]
            reads = {(measured, q.bond.id) for q in inbound}
            terms = [(slots[q.bond.id], 1.0) for q in inbound]
        self.node(f"AB {el.id} reads {measured}", el.id, reads, {(measured, b.id)}, self.lin(slots[b.id], n, terms))
        other = "f" if measured == "e" else "e"
        zero = (self.f if measured == "e" else self.e)[b.id]
        self.node(f"AB {el.id} {other}=0", el.id, set(), {(other, b.id)}, self.lin(zero, n, []))

    def el_activated_effort(self, el: Element) -> None:
        self._activated(el, "e")

    def el_activated_flow(self, el: Element) -> None:
        self._activated(el, "f")

    def _field_ports(self, el: Element):
        ports = self.g.ports(el.id)
        offs, o = [], 0
        for p in ports:
            offs.append(o)
            o += p.bond.dim
        return ports, offs, o

    def el_storage_c_field(self, el: Element) -> None:
        ports, offs, N = self._field_ports(el)
        par = self.param(el, N)
        x = self.state_slot[el.id]
        tmp = self.temp(N)
        code = self.mul(tmp, par, x, N, 1.0)
        for p, o in zip(ports, offs):
            code += self.lin(self.e[p.bond.id], p.bond.dim, [(tmp + o, 1.0)])
            self.deriv_code += self.lin(self.dx_slot + (x - self.x_slot) + o, p.bond.dim, [(self.f[p.bond.id], float(p.sign))])
        self.node(f"CF {el.id} e=K*q", el.id, self.par_reads(el), {("e", p.bond.id) for p in ports}, code)

    def el_storage_i_field(self, el: Element) -> None:
        ports, offs, N = self._field_ports(el)
        par = self.param(el, N)
        x = self.state_slot[el.id]
        tmp = self.temp(N)
        code = self.mul(tmp, par, x, N, 1.0)
        for p, o in zip(ports, offs):
            code += self.lin(self.f[p.bond.id], p.bond.dim, [(tmp + o, float(p.sign))])
            self.deriv_code += self.lin(self.dx_slot + (x - self.x_slot) + o, p.bond.dim, [(self.e[p.bond.id], 1.0)])
        self.node(f"IF {el.id} f=K*p", el.id, self.par_reads(el), {("f", p.bond.id) for p in ports}, code)

    def el_resistor_field(self, el: Element) -> None:
        ports, offs, N = self._field_ports(el)
        par = self.param(el, N)
        idx_e = [o + k for p, o in zip(ports, offs) if self.eff_in(p, el.id) for k in range(p.bond.dim)]
        idx_f = [o + k for p, o in zip(ports, offs) if not self.eff_in(p, el.id) for k in range(p.bond.dim)]
        reads = self.par_reads(el)
        writes = set()
        for p in ports:
            if self.eff_in(p, el.id):
                reads.add(("e", p.bond.id))
                writes.add(("f", p.bond.id))
            else:
                reads.add(("f", p.bond.id))
                writes.add(("e", p.bond.id))
        # stacked known vector: efforts of effort-in ports, oriented flows of flow-in ports
        def gather(dst, want_e):
            code, i = [], 0
            for p in ports:
                if self.eff_in(p, el.id) == want_e:
                    src = self.e[p.bond.id] if want_e else self.f[p.bond.id]
                    code += self.lin(dst + i, p.bond.dim, [(src, 1.0 if want_e else float(p.sign))])
                    i += p.bond.dim
            return code

        def scatter(src, want_e):
            # writes unknowns of ports with eff_in == want_e: their flows
            code, i = [], 0
            for p in ports:
                if self.eff_in(p, el.id) == want_e:
                    if want_e:
                        code += self.lin(self.f[p.bond.id], p.bond.dim, [(src + i, float(p.sign))])
                    else:
                        code += self.lin(self.e[p.bond.id], p.bond.dim, [(src + i, 1.0)])
                    i += p.bond.dim
            return code

        if par.scalar:
            raise BondGraphError(f"field {el.id} needs a matrix parameter")
        nE, nF = len(idx_e), len(idx_f)
        code: list[int] = []
        if nE == 0:
            u, w = self.temp(N), self.temp(N)
            code += gather(u, False) + self.mul(w, par, u, N, 1.0) + scatter(w, False)
        elif nF == 0:
            v, w = self.temp(N), self.temp(N)
            code += gather(v, True) + self.inv(w, par, v, N, 1.0, el.id) + scatter(w, True)
        else:
            blocks = {}
            for name, rows, cols in (("EE", idx_e, idx_e), ("EF", idx_e, idx_f), ("FE", idx_f, idx_e), ("FF", idx_f, idx_f)):
                base = self.temp(len(rows) * len(cols))
                for i, r in enumerate(rows):
                    for j, cidx in enumerate(cols):
                        code += self.lin(base + i * len(cols) + j, 1, [(par.slot + r * N + cidx, 1.0)])
                blocks[name] = base
            if nE != nF:
                raise BondGraphError(f"mixed causality on {el.id} needs equally sized port groups in this version")
            ve, uf = self.temp(nE), self.temp(nF)
            code += gather(ve, True) + gather(uf, False)
            w, r, fe, t1, t2, ef = (self.temp(nE), self.temp(nE), self.temp(nE), self.temp(nF), self.temp(nF), self.temp(nF))
            ee = _Par(blocks["EE"], False, True)
            code += [oc.OP_MATVEC, w, blocks["EF"], uf, nE, 0, self.c(1.0)]
            code += self.lin(r, nE, [(ve, 1.0), (w, -1.0)])
            code += self.inv(fe, ee, r, nE, 1.0, el.id)
            code += [oc.OP_MATVEC, t1, blocks["FE"], fe, nF, 0, self.c(1.0)]
            code += [oc.OP_MATVEC, t2, blocks["FF"], uf, nF, 0, self.c(1.0)]
            code += self.lin(ef, nF, [(t1, 1.0), (t2, 1.0)])
            code += scatter(fe, True) + scatter(ef, False)
        self.node(f"RF {el.id}", el.id, reads, writes, code)

    def energy_rates(self) -> None:
        """Append code computing the derivatives of the energy accumulators."""
        res = (ElementKind.RESISTOR, ElementKind.RESISTOR_FIELD)
        for i, (what, eid) in enumerate(self.quadratures):
            if what == "supplied":
                terms = [(p, -1.0) for e in self.g.elements if e.kind.is_source for p in self.g.ports(e.id)]
            elif what == "dissipated":
                terms = [(p, 1.0) for e in self.g.elements if e.kind in res for p in self.g.ports(e.id)]
            else:
                terms = [(p, 1.0) for p in self.g.ports(eid)]
            prog = [oc.X_PUSHC, self.c(0.0)]
            for p, coef in terms:
                for k in range(p.bond.dim):
                    prog += [oc.X_PUSHS, self.e[p.bond.id] + k, oc.X_PUSHS, self.f[p.bond.id] + k, oc.X_MUL]
                    prog += [oc.X_PUSHC, self.c(coef * p.sign), oc.X_MUL, oc.X_ADD]
            self.max_stack = max(self.max_stack, 3)
            self.deriv_code += [oc.OP_EXPR, self.dx_slot + self.nx + i, -2, len(prog)] + prog

    # ------------------------------------------------------------- ordering
    def schedule(self) -> list[Computation]:
        producer: dict = {}
        for i, nd in enumerate(self.nodes):
            for v in nd.writes:
                producer[v] = i
        deps: list[set[int]] = []
        for nd in self.nodes:
            d = set()
            for v in nd.reads:
                if v not in producer:
                    raise BondGraphError(f"{nd.label}: no computation produces {v}")
                d.add(producer[v])
            deps.append(d)
        users: list[list[int]] = [[] for _ in self.nodes]
        for i, d in enumerate(deps):
            for j in d:
                users[j].append(i)
        remaining = [len(d) for d in deps]
        heap = [i for i, r in enumerate(remaining) if r == 0]
        heapq.heapify(heap)
        order = []
        while heap:
            i = heapq.heappop(heap)
            order.append(i)
            for u in users[i]:
                remaining[u] -= 1
                if remaining[u] == 0:
                    heapq.heappush(heap, u)
        if len(order) != len(self.nodes):
            self.raise_loop(deps, set(range(len(self.nodes))) - set(order))
        return [self.nodes[i] for i in order]

    def raise_loop(self, deps, stuck: set[int]):
        # walk dependencies inside the stuck set until a node repeats
        start = min(stuck)
        path, pos = [], {}
        i = start
        while i not in pos:
            pos[i] = len(path)
            path.append(i)
            i = min(d for d in deps[i] if d in stuck)
        cycle = path[pos[i]:]
        bonds, elements = [], []
        for j in cycle:
            nd = self.nodes[j]
            for kind, name in sorted(nd.writes):
                if kind in ("e", "f") and name not in bonds:
                    bonds.append(name)
            if nd.element not in elements:
                elements.append(nd.element)
        raise AlgebraicLoopError(bonds, elements)


def _flatten(tree) -> list:
    if isinstance(tree, list):
        out = []
        for t in tree:
            out.extend(_flatten(t))
        return out
    return [tree]


@dataclass(frozen=True)
class Evaluation:
    t: float
    dx: np.ndarray
    efforts: dict[str, np.ndarray]
    flows: dict[str, np.ndarray]
    powers: dict[str, float]
    bond_powers: dict[str, float]


class OdeSystem:
    """Explicit ODE system compiled from a bond graph.

    The state vector stacks storage momenta (I, IF) and displacements
    (C, CF) in element declaration order; the input vector stacks the
    values of constant sources.  Instances are immutable and ``evaluate``
    is reentrant.
    """

    def __init__(self, graph: BondGraph, assignment: CausalAssignment, builder: _Builder, schedule):
        self.graph = graph
        self.assignment = assignment
        self.states: tuple[StateVar, ...] = tuple(builder.states)
        self.inputs: tuple[InputVar, ...] = tuple(builder.inputs)
        self.schedule: tuple[Computation, ...] = tuple(schedule)
        self.nx = builder.nx
        self.quadratures = tuple(builder.quadratures)
        self.nq = len(self.quadratures)
        self.nu = builder.nu
        self.t_slot = builder.t_slot
        self.x_slot = builder.x_slot
        self.u_slot = builder.u_slot
        self.dx_slot = builder.dx_slot
        self.effort_slot = dict(builder.e)
        self.flow_slot = dict(builder.f)
        self.signal_slot = dict(builder.signal_slot)
        self.param_slots = {k: (v.slot, v.modulated) for k, v in builder.pars.items()}
        self.output_map = {}
        for b in graph.bonds:
            self.output_map[f"e.{b.id}"] = builder.e[b.id]
            self.output_map[f"f.{b.id}"] = builder.f[b.id]
        self._b = builder
        self._deriv_code = tuple(builder.deriv_code)
        self.modulated = any(v.modulated for v in builder.pars.values()) or any(
            e.parameter is not None and e.parameter.modulated for e in graph.elements
        )
        self.program = self.build_program()

    @property
    def x0(self) -> np.ndarray:
        return np.array([v for s in self.states for v in s.initial], dtype=float)

    @property
    def u0(self) -> np.ndarray:
        return np.array([v for u in self.inputs for v in u.default], dtype=float)

    @cached_property
    def state_labels(self) -> list[str]:
        out = []
        for s in self.states:
            q = "p" if s.kind == "momentum" else "q"
            out += [f"{q}.{s.element}"] if s.dim == 1 else [f"{q}.{s.element}.{k + 1}" for k in range(s.dim)]
        return out

    @cached_property
    def input_labels(self) -> list[str]:
        out = []
        for u in self.inputs:
            out += [u.element] if u.dim == 1 else [f"{u.element}.{k + 1}" for k in range(u.dim)]
        return out

    def build_program(self, bindings: Mapping[str, object] | None = None, frozen: Mapping[int, float] | None = None) -> Program:
        """Assemble the tape.

        ``bindings`` maps source ids to expressions in ``t`` (strings),
        compiled to run ahead of the schedule.  ``frozen`` maps slots to
        values that replace modulation computations (parameter freezing).
        """
        b = self._b
        consts = _Consts()
        consts.values = list(b.consts.values)
        consts.index = dict(b.consts.index)
        tags = list(b.tags)
        pre: list[int] = []
        max_stack = b.max_stack
        for sid, val in (bindings or {}).items():
            if not isinstance(val, str):
                continue
            u = next(u for u in self.inputs if u.element == sid)
            tree = parse_expr(val)
            resolve = _time_resolver(self.graph.param_map, self.t_slot, sid)
            prog, depth = compile_expression(tree, consts, tags, f"binding {sid}", resolve)
            max_stack = max(max_stack, depth)
            for k in range(u.dim):
                pre += [oc.OP_EXPR, self.u_slot + u.offset + k, -2, len(prog)] + prog
        body: list[int] = []
        for nd in self.schedule:
            if frozen is not None and nd.param_expr:
                continue
            body += nd.code
        code = pre + body + list(self._deriv_code) + [oc.OP_END]
        nslots = b.slots.n
        stack = nslots
        scratch = stack + max_stack + 1
        total = scratch + b.max_scratch + 1
        code = _patch(code, stack, scratch)
        slots = np.zeros(total)
        for i, v in b.slots.init.items():
            slots[i] = v
        for i, v in (frozen or {}).items():
            slots[i] = v
        for sid, val in (bindings or {}).items():
            if isinstance(val, str) or callable(val):
                continue
            u = next(u for u in self.inputs if u.element == sid)
            slots[self.u_slot + u.offset : self.u_slot + u.offset + u.dim] = np.broadcast_to(
                np.asarray(val, dtype=float), (u.dim,)
            )
        return Program(np.asarray(code, dtype=np.int64), np.asarray(consts.values, dtype=float), slots, tags)

    def modulation_values(self, t: float, x, u=None) -> dict[int, float]:
        """Current values of every modulated-parameter slot at (t, x, u)."""
        slots = self.run(self.program, t, x, u)
        out = {}
        for eid, (slot, mod) in self.param_slots.items():
            if mod:
                el = self.graph.element(eid)
                size = len(_flatten(el.parameter.value.tree))
                for i in range(size):
                    out[slot + i] = float(slots[slot + i])
        return out

    def param_owner(self, slot: int) -> str | None:
        """Element whose parameter occupies ``slot``."""
        for eid, (base, _) in self.param_slots.items():
            el = self.graph.element(eid)
            size = len(_flatten(el.parameter.value.tree)) if el.parameter.modulated else el.parameter.array().size
            if base <= slot < base + size:
                return eid
        return None

    def run(self, program: Program, t: float, x, u=None) -> np.ndarray:
        from ._backend import kernel

        slots = program.fresh_slots()
        slots[self.t_slot] = t
        x = np.asarray(x, dtype=float)
        if x.shape != (self.nx,):
            raise ValueError(f"state vector must have shape ({self.nx},), got {x.shape}")
        slots[self.x_slot : self.x_slot + self.nx] = x
        if u is not None:
            u = np.asarray(u, dtype=float)
            if u.shape != (self.nu,):
                raise ValueError(f"input vector must have shape ({self.nu},), got {u.shape}")
            slots[self.u_slot : self.u_slot + self.nu] = u
        status, tag = kernel.run(program.code, program.consts, slots)
        if status:
            raise self.kernel_error(program, status, tag, t)
        return slots

    def kernel_error(self, program: Program, status: int, tag: int, t: float | None) -> BondGraphError:
        if status == oc.ERR_NONFINITE:
            return BondGraphError(f"state became non-finite at t={t!r}")
        info = program.tags[tag]
        if info[0] == "element":
            return SingularParameterError(info[1], t)
        _, owner, line, col = info
        msg = {
            oc.ERR_DIV_ZERO: "division by zero",
            oc.ERR_SQRT_NEG: "sqrt of negative value",
            oc.ERR_POW_DOMAIN: "pow domain error",
        }.get(status, "expression error")
        return ModulationError(owner, msg, line, col, t)

    def inputs_vector(self, inputs=None) -> np.ndarray:
        if inputs is None:
            return self.u0
        if isinstance(inputs, Mapping):
            u = self.u0
            for sid, v in inputs.items():
                var = next((iv for iv in self.inputs if iv.element == sid), None)
                if var is None:
                    raise KeyError(f"{sid!r} is not an external source input")
                u[var.offset : var.offset + var.dim] = np.broadcast_to(np.asarray(v, dtype=float), (var.dim,))
            return u
        return np.asarray(inputs, dtype=float)

    def unpack(self, slots: np.ndarray, t: float) -> Evaluation:
        g = self.graph
        efforts = {b.id: slots[self.effort_slot[b.id] : self.effort_slot[b.id] + b.dim].copy() for b in g.bonds}
        flows = {b.id: slots[self.flow_slot[b.id] : self.flow_slot[b.id] + b.dim].copy() for b in g.bonds}
        bond_powers = {b.id: float(np.dot(efforts[b.id], flows[b.id])) for b in g.bonds}
        powers = {
            e.id: float(sum(p.sign * bond_powers[p.bond.id] for p in g.ports(e.id))) for e in g.elements
        }
        dx = slots[self.dx_slot : self.dx_slot + self.nx].copy()
        return Evaluation(t, dx, efforts, flows, powers, bond_powers)


def _time_resolver(params: Mapping[str, float], t_slot: int, owner: str):
    def resolve(n: Name):
        if n.id == "t":
            return ("slot", t_slot)
        if n.id in params:
            return ("const", params[n.id])
        raise ExpressionError(f"undefined name {n.id!r} in binding for {owner}", n.line, n.col)

    return resolve


def _patch(code: list[int], stack: int, scratch: int) -> list[int]:
    """Fill the stack/scratch placeholders left by the builder."""
    out = list(code)
    pc = 0
    while pc < len(out):
        op = out[pc]
        if op == oc.OP_END:
            break
        if op == oc.OP_LIN:
            pc += 4 + 2 * out[pc + 3]
        elif op == oc.OP_MULS:
            pc += 6
        elif op == oc.OP_DIVS:
            pc += 7
        elif op == oc.OP_MATVEC:
            pc += 7
        elif op == oc.OP_SOLVE:
            out[pc + 8] = scratch
            pc += 9
        elif op == oc.OP_EXPR:
            out[pc + 2] = stack
            pc += 4 + out[pc + 3]
        else:
            raise RuntimeError(f"bad opcode {op}")
    return out


def derive(graph: BondGraph, assignment: CausalAssignment) -> OdeSystem:
    """Build the ODE system for a conflict-free, integral-causality assignment."""
    if assignment.conflicts:
        raise CausalityConflictError(assignment.conflicts)
    diff = [d for d in assignment.diagnostics if d.kind == "DerivativeCausality"]
    if diff or assignment.differential:
        raise DifferentialCausalityError(diff or assignment.differential)
    b = _Builder(graph, assignment)
    b.signals()
    b.elements()
    b.energy_rates()
    return OdeSystem(graph, assignment, b, b.schedule())


def compile_graph(graph: BondGraph) -> OdeSystem:
    """validate -> assign -> derive, raising on the first failing stage."""
    errors = [d for d in validate(graph) if d.severity == "error"]
    if errors:
        raise StructureError(errors)
    return derive(graph, assign(graph))


def evaluate(system: OdeSystem, t: float, x, inputs=None) -> Evaluation:
    """One pass over the schedule: state derivative, bond variables, powers.

    Element powers are positive when power flows into the element.
    """
    u = system.inputs_vector(inputs)
    slots = system.run(system.program, float(t), x, u)
    return system.unpack(slots, float(t))
