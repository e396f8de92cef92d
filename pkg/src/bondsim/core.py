"""Bond-graph data model and structural validation.

Conventions used throughout the package:

* A bond's half arrow points tail -> head; ``e . f`` is the power
  travelling in that direction.
* The stroke end of a bond *receives effort*; the other end receives
  flow.  Stroke and half-arrow direction are independent.
* Every bond has at least one junction endpoint.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable, Sequence, Union

import numpy as np

from .expr import (
    free_names,
    normalize_source,
    parse_value,
    source_calls,
)

__all__ = [
    "ElementKind",
    "Stroke",
    "Modulated",
    "Parameter",
    "Element",
    "Bond",
    "Signal",
    "Param",
    "Probe",
    "BondGraph",
    "GraphBuilder",
    "Diagnostic",
    "validate",
    "bond_power",
    "isomorphic",
    "CAUSALITY_OPTIONS",
    "STORAGE_KINDS",
]


class ElementKind(enum.Enum):
    SOURCE_EFFORT = "SE"
    SOURCE_FLOW = "SF"
    RESISTOR = "R"
    STORAGE_I = "I"
    STORAGE_C = "C"
    TRANSFORMER = "TF"
    GYRATOR = "GY"
    JUNCTION_0 = "0"
    JUNCTION_1 = "1"
    RESISTOR_FIELD = "RF"
    STORAGE_C_FIELD = "CF"
    STORAGE_I_FIELD = "IF"
    ACTIVATED_EFFORT = "ABE"
    ACTIVATED_FLOW = "ABF"

    @property
    def keyword(self) -> str:
        return self.value

    @property
    def is_junction(self) -> bool:
        return self in (ElementKind.JUNCTION_0, ElementKind.JUNCTION_1)

    @property
    def is_source(self) -> bool:
        return self in (ElementKind.SOURCE_EFFORT, ElementKind.SOURCE_FLOW)

    @property
    def is_activated(self) -> bool:
        return self in (ElementKind.ACTIVATED_EFFORT, ElementKind.ACTIVATED_FLOW)

    @property
    def is_field(self) -> bool:
        return self in (ElementKind.RESISTOR_FIELD, ElementKind.STORAGE_C_FIELD, ElementKind.STORAGE_I_FIELD)

    @property
    def is_storage(self) -> bool:
        return self in STORAGE_KINDS

    @property
    def port_count(self) -> int | None:
        """Exact number of ports, or None for junctions (>= 2)."""
        if self.is_junction:
            return None
        if self in (ElementKind.TRANSFORMER, ElementKind.GYRATOR) or self.is_field:
            return 2
        return 1

    @property
    def modulable(self) -> bool:
        return not (self.is_junction or self.is_activated)

    @property
    def param_key(self) -> str | None:
        if self.is_source:
            return "value"
        if self.is_junction or self.is_activated:
            return None
        return "k"


STORAGE_KINDS = frozenset(
    {ElementKind.STORAGE_I, ElementKind.STORAGE_C, ElementKind.STORAGE_I_FIELD, ElementKind.STORAGE_C_FIELD}
)

# accepted values of the `causality` attribute, per kind
CAUSALITY_OPTIONS: dict[ElementKind, tuple[str, ...]] = {
    ElementKind.RESISTOR: ("flow", "effort"),
    ElementKind.STORAGE_I: ("integral", "differential"),
    ElementKind.STORAGE_C: ("integral", "differential"),
    ElementKind.STORAGE_I_FIELD: ("integral", "differential"),
    ElementKind.STORAGE_C_FIELD: ("integral", "differential"),
    ElementKind.TRANSFORMER: ("left", "right"),
    ElementKind.GYRATOR: ("outer", "inner"),
}


class Stroke(enum.Enum):
    UNASSIGNED = "unassigned"
    HEAD = "head"
    TAIL = "tail"

    def flip(self) -> "Stroke":
        if self is Stroke.HEAD:
            return Stroke.TAIL
        if self is Stroke.TAIL:
            return Stroke.HEAD
        return self


@dataclass(frozen=True)
class Modulated:
    """A non-constant parameter given by an expression over signals and ``t``.

    ``source`` is stored whitespace-normalized, so two spellings of the
    same token sequence compare equal.
    """

    source: str

    def __post_init__(self):
        object.__setattr__(self, "source", normalize_source(self.source))
        parse_value(self.source)  # fail early

    @cached_property
    def tree(self):
        return parse_value(self.source)

    @property
    def shape(self) -> tuple[int, ...]:
        tree = self.tree
        if not isinstance(tree, list):
            return ()
        if tree and isinstance(tree[0], list):
            return (len(tree), len(tree[0]))
        return (len(tree),)


Constant = Union[float, tuple]


@dataclass(frozen=True)
class Parameter:
    """Element parameter: a constant (scalar, vector, square matrix) or Modulated."""

    value: Union[float, tuple, Modulated]
    unit: str = ""

    @property
    def modulated(self) -> bool:
        return isinstance(self.value, Modulated)

    @property
    def shape(self) -> tuple[int, ...]:
        if isinstance(self.value, Modulated):
            return self.value.shape
        return np.shape(self.value)

    def array(self) -> np.ndarray:
        if self.modulated:
            raise TypeError("modulated parameter has no constant value")
        return np.asarray(self.value, dtype=float)

    @staticmethod
    def of(value, unit: str = "") -> "Parameter":
        """Coerce numbers, nested sequences, arrays or Modulated to a Parameter."""
        if isinstance(value, Parameter):
            return value
        if isinstance(value, Modulated):
            return Parameter(value, unit)
        if isinstance(value, str):
            return Parameter(Modulated(value), unit)
        arr = np.asarray(value, dtype=float)
        if arr.ndim == 0:
            return Parameter(float(arr), unit)
        return Parameter(_to_tuple(arr), unit)


def _to_tuple(arr: np.ndarray):
    if arr.ndim == 1:
        return tuple(float(v) for v in arr)
    return tuple(_to_tuple(row) for row in arr)


@dataclass(frozen=True)
class Element:
    id: str
    kind: ElementKind
    parameter: Parameter | None = None
    initial: tuple[float, ...] | None = None
    causality: str | None = None
    outputs: tuple[str, ...] = ()
    label: str | None = None


@dataclass(frozen=True)
class Bond:
    id: str
    tail: str
    head: str
    dim: int = 1
    stroke: Stroke = Stroke.UNASSIGNED
    tail_port: int | None = None
    head_port: int | None = None
    label: str | None = None

    def other(self, element_id: str) -> str:
        return self.head if element_id == self.tail else self.tail


@dataclass(frozen=True)
class Signal:
    """Named signal: an expression over sources, other signals, params and t."""

    name: str
    expr: Modulated


@dataclass(frozen=True)
class Param:
    name: str
    value: float


PROBE_QUANTITIES = ("effort", "flow", "power", "momentum", "displacement")


@dataclass(frozen=True)
class Probe:
    target: str
    quantity: str

    @property
    def label(self) -> str:
        return f"{self.quantity}.{self.target}"


@dataclass(frozen=True)
class Diagnostic:
    severity: str  # "error" | "warning"
    rule: str
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: [{self.rule}] {self.location}: {self.message}"


@dataclass(frozen=True)
class PortRef:
    bond: Bond
    end: str  # "tail" | "head"

    @property
    def inward(self) -> bool:
        """True when the half arrow points into the element at this port."""
        return self.end == "head"

    @property
    def sign(self) -> int:
        return 1 if self.end == "head" else -1


@dataclass(frozen=True)
class BondGraph:
    """Immutable bond-graph model.  Tuples keep declaration order."""

    name: str = "model"
    elements: tuple[Element, ...] = ()
    bonds: tuple[Bond, ...] = ()
    params: tuple[Param, ...] = ()
    signals: tuple[Signal, ...] = ()
    probes: tuple[Probe, ...] = ()

    @cached_property
    def element_map(self) -> dict[str, Element]:
        return {e.id: e for e in self.elements}

    @cached_property
    def bond_map(self) -> dict[str, Bond]:
        return {b.id: b for b in self.bonds}

    @cached_property
    def param_map(self) -> dict[str, float]:
        return {p.name: p.value for p in self.params}

    @cached_property
    def signal_map(self) -> dict[str, Signal]:
        return {s.name: s for s in self.signals}

    def element(self, element_id: str) -> Element:
        return self.element_map[element_id]

    def bond(self, bond_id: str) -> Bond:
        return self.bond_map[bond_id]

    @cached_property
    def _ports(self) -> dict[str, list[PortRef]]:
        explicit: dict[str, dict[int, PortRef]] = {e.id: {} for e in self.elements}
        implicit: dict[str, list[PortRef]] = {e.id: [] for e in self.elements}
        for b in self.bonds:
            for end, eid, port in (("tail", b.tail, b.tail_port), ("head", b.head, b.head_port)):
                if eid not in explicit:
                    continue
                ref = PortRef(b, end)
                if port is not None and port not in explicit[eid]:
                    explicit[eid][port] = ref
                else:
                    implicit[eid].append(ref)
        out: dict[str, list[PortRef]] = {}
        for eid in explicit:
            slots = dict(explicit[eid])
            rest = iter(implicit[eid])
            n = len(slots) + len(implicit[eid])
            ordered = []
            for i in range(1, n + 1):
                if i in slots:
                    ordered.append(slots.pop(i))
                else:
                    nxt = next(rest, None)
                    if nxt is not None:
                        ordered.append(nxt)
            ordered.extend(slots.values())
            ordered.extend(rest)
            out[eid] = ordered
        return out

    def ports(self, element_id: str) -> list[PortRef]:
        """Ports of an element in port order (explicit indices, then declaration order)."""
        return self._ports[element_id]

    def storages(self) -> list[Element]:
        return [e for e in self.elements if e.kind.is_storage]

    def junction_ports(self, element_id: str) -> list[PortRef]:
        """Junction ports excluding activated bonds."""
        return [p for p in self.ports(element_id) if not self.element_map[p.bond.other(element_id)].kind.is_activated]

    def replace(self, **changes) -> "BondGraph":
        fields = dict(
            name=self.name,
            elements=self.elements,
            bonds=self.bonds,
            params=self.params,
            signals=self.signals,
            probes=self.probes,
        )
        fields.update({k: tuple(v) if k != "name" else v for k, v in changes.items()})
        return BondGraph(**fields)


class GraphBuilder:
    """Mutable helper that accumulates declarations and builds a BondGraph."""

    def __init__(self, name: str = "model"):
        self.name = name
        self.elements: list[Element] = []
        self.bonds: list[Bond] = []
        self.params: list[Param] = []
        self.signals: list[Signal] = []
        self.probes: list[Probe] = []

    def param(self, name: str, value: float) -> "GraphBuilder":
        self.params.append(Param(name, float(value)))
        return self

    def element(
        self,
        kind: ElementKind | str,
        element_id: str,
        parameter=None,
        *,
        initial=None,
        causality: str | None = None,
        outputs: Sequence[str] = (),
        label: str | None = None,
        unit: str = "",
    ) -> "GraphBuilder":
        if isinstance(kind, str):
            kind = ElementKind(kind)
        par = None if parameter is None else Parameter.of(parameter, unit)
        init = None
        if initial is not None:
            init = tuple(float(v) for v in np.atleast_1d(np.asarray(initial, dtype=float)))
        self.elements.append(Element(element_id, kind, par, init, causality, tuple(outputs), label))
        return self

    def bond(
        self,
        bond_id: str,
        tail: str,
        head: str,
        dim: int = 1,
        stroke: Stroke = Stroke.UNASSIGNED,
        label: str | None = None,
    ) -> "GraphBuilder":
        tail, tail_port = _split_port(tail)
        head, head_port = _split_port(head)
        self.bonds.append(Bond(bond_id, tail, head, dim, stroke, tail_port, head_port, label))
        return self

    def signal(self, name: str, source: str) -> "GraphBuilder":
        self.signals.append(Signal(name, Modulated(source)))
        return self

    def probe(self, target: str, quantity: str) -> "GraphBuilder":
        self.probes.append(Probe(target, quantity))
        return self

    def build(self) -> BondGraph:
        return BondGraph(
            self.name,
            tuple(self.elements),
            tuple(self.bonds),
            tuple(self.params),
            tuple(self.signals),
            tuple(self.probes),
        )


def isomorphic(a: BondGraph, b: BondGraph) -> bool:
    """Same model up to declaration order.

    Identifiers are the vertex labels, so no search is needed; port
    numbers on multi-port elements stay significant because they live on
    the bonds.  Probe order is ignored and model names are not compared.
    """

    def keyed(items, key):
        out = {}
        for it in items:
            out.setdefault(key(it), []).append(it)
        return {k: sorted(v, key=repr) for k, v in out.items()}

    return (
        keyed(a.elements, lambda e: e.id) == keyed(b.elements, lambda e: e.id)
        and keyed(a.bonds, lambda x: x.id) == keyed(b.bonds, lambda x: x.id)
        and keyed(a.params, lambda x: x.name) == keyed(b.params, lambda x: x.name)
        and keyed(a.signals, lambda x: x.name) == keyed(b.signals, lambda x: x.name)
        and sorted(map(repr, a.probes)) == sorted(map(repr, b.probes))
    )


def _split_port(ref: str) -> tuple[str, int | None]:
    if "." in ref:
        name, port = ref.rsplit(".", 1)
        return name, int(port)
    return ref, None


def bond_power(effort, flow) -> float:
    """Power carried by a bond, ``e . f``, counted positive tail -> head."""
    e = np.atleast_1d(np.asarray(effort, dtype=float))
    f = np.atleast_1d(np.asarray(flow, dtype=float))
    if e.shape != f.shape:
        raise ValueError(f"effort and flow dimensions differ: {e.shape} vs {f.shape}")
    return float(np.dot(e, f))


# ---------------------------------------------------------------- validate


def _err(rule: str, location: str, message: str) -> Diagnostic:
    if rule == "parameter-mismatch":
        message = "parameter mismatch: " + message
    return Diagnostic("error", rule, location, message)


def validate(graph: BondGraph) -> list[Diagnostic]:
    """Structural checks independent of causality.

    Returns diagnostics in a deterministic order; an empty list means the
    graph satisfies every structural invariant.
    """
    diags: list[Diagnostic] = []
    diags += _check_ids(graph)
    diags += _check_bonds(graph)
    diags += _check_ports(graph)
    diags += _check_parameters(graph)
    diags += _check_signals(graph)
    diags += _check_probes(graph)
    return diags


def _check_ids(graph: BondGraph) -> Iterable[Diagnostic]:
    seen: set[str] = set()
    for e in graph.elements:
        if e.id in seen:
            yield _err("duplicate-id", e.id, "element id declared twice")
        seen.add(e.id)
    seen_b: set[str] = set()
    for b in graph.bonds:
        if b.id in seen_b:
            yield _err("duplicate-id", b.id, "bond id declared twice")
        seen_b.add(b.id)
    names: set[str] = set()
    for n in [p.name for p in graph.params] + [s.name for s in graph.signals]:
        if n in names or n == "t":
            yield _err("duplicate-id", n, "signal/param name declared twice or shadows t")
        names.add(n)


def _check_bonds(graph: BondGraph) -> Iterable[Diagnostic]:
    emap = graph.element_map
    for b in graph.bonds:
        missing = [x for x in (b.tail, b.head) if x not in emap]
        for x in missing:
            yield _err("unknown-endpoint", b.id, f"bond endpoint {x!r} is not a declared element")
        if missing:
            continue
        if b.dim < 1:
            yield _err("bond-dimension", b.id, "bond dimension must be a positive integer")
        if b.tail == b.head:
            yield _err("self-loop", b.id, "bond connects an element to itself")
        kt, kh = emap[b.tail].kind, emap[b.head].kind
        if not (kt.is_junction or kh.is_junction):
            yield _err(
                "junction-endpoint",
                b.id,
                f"non-junction elements must connect through nodes ({b.tail} {kt.keyword} -- {b.head} {kh.keyword})",
            )
        if (kt.is_activated and not kh.is_junction) or (kh.is_activated and not kt.is_junction):
            yield _err("activated-bond-host", b.id, "activated bonds attach to junctions only")
        if kt.is_activated and kh.is_activated:
            yield _err("activated-bond-host", b.id, "two activated elements bonded together")


def _check_ports(graph: BondGraph) -> Iterable[Diagnostic]:
    for e in graph.elements:
        ports = graph.ports(e.id)
        n = e.kind.port_count
        if n is None:
            if len(ports) < 2:
                yield _err("port-count", e.id, f"junction needs at least 2 bonds, has {len(ports)}")
            dims = {p.bond.dim for p in ports}
            if len(dims) > 1:
                yield _err("parameter-mismatch", e.id, f"bonds at a junction must share a dimension, got {sorted(dims)}")
        elif len(ports) != n:
            what = "occupied port" if len(ports) > n else "unconnected port"
            yield _err("port-count", e.id, f"{e.kind.keyword} has {n} port(s) but {len(ports)} bond(s) ({what})")
        for b in graph.bonds:
            for eid, port in ((b.tail, b.tail_port), (b.head, b.head_port)):
                if eid == e.id and port is not None and not (n and 1 <= port <= n):
                    yield _err("port-count", b.id, f"port index {port} invalid for {e.id}")
        explicit = [p for b in graph.bonds for eid, p in ((b.tail, b.tail_port), (b.head, b.head_port)) if eid == e.id and p]
        if len(explicit) != len(set(explicit)):
            yield _err("port-count", e.id, "port referenced by more than one bond (occupied port)")


def _check_parameters(graph: BondGraph) -> Iterable[Diagnostic]:
    for e in graph.elements:
        key = e.kind.param_key
        ports = graph.ports(e.id)
        if key is None:
            if e.parameter is not None:
                yield _err("parameter-mismatch", e.id, f"{e.kind.keyword} takes no parameter")
        elif e.parameter is None:
            yield _err("missing-parameter", e.id, f"{e.kind.keyword} requires '{key}'")
        else:
            yield from _check_param_shape(e, ports)
        if e.causality is not None and e.causality not in CAUSALITY_OPTIONS.get(e.kind, ()):
            yield _err("causality-override", e.id, f"causality {e.causality!r} not valid for {e.kind.keyword}")
        if e.initial is not None:
            if not e.kind.is_storage:
                yield _err("parameter-mismatch", e.id, "initial value given for a non-storage element")
            else:
                want = sum(p.bond.dim for p in ports)
                if ports and len(e.initial) not in (1, want):
                    yield _err("parameter-mismatch", e.id, f"initial value has {len(e.initial)} entries, expected {want}")
        for q in e.outputs:
            if q not in PROBE_QUANTITIES:
                yield _err("unknown-output", e.id, f"unknown output {q!r}")
            elif q in ("momentum", "displacement"):
                yield from _check_storage_output(graph, e.id, q, e.id)


def _check_param_shape(e: Element, ports: list[PortRef]) -> Iterable[Diagnostic]:
    if not ports or e.kind.port_count is None or len(ports) != e.kind.port_count:
        return
    shape = e.parameter.shape
    if e.kind.is_field:
        n = sum(p.bond.dim for p in ports)
        if shape not in ((n, n),) and not (shape == () and n == 1):
            yield _err("parameter-mismatch", e.id, f"field needs a {n}x{n} matrix parameter, got shape {shape}")
        return
    if e.kind in (ElementKind.TRANSFORMER, ElementKind.GYRATOR):
        d1, d2 = ports[0].bond.dim, ports[1].bond.dim
        if d1 != d2:
            yield _err("parameter-mismatch", e.id, f"two-port bonds have different dimensions {d1} and {d2}")
            return
    n = ports[0].bond.dim
    if e.kind.is_source:
        ok = shape == () or shape == (n,)
        want = f"scalar or length-{n} vector"
    else:
        ok = shape == () or shape == (n, n)
        want = f"scalar or {n}x{n} matrix"
    if not ok:
        yield _err("parameter-mismatch", e.id, f"parameter shape {shape} does not fit bond dimension {n} (need {want})")


_STORAGE_OF = {
    "momentum": (ElementKind.STORAGE_I, ElementKind.STORAGE_I_FIELD),
    "displacement": (ElementKind.STORAGE_C, ElementKind.STORAGE_C_FIELD),
}


def _check_storage_output(graph: BondGraph, target: str, quantity: str, location: str) -> Iterable[Diagnostic]:
    el = graph.element_map.get(target)
    if el is None:
        yield _err("unknown-reference", location, f"{quantity}() refers to unknown element {target!r}")
    elif not el.kind.is_storage:
        yield _err("storage-output", location, f"{quantity}() source {target!r} is not a storage element")
    elif el.kind not in _STORAGE_OF[quantity]:
        yield _err(
            "storage-output",
            location,
            f"{target!r} ({el.kind.keyword}) does not hold a {quantity} state; "
            "I-type storages expose momentum, C-type storages displacement",
        )


def _check_signals(graph: BondGraph) -> Iterable[Diagnostic]:
    declared = set(graph.param_map) | set(graph.signal_map) | {"t"}
    for s in graph.signals:
        for call in source_calls(s.expr.tree):
            target = call.args[0].id
            if call.func in ("effort", "flow"):
                b = graph.bond_map.get(target)
                if b is None:
                    yield _err("unknown-reference", s.name, f"{call.func}() refers to unknown bond {target!r}")
                elif len(call.args) == 2 and call.args[1].value > b.dim:
                    yield _err("unknown-reference", s.name, f"index out of range for bond {target!r}")
            else:
                yield from _check_storage_output(graph, target, call.func, s.name)
        for n in sorted(free_names(s.expr.tree) - declared):
            yield _err("undeclared-signal", s.name, f"expression references undeclared name {n!r}")
    yield from _check_signal_cycles(graph)
    names_ok = set(graph.param_map) | set(graph.signal_map) | {"t"}
    for e in graph.elements:
        if e.parameter is not None and e.parameter.modulated:
            tree = e.parameter.value.tree
            if any(True for _ in source_calls(tree)):
                yield _err("undeclared-signal", e.id, "modulated parameters reference signals, not sources directly")
            for n in sorted(free_names(tree) - names_ok):
                yield _err("undeclared-signal", e.id, f"modulation references undeclared signal {n!r}")


def _check_signal_cycles(graph: BondGraph) -> Iterable[Diagnostic]:
    deps = {s.name: free_names(s.expr.tree) & set(graph.signal_map) for s in graph.signals}
    state: dict[str, int] = {}

    def visit(n: str) -> bool:
        state[n] = 1
        for d in sorted(deps[n]):
            if state.get(d) == 1 or (state.get(d) is None and visit(d)):
                return True
        state[n] = 2
        return False

    for s in graph.signals:
        if state.get(s.name) is None and visit(s.name):
            yield _err("signal-cycle", s.name, "signal definitions reference each other cyclically")
            return


def _check_probes(graph: BondGraph) -> Iterable[Diagnostic]:
    seen = set()
    for p in graph.probes:
        if p.quantity not in PROBE_QUANTITIES:
            yield _err("unknown-output", p.target, f"unknown probe quantity {p.quantity!r}")
            continue
        if p.quantity in ("effort", "flow"):
            if p.target not in graph.bond_map:
                yield _err("unknown-reference", p.target, f"{p.quantity} probe needs a bond id")
        elif p.quantity == "power":
            if p.target not in graph.element_map and p.target not in graph.bond_map:
                yield _err("unknown-reference", p.target, "power probe target not found")
        else:
            yield from _check_storage_output(graph, p.target, p.quantity, p.target)
        if p in seen:
            yield Diagnostic("warning", "duplicate-probe", p.target, f"probe {p.label} declared twice")
        seen.add(p)
