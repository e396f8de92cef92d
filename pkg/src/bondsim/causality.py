"""Causality assignment by constraint propagation with integral preference.

Procedure:

1. hard constraints: sources, user strokes, ``causality`` overrides;
2. propagate junction / transformer / gyrator rules to a fixpoint;
3. while a storage has a free port, give the storage with the smallest id
   integral causality and propagate (differential if that conflicts);
4. complete any remaining free bond (smallest id, stroke at head unless
   that conflicts) and record the choice as under-determined;
5. activated bonds last; they never count toward junction rules.

Every stroke is recorded as a :class:`Step` with the steps it depended on,
so :func:`explain` can replay why a bond ended up the way it did.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .core import BondGraph, Bond, Element, ElementKind, Stroke

__all__ = [
    "StorageClass",
    "Step",
    "CausalityDiagnostic",
    "CausalAssignment",
    "assign",
    "explain",
    "effort_in",
]


class StorageClass(enum.Enum):
    INTEGRAL = "integral"
    DIFFERENTIAL = "differential"


@dataclass(frozen=True)
class Step:
    index: int
    bond: str
    stroke: Stroke
    rule: str
    element: str
    detail: str
    causes: tuple[int, ...] = ()

    def __str__(self) -> str:
        return f"{self.rule} at {self.element}: {self.detail} -> {self.bond} stroke at {self.stroke.value}"


@dataclass(frozen=True)
class CausalityDiagnostic:
    kind: str  # "Conflict" | "DerivativeCausality" | "UnderDetermined"
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.kind} at {self.location}: {self.message}"


@dataclass(frozen=True)
class CausalAssignment:
    strokes: dict[str, Stroke]
    storage_class: dict[str, StorageClass]
    diagnostics: tuple[CausalityDiagnostic, ...]
    steps: tuple[Step, ...] = field(repr=False, default=())
    bond_step: dict[str, int] = field(repr=False, default_factory=dict)

    @property
    def conflicts(self) -> list[CausalityDiagnostic]:
        return [d for d in self.diagnostics if d.kind == "Conflict"]

    @property
    def differential(self) -> list[str]:
        return [k for k, v in self.storage_class.items() if v is StorageClass.DIFFERENTIAL]

    @property
    def integral(self) -> list[str]:
        return [k for k, v in self.storage_class.items() if v is StorageClass.INTEGRAL]

    def effort_in(self, bond: Bond, element_id: str) -> bool:
        return effort_in(bond, element_id, self.strokes[bond.id])


def effort_in(bond: Bond, element_id: str, stroke: Stroke) -> bool:
    """True when ``element_id`` receives the effort of ``bond`` (stroke at its end)."""
    end = Stroke.TAIL if bond.tail == element_id else Stroke.HEAD
    return stroke is end


_PREFERRED = {
    ElementKind.STORAGE_I: True,
    ElementKind.STORAGE_I_FIELD: True,
    ElementKind.STORAGE_C: False,
    ElementKind.STORAGE_C_FIELD: False,
}


class _Solver:
    def __init__(self, graph: BondGraph):
        self.g = graph
        self.strokes: dict[str, Stroke] = {b.id: Stroke.UNASSIGNED for b in graph.bonds}
        self.steps: list[Step] = []
        self.bond_step: dict[str, int] = {}
        self.diags: list[CausalityDiagnostic] = []
        self.flagged: set[tuple] = set()
        emap = graph.element_map
        self.ab_bonds = {
            b.id for b in graph.bonds if emap[b.tail].kind.is_activated or emap[b.head].kind.is_activated
        }
        self.order = sorted(graph.elements, key=lambda e: e.id)

    # -- state helpers
    def snapshot(self):
        return dict(self.strokes), len(self.steps), dict(self.bond_step), len(self.diags), set(self.flagged)

    def restore(self, snap) -> None:
        strokes, nsteps, bond_step, ndiags, flagged = snap
        self.strokes = strokes
        del self.steps[nsteps:]
        self.bond_step = bond_step
        del self.diags[ndiags:]
        self.flagged = flagged

    def known(self, bond: Bond) -> bool:
        return self.strokes[bond.id] is not Stroke.UNASSIGNED

    def eff_in(self, bond: Bond, eid: str) -> bool:
        return effort_in(bond, eid, self.strokes[bond.id])

    def conflict(self, key, location: str, message: str) -> None:
        if key not in self.flagged:
            self.flagged.add(key)
            self.diags.append(CausalityDiagnostic("Conflict", location, message))

    def set(self, bond: Bond, eid: str, receives_effort: bool, rule: str, detail: str, causes=()) -> bool:
        """Fix the stroke so ``eid`` receives effort (or flow).  Returns True on change."""
        end = Stroke.TAIL if bond.tail == eid else Stroke.HEAD
        stroke = end if receives_effort else end.flip()
        current = self.strokes[bond.id]
        if current is stroke:
            return False
        if current is not Stroke.UNASSIGNED:
            prev = self.steps[self.bond_step[bond.id]]
            self.conflict(
                ("bond", bond.id),
                bond.id,
                f"{rule} at {eid} ({detail}) requires stroke at {stroke.value}, "
                f"but {prev.rule} at {prev.element} already fixed it at {current.value}",
            )
            return False
        step = Step(len(self.steps), bond.id, stroke, rule, eid, detail, tuple(sorted(set(causes))))
        self.steps.append(step)
        self.bond_step[bond.id] = step.index
        self.strokes[bond.id] = stroke
        return True

    def cause_of(self, bonds) -> list[int]:
        return [self.bond_step[b.id] for b in bonds if b.id in self.bond_step]

    # -- phase 1: hard constraints
    def hard_constraints(self) -> None:
        for b in self.g.bonds:
            if b.stroke is not Stroke.UNASSIGNED and b.id not in self.ab_bonds:
                eid = b.head if b.stroke is Stroke.HEAD else b.tail
                self.set(b, eid, True, "user stroke", "declared stroke")
        for e in self.order:
            ports = self.g.ports(e.id)
            if e.kind is ElementKind.SOURCE_EFFORT and ports:
                self.set(ports[0].bond, e.id, False, "source", "source imposes effort")
            elif e.kind is ElementKind.SOURCE_FLOW and ports:
                self.set(ports[0].bond, e.id, True, "source", "source imposes flow")
            if e.causality is not None:
                for p, val in zip(ports, _override_pattern(e, len(ports))):
                    self.set(p.bond, e.id, val, "override", f"causality = {e.causality}")

    # -- phase 2: propagation
    def propagate(self) -> None:
        changed = True
        while changed:
            changed = False
            for e in self.order:
                if e.kind.is_junction:
                    changed |= self.junction_rule(e)
                elif e.kind in (ElementKind.TRANSFORMER, ElementKind.GYRATOR):
                    changed |= self.two_port_rule(e)

    def junction_rule(self, e: Element) -> bool:
        ports = self.g.junction_ports(e.id)
        # special port: the single flow-in port of a 1-junction, effort-in port of a 0-junction
        special_in = e.kind is ElementKind.JUNCTION_0
        name = "1-junction" if e.kind is ElementKind.JUNCTION_1 else "0-junction"
        what = "effort" if special_in else "flow"
        known = [p for p in ports if self.known(p.bond)]
        free = [p for p in ports if not self.known(p.bond)]
        special = [p for p in known if self.eff_in(p.bond, e.id) == special_in]
        if len(special) > 1:
            ids = ", ".join(p.bond.id for p in special)
            self.conflict(("junction", e.id), e.id, f"{name} receives {what} on more than one bond ({ids})")
            return False
        changed = False
        if len(special) == 1:
            causes = self.cause_of([special[0].bond])
            for p in free:
                changed |= self.set(
                    p.bond, e.id, not special_in, "junction", f"{name} {what} fixed by {special[0].bond.id}", causes
                )
        elif len(free) == 1:
            causes = self.cause_of([p.bond for p in known])
            changed |= self.set(free[0].bond, e.id, special_in, "junction", f"{name} needs one {what} input", causes)
        elif not free and ports:
            self.conflict(("junction", e.id), e.id, f"{name} receives {what} on no bond")
        return changed

    def two_port_rule(self, e: Element) -> bool:
        ports = self.g.ports(e.id)
        if len(ports) != 2:
            return False
        same = e.kind is ElementKind.GYRATOR
        a, b = ports
        for src, dst in ((a, b), (b, a)):
            if self.known(src.bond) and not self.known(dst.bond):
                v = self.eff_in(src.bond, e.id)
                detail = "gyrator mirrors causality" if same else "transformer passes causality through"
                return self.set(dst.bond, e.id, v if same else not v, "two-port", detail, self.cause_of([src.bond]))
        if self.known(a.bond) and self.known(b.bond):
            if (self.eff_in(a.bond, e.id) == self.eff_in(b.bond, e.id)) != same:
                self.conflict(("two-port", e.id), e.id, f"{e.kind.keyword} ports have inconsistent causality")
        return False

    # -- phase 3: storages
    def storages(self) -> None:
        while True:
            pending = [
                e
                for e in self.order
                if e.kind.is_storage and any(not self.known(p.bond) for p in self.g.ports(e.id))
            ]
            if not pending:
                return
            e = pending[0]
            snap = self.snapshot()
            ndiag = len(self.diags)
            self.apply_storage(e, _PREFERRED[e.kind], "integral preference")
            self.propagate()
            if len(self.diags) > ndiag:
                self.restore(snap)
                self.apply_storage(e, not _PREFERRED[e.kind], "integral impossible")
                self.propagate()

    def apply_storage(self, e: Element, receives_effort: bool, rule: str) -> None:
        for p in self.g.ports(e.id):
            if self.known(p.bond):
                continue
            nb = p.bond.other(e.id)
            context = [q.bond for q in self.g.ports(nb) if self.known(q.bond) and q.bond.id not in self.ab_bonds]
            detail = "storage receives " + ("effort" if receives_effort else "flow")
            self.set(p.bond, e.id, receives_effort, rule, detail, self.cause_of(context))

    # -- phase 4: arbitrary completion
    def complete(self) -> None:
        while True:
            free = sorted(b.id for b in self.g.bonds if b.id not in self.ab_bonds and not self.known(b))
            if not free:
                return
            b = self.g.bond(free[0])
            context = [
                q.bond
                for eid in (b.tail, b.head)
                for q in self.g.ports(eid)
                if self.known(q.bond) and q.bond.id not in self.ab_bonds
            ]
            snap = self.snapshot()
            ndiag = len(self.diags)
            self.set(b, b.head, True, "arbitrary completion", "free bond, stroke at head", self.cause_of(context))
            self.propagate()
            choice = "head"
            if len(self.diags) > ndiag:
                self.restore(snap)
                self.set(b, b.tail, True, "arbitrary completion", "free bond, stroke at tail", self.cause_of(context))
                self.propagate()
                choice = "tail"
            self.diags.append(
                CausalityDiagnostic(
                    "UnderDetermined", b.id, f"no constraint fixes {b.id}; stroke placed at {choice} arbitrarily"
                )
            )

    # -- phase 5: activated bonds
    def activated(self) -> None:
        emap = self.g.element_map
        for bid in sorted(self.ab_bonds):
            b = self.g.bond(bid)
            ab = b.tail if emap[b.tail].kind.is_activated else b.head
            reads_effort = emap[ab].kind is ElementKind.ACTIVATED_EFFORT
            detail = "effort measurement, f = 0" if reads_effort else "flow measurement, e = 0"
            self.set(b, ab, reads_effort, "activated bond", detail)

    def classify(self) -> dict[str, StorageClass]:
        out = {}
        for e in self.g.elements:
            if e.kind.is_storage:
                ok = all(self.eff_in(p.bond, e.id) == _PREFERRED[e.kind] for p in self.g.ports(e.id) if self.known(p.bond))
                out[e.id] = StorageClass.INTEGRAL if ok else StorageClass.DIFFERENTIAL
        return out


def _override_pattern(e: Element, nports: int) -> list[bool]:
    """Per-port receives-effort flags implied by a ``causality`` attribute."""
    c = e.causality
    k = e.kind
    if k is ElementKind.RESISTOR:
        return [c == "effort"] * nports
    if k.is_storage:
        pref = _PREFERRED[k]
        return [pref if c == "integral" else not pref] * nports
    if k is ElementKind.TRANSFORMER:
        # left: e1 = K e2, f2 = K f1 -> port 1 receives flow, port 2 effort
        return [False, True] if c == "left" else [True, False]
    if k is ElementKind.GYRATOR:
        return [False, False] if c == "outer" else [True, True]
    return []


def _coupled_storages(graph: BondGraph, start: str, family: set[ElementKind]) -> list[str]:
    """Storages of the same family reachable through junctions and 2-ports."""
    emap = graph.element_map
    seen, found = {start}, []
    stack = [p.bond.other(start) for p in graph.ports(start)]
    while stack:
        eid = stack.pop()
        if eid in seen:
            continue
        seen.add(eid)
        k = emap[eid].kind
        if k in family:
            found.append(eid)
        elif k.is_junction or k in (ElementKind.TRANSFORMER, ElementKind.GYRATOR):
            stack.extend(p.bond.other(eid) for p in graph.ports(eid))
    return sorted(found)


def assign(graph: BondGraph) -> CausalAssignment:
    """Assign a causal stroke to every bond of a structurally valid graph."""
    s = _Solver(graph)
    s.hard_constraints()
    s.propagate()
    s.storages()
    s.complete()
    s.activated()
    classes = s.classify()
    diags = list(s.diags)
    partial = CausalAssignment(dict(s.strokes), classes, (), tuple(s.steps), dict(s.bond_step))
    for eid, cls in classes.items():
        if cls is not StorageClass.DIFFERENTIAL:
            continue
        el = graph.element(eid)
        family = (
            {ElementKind.STORAGE_I, ElementKind.STORAGE_I_FIELD}
            if _PREFERRED[el.kind]
            else {ElementKind.STORAGE_C, ElementKind.STORAGE_C_FIELD}
        )
        partners = [p for p in _coupled_storages(graph, eid, family) if classes.get(p) is StorageClass.INTEGRAL]
        chain = []
        for p in graph.ports(eid):
            chain += [f"{st.rule} at {st.element}" for st in explain(partial, p.bond.id)]
        what = "inertias/masses" if _PREFERRED[el.kind] else "compliances"
        merge = (
            f"merge it with {', '.join(partners)}: combine the {what} into one fictive parameter"
            if partners
            else f"combine the coupled {what} into one fictive parameter (parameter merging)"
        )
        diags.append(
            CausalityDiagnostic(
                "DerivativeCausality",
                eid,
                f"{el.kind.keyword} storage {eid} is forced into derivative causality by "
                f"{' -> '.join(dict.fromkeys(chain))}; {merge}",
            )
        )
    return CausalAssignment(dict(s.strokes), classes, tuple(diags), tuple(s.steps), dict(s.bond_step))


def explain(assignment: CausalAssignment, bond: str) -> list[Step]:
    """Ordered constraint applications that led to ``bond``'s stroke."""
    if bond not in assignment.strokes:
        raise KeyError(f"unknown bond {bond!r}")
    if bond not in assignment.bond_step:
        return []
    seen: set[int] = set()
    stack = [assignment.bond_step[bond]]
    while stack:
        i = stack.pop()
        if i in seen:
            continue
        seen.add(i)
        stack.extend(assignment.steps[i].causes)
    return [assignment.steps[i] for i in sorted(seen)]
