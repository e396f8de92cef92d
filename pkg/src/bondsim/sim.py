"""Fixed-step RK4 simulation, trajectory recording and energy bookkeeping."""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Callable, Mapping, Sequence, TextIO, Union

import numpy as np

from . import _backend
from ._opcodes import ERR_NONFINITE
from .compiler import OdeSystem
from .core import ElementKind

__all__ = ["SimConfig", "Trajectory", "EnergyBalance", "simulate", "energy_report", "step_count", "format_number"]

Binding = Union[float, Sequence[float], str, Callable[[float], object]]


def format_number(v: float) -> str:
    return "%.17g" % v


def step_count(t_end: float, dt: float) -> int:
    """Number of RK4 steps; the last one is shortened to land on ``t_end``."""
    if t_end <= 0.0:
        return 0
    return max(1, math.ceil(t_end / dt - 1e-9))


@dataclass(frozen=True)
class SimConfig:
    """Integration settings.

    ``inputs`` binds external sources to a constant, an expression in
    ``t`` (string) or a Python callable of ``t``.  Unbound sources keep
    their declared constant.
    """

    t_end: float
    dt: float
    record_every: int = 1
    inputs: Mapping[str, Binding] = field(default_factory=dict)

    def __post_init__(self):
        if not (self.dt > 0 and math.isfinite(self.dt)):
            raise ValueError(f"dt must be positive, got {self.dt!r}")
        if not (self.t_end >= 0 and math.isfinite(self.t_end)):
            raise ValueError(f"t_end must be >= 0, got {self.t_end!r}")
        if int(self.record_every) != self.record_every or self.record_every < 1:
            raise ValueError(f"record_every must be a positive integer, got {self.record_every!r}")

    @property
    def nsteps(self) -> int:
        return step_count(self.t_end, self.dt)


@dataclass(frozen=True)
class EnergyBalance:
    E_supplied: float
    E_stored_delta: float
    E_dissipated: float

    @property
    def residual(self) -> float:
        return self.E_supplied - self.E_stored_delta - self.E_dissipated

    @property
    def relative_residual(self) -> float:
        return abs(self.residual) / max(abs(self.E_supplied), 1e-12)

    def summary(self) -> str:
        return (
            f"E_supplied {format_number(self.E_supplied)}\n"
            f"E_stored_delta {format_number(self.E_stored_delta)}\n"
            f"E_dissipated {format_number(self.E_dissipated)}\n"
            f"residual {format_number(self.residual)}\n"
        )


def _cumtrapz(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    out = np.zeros_like(y, dtype=float)
    if len(t) > 1:
        out[1:] = np.cumsum(0.5 * (y[1:] + y[:-1]) * np.diff(t))
    return out


class Trajectory:
    """Recorded simulation output.

    Series are indexed by recording row.  ``efforts`` / ``flows`` map bond
    ids to ``(rows, dim)`` arrays; ``powers`` maps element ids to power
    absorbed by the element.
    """

    def __init__(self, system: OdeSystem, rows: np.ndarray):
        self.system = system
        g = system.graph
        self.t = rows[:, system.t_slot].copy()
        self.x = rows[:, system.x_slot : system.x_slot + system.nx].copy()
        self.efforts = {b.id: rows[:, system.effort_slot[b.id] : system.effort_slot[b.id] + b.dim].copy() for b in g.bonds}
        self.flows = {b.id: rows[:, system.flow_slot[b.id] : system.flow_slot[b.id] + b.dim].copy() for b in g.bonds}
        q0 = system.x_slot + system.nx
        self.accumulated = {
            (what if eid is None else eid): rows[:, q0 + i].copy() for i, (what, eid) in enumerate(system.quadratures)
        }
        self.signals = {name: rows[:, slot].copy() for name, slot in system.signal_slot.items()}
        self.bond_powers = {b.id: np.einsum("ij,ij->i", self.efforts[b.id], self.flows[b.id]) for b in g.bonds}
        self.powers = {}
        for e in g.elements:
            p = np.zeros(len(self.t))
            for port in g.ports(e.id):
                p = p + port.sign * self.bond_powers[port.bond.id]
            self.powers[e.id] = p

    def __len__(self) -> int:
        return len(self.t)

    def state(self, element_id: str) -> np.ndarray:
        s = next(s for s in self.system.states if s.element == element_id)
        return self.x[:, s.offset : s.offset + s.dim]

    # ------------------------------------------------------------- energies
    # Supplied and dissipated energy (and the stored energy of modulated
    # storages) are integrated alongside the state by the same RK4 step.
    @property
    def supplied(self) -> np.ndarray:
        """Cumulative energy delivered by all sources."""
        return self.accumulated["supplied"]

    @property
    def dissipated(self) -> np.ndarray:
        """Cumulative energy absorbed by R and RF elements."""
        return self.accumulated["dissipated"]

    def supplied_trapezoid(self) -> np.ndarray:
        """Trapezoidal estimate of ``supplied`` from the recorded powers."""
        g = self.system.graph
        p = sum((-self.powers[e.id] for e in g.elements if e.kind.is_source), np.zeros(len(self.t)))
        return _cumtrapz(self.t, p)

    @cached_property
    def stored_by_element(self) -> dict[str, np.ndarray]:
        """Stored energy of every storage, relative to its value at t=0."""
        out = {}
        for s in self.system.states:
            el = self.system.graph.element(s.element)
            if el.parameter.modulated:
                out[el.id] = self.accumulated[el.id]
                continue
            k = el.parameter.array()
            z = self.state(el.id)
            if el.kind in (ElementKind.STORAGE_C_FIELD, ElementKind.STORAGE_I_FIELD):
                w = k
            elif k.ndim == 0:
                w = np.eye(s.dim) / float(k)
            else:
                w = np.linalg.inv(k)
            e = 0.5 * np.einsum("ri,ij,rj->r", z, w, z)
            out[el.id] = e - e[0]
        return out

    @cached_property
    def stored(self) -> np.ndarray:
        return sum(self.stored_by_element.values(), np.zeros(len(self.t)))

    # ------------------------------------------------------------------ CSV
    def columns(self) -> tuple[list[str], np.ndarray]:
        g = self.system.graph
        names = ["t"]
        cols = [self.t]
        for b in g.bonds:
            for q, data in (("e", self.efforts[b.id]), ("f", self.flows[b.id])):
                if b.dim == 1:
                    names.append(f"{q}.{b.id}")
                    cols.append(data[:, 0])
                else:
                    for k in range(b.dim):
                        names.append(f"{q}.{b.id}.{k + 1}")
                        cols.append(data[:, k])
        seen = set()
        for p in g.probes:
            if p.quantity == "power" and p.target in self.powers and p.target not in seen:
                seen.add(p.target)
                names.append(f"P.{p.target}")
                cols.append(self.powers[p.target])
        return names, np.column_stack(cols) if cols else np.zeros((len(self.t), 0))

    def to_csv(self, dest: Union[str, Path, TextIO, None] = None) -> str:
        names, data = self.columns()
        buf = io.StringIO()
        buf.write(",".join(names) + "\n")
        for row in data:
            buf.write(",".join(format_number(v) for v in row) + "\n")
        text = buf.getvalue()
        if isinstance(dest, (str, Path)):
            Path(dest).write_text(text)
        elif dest is not None:
            dest.write(text)
        return text


def _check_bindings(system: OdeSystem, inputs: Mapping[str, Binding]) -> None:
    known = {u.element for u in system.inputs}
    for sid in inputs:
        if sid not in known:
            raise KeyError(f"{sid!r} is not an external source of this model")


def simulate(system: OdeSystem, config: SimConfig, x0: Sequence[float] | None = None) -> Trajectory:
    """Integrate from t=0 with RK4 and record every ``record_every`` steps."""
    _check_bindings(system, config.inputs)
    kernel = _backend.kernel
    callables = {k: v for k, v in config.inputs.items() if callable(v)}
    program = system.build_program({k: v for k, v in config.inputs.items() if k not in callables})
    slots = program.fresh_slots()
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float)
        if x0.shape != (system.nx,):
            raise ValueError(f"initial state must have shape ({system.nx},)")
        slots[system.x_slot : system.x_slot + system.nx] = x0
    nsteps = config.nsteps
    r = int(config.record_every)
    rows = np.zeros((-(-nsteps // r) + 1, len(slots)))
    if callables:
        st, tag, step = _integrate_python(system, program, slots, callables, config.dt, config.t_end, nsteps, r, rows)
    else:
        st, tag, step = kernel.integrate(
            program.code, program.consts, slots, system.t_slot, system.x_slot, system.dx_slot,
            system.nx + system.nq, config.dt, config.t_end, nsteps, r, rows,
        )
    if st:
        raise system.kernel_error(program, st, tag, min(step * config.dt, config.t_end))
    return Trajectory(system, rows)


def _integrate_python(system, program, slots, callables, dt, t_end, nsteps, r, rows):
    """RK4 with inputs supplied by Python callables between kernel calls."""
    kernel = _backend.kernel
    code, consts = program.code, program.consts
    nx, xs, dxs = system.nx + system.nq, system.x_slot, system.dx_slot
    where = {u.element: (system.u_slot + u.offset, u.dim) for u in system.inputs}

    def f(t, x):
        slots[system.t_slot] = t
        slots[xs : xs + nx] = x
        for sid, fn in callables.items():
            at, dim = where[sid]
            slots[at : at + dim] = np.broadcast_to(np.asarray(fn(t), dtype=float), (dim,))
        st, tag = kernel.run(code, consts, slots)
        return st, tag, slots[dxs : dxs + nx].copy()

    x = slots[xs : xs + nx].copy()
    comp = np.zeros(nx)
    rec = 0
    for step in range(nsteps):
        t = step * dt
        h = min((step + 1) * dt, t_end) - t
        st, tag, k1 = f(t, x)
        if st:
            return st, tag, step
        if step % r == 0:
            rows[rec] = slots
            rec += 1
        ks = [k1]
        for c, kk in ((0.5, 0), (0.5, 1), (1.0, 2)):
            st, tag, k = f(t + c * h, x + c * h * ks[kk])
            if st:
                return st, tag, step
            ks.append(k)
        y = h / 6.0 * (ks[0] + 2.0 * ks[1] + 2.0 * ks[2] + ks[3]) - comp
        v = x + y
        if not np.all(np.isfinite(v)):
            return ERR_NONFINITE, int(np.argmin(np.isfinite(v))), step + 1
        comp = (v - x) - y
        x = v
    st, tag, _ = f(t_end if nsteps else 0.0, x)
    if st:
        return st, tag, nsteps
    rows[rec] = slots
    return 0, 0, nsteps


def energy_report(trajectory: Trajectory) -> EnergyBalance:
    """Totals over the whole trajectory (trapezoidal power integrals)."""
    if len(trajectory) == 0:
        raise ValueError("empty trajectory")
    return EnergyBalance(
        float(trajectory.supplied[-1]),
        float(trajectory.stored[-1]),
        float(trajectory.dissipated[-1]),
    )
