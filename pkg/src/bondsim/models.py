"""Parametric builders for three reference systems.

* ``lift_a_load``: torque-controlled motor, elastic shaft, gear, drum,
  elastic rope and a hanging load.
* ``solenoid``: coil, magnetic field with gap-dependent inductance
  ``L(x) = n^2 mu0 A / (x + l_m/mu_r)`` and a moving armature.
* ``filter_chopper``: LC input filter feeding a mean-value chopper.

Default parameter values are plausible SI magnitudes chosen for this
package; they are not measured data.  Each builder has a textual twin
in ``corpus/``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields
from importlib import resources

from .core import BondGraph, GraphBuilder

__all__ = [
    "LiftParams",
    "SolenoidParams",
    "FilterChopperParams",
    "lift_a_load",
    "solenoid",
    "filter_chopper",
    "CORPUS",
    "corpus_text",
    "build",
]


def _require_positive(obj, allow_zero=()) -> None:
    for f in fields(obj):
        v = getattr(obj, f.name)
        if not isinstance(v, (int, float)):
            continue
        ok = v >= 0 if f.name in allow_zero else v > 0
        if not (ok and math.isfinite(v)):
            rule = ">= 0" if f.name in allow_zero else "> 0"
            raise ValueError(f"{type(obj).__name__}.{f.name} must be {rule}, got {v!r}")


@dataclass(frozen=True)
class LiftParams:
    J_M: float = 0.02  # motor inertia, kg m^2
    J_D: float = 0.5  # drum inertia, kg m^2
    K_FM: float = 0.05  # motor bearing friction, N m s
    K_FG: float = 1.0  # gear/drum friction, N m s
    K_DS: float = 0.5  # shaft damping, N m s
    K_SS: float = 20.0  # shaft stiffness, N m/rad
    K_DR: float = 40.0  # rope damping referred to the drum, N m s
    K_SR: float = 5000.0  # rope stiffness referred to the drum, N m/rad
    i_G: float = 10.0  # gear ratio (motor speed / drum speed)
    r_DR: float = 0.1  # drum radius, m
    m_L: float = 20.0  # load mass, kg
    F_g: float = 196.2  # gravity force on the load, N
    T_M: float = 2.4  # motor torque, N m

    def __post_init__(self):
        _require_positive(self, allow_zero=("F_g", "T_M"))

    @property
    def holding_torque(self) -> float:
        """Motor torque that balances gravity at rest."""
        return self.F_g * self.r_DR / self.i_G

    @property
    def merged_inertia(self) -> float:
        """All inertias reflected to the motor shaft (rigid coupling)."""
        return self.J_M + self.J_D / self.i_G**2 + self.m_L * (self.r_DR / self.i_G) ** 2


@dataclass(frozen=True)
class SolenoidParams:
    n: float = 200.0  # coil turns
    R: float = 4.0  # coil resistance, ohm
    m: float = 0.05  # armature mass, kg
    K_fric: float = 50.0  # viscous friction, N s/m
    A: float = 1e-4  # limb cross section, m^2
    l_m: float = 0.1  # iron path length, m
    mu0: float = 4e-7 * math.pi
    mu_r: float = 1000.0
    x_0: float = 2e-3  # initial air gap, m
    F_g: float = 0.4905  # gravity on the armature (opens the gap), N
    u: float = 2.0  # applied voltage, V

    def __post_init__(self):
        _require_positive(self, allow_zero=("F_g", "u"))

    def inductance(self, x: float) -> float:
        return self.n**2 * self.mu0 * self.A / (x + self.l_m / self.mu_r)


@dataclass(frozen=True)
class FilterChopperParams:
    C_F: float = 1e-3  # F
    L_F: float = 10e-3  # H
    R_f: float = 0.1  # ohm
    m_ch: str = "0.5"  # duty ratio expression
    i_out: str = "2"  # load current expression, A
    u_in: float = 24.0  # supply voltage, V

    def __post_init__(self):
        if isinstance(self.m_ch, (int, float)) and not 0.0 <= self.m_ch <= 1.0:
            raise ValueError(f"FilterChopperParams.m_ch must lie in [0, 1], got {self.m_ch!r}")
        for name in ("m_ch", "i_out"):
            v = getattr(self, name)
            if isinstance(v, (int, float)):
                if not math.isfinite(v):
                    raise ValueError(f"FilterChopperParams.{name} must be finite, got {v!r}")
                object.__setattr__(self, name, repr(float(v)))
        _require_positive(self, allow_zero=("u_in",))


def _params(b: GraphBuilder, p) -> None:
    for name, v in asdict(p).items():
        if isinstance(v, (int, float)):
            b.param(name, v)


def lift_a_load(p: LiftParams | None = None, *, rigid: bool = False) -> BondGraph:
    """Hoist with elastic shaft and rope.

    Each elastic coupling is a 0-junction whose branch 1-junction carries
    the spring (compliance ``1/K_S``) and damper ``K_D`` in parallel.  With
    ``rigid=True`` the couplings are dropped and ``J_M`` is taken as the
    already merged inertia (see ``LiftParams.merged_inertia``); ``J_D``
    and ``m_L`` are then unused.
    """
    p = p or LiftParams()
    b = GraphBuilder("lift_a_load_rigid" if rigid else "lift_a_load")
    _params(b, p)
    b.element("SE", "motor", p.T_M, label="motor torque")
    b.element("1", "j_M")
    b.element("I", "J_M", p.J_M)
    b.element("R", "K_FM", p.K_FM)
    if not rigid:
        b.element("0", "shaft")
        b.element("1", "j_S")
        b.element("C", "K_SS", 1.0 / p.K_SS)
        b.element("R", "K_DS", p.K_DS)
    b.element("TF", "gear", 1.0 / p.i_G)
    b.element("1", "j_D")
    if not rigid:
        b.element("I", "J_D", p.J_D)
    b.element("R", "K_FG", p.K_FG)
    if not rigid:
        b.element("0", "rope")
        b.element("1", "j_R")
        b.element("C", "K_SR", 1.0 / p.K_SR)
        b.element("R", "K_DR", p.K_DR)
    b.element("TF", "drum", p.r_DR)
    b.element("1", "j_L")
    if not rigid:
        b.element("I", "m_L", p.m_L)
    b.element("SE", "gravity", p.F_g, label="gravity sink")

    b.bond("b1", "motor", "j_M")
    b.bond("b2", "j_M", "J_M")
    b.bond("b3", "j_M", "K_FM")
    if rigid:
        b.bond("b4", "j_M", "gear.1")
    else:
        b.bond("b4", "j_M", "shaft")
        b.bond("b5", "shaft", "j_S")
        b.bond("b6", "j_S", "K_SS")
        b.bond("b7", "j_S", "K_DS")
        b.bond("b8", "shaft", "gear.1")
    b.bond("b9", "gear.2", "j_D")
    if not rigid:
        b.bond("b10", "j_D", "J_D")
    b.bond("b11", "j_D", "K_FG")
    if rigid:
        b.bond("b12", "j_D", "drum.1")
    else:
        b.bond("b12", "j_D", "rope")
        b.bond("b13", "rope", "j_R")
        b.bond("b14", "j_R", "K_SR")
        b.bond("b15", "j_R", "K_DR")
        b.bond("b16", "rope", "drum.1")
    b.bond("b17", "drum.2", "j_L")
    if not rigid:
        b.bond("b18", "j_L", "m_L")
    b.bond("b19", "j_L", "gravity")
    b.probe("b17", "flow")
    b.probe("motor", "power")
    return b.build()


_SOLENOID_FIELD = (
    "[[(x + l_m / mu_r) / (mu0 * A), 0], [n * i / (2 * (x + l_m / mu_r)), 0]]"
)


def solenoid(p: SolenoidParams | None = None) -> BondGraph:
    """Coil, gyrator to the magnetic domain and a two-port C field.

    The field states are flux linkage per turn ``Phi`` and air gap ``x``;
    its modulated matrix maps them to (MMF, force).  The force row gives
    ``F = Phi^2 / (2 mu0 A) = i^2/2 * |dL/dx|``, directed to close the gap.
    """
    p = p or SolenoidParams()
    b = GraphBuilder("solenoid")
    _params(b, p)
    b.signal("Phi", "displacement(field, 1)")
    b.signal("x", "displacement(field, 2)")
    b.signal("i", "Phi * (x + l_m / mu_r) / (n * mu0 * A)")
    b.element("SE", "supply", p.u)
    b.element("1", "j_E")
    b.element("R", "R", p.R)
    b.element("GY", "coil", p.n)
    b.element("0", "j_F")
    b.element("CF", "field", _SOLENOID_FIELD, initial=(0.0, p.x_0))
    b.element("1", "j_A")
    b.element("I", "armature", p.m)
    b.element("R", "K_fric", p.K_fric)
    b.element("SE", "gravity", p.F_g)
    b.bond("b1", "supply", "j_E")
    b.bond("b2", "j_E", "R")
    b.bond("b3", "j_E", "coil.1")
    b.bond("b4", "coil.2", "j_F")
    b.bond("b5", "j_F", "field.1")
    b.bond("b6", "j_A", "field.2")
    b.bond("b7", "j_A", "armature")
    b.bond("b8", "j_A", "K_fric")
    b.bond("b9", "gravity", "j_A")
    b.probe("b2", "flow")
    b.probe("supply", "power")
    return b.build()


def filter_chopper(p: FilterChopperParams | None = None) -> BondGraph:
    """Series R-L from the supply, capacitor node, mean-value chopper, load.

    The chopper is a modulated transformer with port 1 on the load side,
    so ``u_out = m_ch * u_C`` and ``i_ch = m_ch * i_out``.
    """
    p = p or FilterChopperParams()
    b = GraphBuilder("filter_chopper")
    _params(b, p)
    b.element("SE", "u_in", p.u_in)
    b.element("1", "mesh")
    b.element("R", "R_f", p.R_f)
    b.element("I", "L_F", p.L_F)
    b.element("0", "node")
    b.element("C", "C_F", p.C_F)
    b.element("TF", "chopper", p.m_ch)
    b.element("1", "out")
    b.element("SF", "load", p.i_out)
    b.bond("b1", "u_in", "mesh")
    b.bond("b2", "mesh", "R_f")
    b.bond("b3", "mesh", "L_F")
    b.bond("b4", "mesh", "node")
    b.bond("b5", "node", "C_F")
    b.bond("b6", "node", "chopper.2")
    b.bond("b7", "chopper.1", "out")
    b.bond("b8", "out", "load")
    b.probe("b5", "effort")
    b.probe("C_F", "displacement")
    b.probe("u_in", "power")
    return b.build()


CORPUS = {
    "lift_a_load": lift_a_load,
    "solenoid": solenoid,
    "filter_chopper": filter_chopper,
}


def corpus_text(name: str) -> str:
    """Text of a shipped ``.bg`` corpus file."""
    if name not in CORPUS:
        raise KeyError(f"unknown model {name!r}; have {sorted(CORPUS)}")
    return resources.files("bondsim").joinpath("corpus", f"{name}.bg").read_text()


def build(name: str) -> BondGraph:
    """Default-parameter graph of a corpus model."""
    if name not in CORPUS:
        raise KeyError(f"unknown model {name!r}; have {sorted(CORPUS)}")
    return CORPUS[name]()
