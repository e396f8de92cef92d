"""Bond-graph modelling: build, assign causality, compile, simulate, linearize."""

from .causality import CausalAssignment, CausalityDiagnostic, assign, explain
from .compiler import (
    AlgebraicLoopError,
    BondGraphError,
    CausalityConflictError,
    DifferentialCausalityError,
    ModulationError,
    OdeSystem,
    SingularParameterError,
    StructureError,
    compile_graph,
    derive,
    evaluate,
)
from .core import (
    Bond,
    BondGraph,
    Element,
    ElementKind,
    GraphBuilder,
    Probe,
    Stroke,
    isomorphic,
    validate,
)
from .dsl import ParseError, emit, emit_dot, load, parse
from .lti import StateSpace, TransferFunction, extract, transfer_function
from . import sim as _sim_module
from .sim import EnergyBalance, SimConfig, Trajectory, energy_report, simulate

__version__ = "0.1.0"

__all__ = [
    name for name, value in dict(globals()).items()
    if not name.startswith("_") and not isinstance(value, type(_sim_module))
]
