"""Optimized bang-bang and CRAB protocols for fast ground-state preparation."""
from bangopt.evolution import cost_fidelity, evolve_converged, evolve_piecewise, evolve_sampled, trajectory
from bangopt.models import ControlProblem, critical_gap, lmg_problem, lz_problem
from bangopt.optimizers import OptimizationResult, optimize_protocol
from bangopt.protocols import (
    BangBang,
    Constant,
    Crab,
    DoubleBang,
    FreeEndpointCrab,
    LinearRamp,
    ProtocolFamily,
    SaturatedDoubleBang,
    make_crab,
)

__version__ = "0.1.0"
