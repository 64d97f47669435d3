"""Grid approximations of path-dependent PDEs: slab equations, Monte Carlo and diagnostics."""

from .timegrid import (
    PC,
    PL,
    AtomicMeasure,
    GridSequence,
    Path,
    TimeGrid,
    concat,
    dist_skorokhod,
    dist_uniform,
    eta,
    eta_plus,
    project,
)
from .generators import FrozenKey, GeneratorSpec, TerminalSpec, freeze, terminal_on_key, validate_assumptions
from .slab_pde import SolverConfig, solve_slab, solve_vn_exact, solve_vn_lift

__version__ = "0.1.0"

__all__ = [
    "PC",
    "PL",
    "AtomicMeasure",
    "GridSequence",
    "Path",
    "TimeGrid",
    "concat",
    "dist_skorokhod",
    "dist_uniform",
    "eta",
    "eta_plus",
    "project",
    "FrozenKey",
    "GeneratorSpec",
    "TerminalSpec",
    "freeze",
    "terminal_on_key",
    "validate_assumptions",
    "SolverConfig",
    "solve_slab",
    "solve_vn_exact",
    "solve_vn_lift",
]
