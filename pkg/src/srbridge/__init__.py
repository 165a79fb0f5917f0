"""Schrodinger bridges and entropic transport on the Heisenberg group."""

from ._backend import BACKEND, set_threads
from .bridge import BridgeSolution, load_bridge, reconstruct, static_kl, transport_cost
from .discretization import (Grid3D, ScalarField, TableSet, apply_P, apply_Q, default_grid,
                             gaussian_density, ring_density)
from .distance import DistanceQuery, discrete_ot_oracle, sr_distance_sq
from .errors import (ConfigError, ConvergenceError, MissingArtifactError, QuadratureError,
                     SRBridgeError)
from .geometry import GroupPoint, HorizontalFrame, group_inv, group_mul, make_frame
from .heat_kernel import KernelTable, QuadratureSpec, kernel, kernel_origin, tabulate
from .schrodinger import Potentials, SinkhornConfig, solve_schrodinger, solve_single
from .sde import SimConfig, TrajectoryEnsemble, pathwise_cost, simulate, terminal_marginal_error

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "BridgeSolution", "ConfigError", "ConvergenceError", "DistanceQuery", "Grid3D",
    "GroupPoint", "HorizontalFrame", "KernelTable", "MissingArtifactError", "Potentials",
    "QuadratureError", "QuadratureSpec", "SRBridgeError", "ScalarField", "SimConfig",
    "SinkhornConfig", "TableSet", "TrajectoryEnsemble", "apply_P", "apply_Q", "default_grid",
    "discrete_ot_oracle", "gaussian_density", "group_inv", "group_mul", "kernel",
    "kernel_origin", "load_bridge", "make_frame", "pathwise_cost", "reconstruct",
    "ring_density", "set_threads", "simulate", "solve_schrodinger", "solve_single",
    "sr_distance_sq", "static_kl", "tabulate", "terminal_marginal_error", "transport_cost",
    "__version__",
]
