"""FFT-preconditioned homogenization of periodic multiphase elastic cells
with an interface-enriched voxel finite element discretization."""

from .mesh import Grid, build_topology
from .microstructure import PhaseAssembly, Plane, Region, Sphere, SphereUnion
from .solver import DofVector, SolverConfig, System, build_system, run_scheme
from .voigt import MaterialIso, iso_stiffness, stiffness_bounds

__all__ = [
    "Grid",
    "build_topology",
    "PhaseAssembly",
    "Plane",
    "Region",
    "Sphere",
    "SphereUnion",
    "DofVector",
    "SolverConfig",
    "System",
    "build_system",
    "run_scheme",
    "MaterialIso",
    "iso_stiffness",
    "stiffness_bounds",
]
