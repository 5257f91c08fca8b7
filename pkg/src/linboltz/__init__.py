"""Linear Boltzmann equations in phase space: characteristics, control
geometry, collision kernels and a semi-Lagrangian solver.

Modules
-------
geometry
    Domains, potentials and the discrete phase grid.
flow
    Hamiltonian characteristics with specular reflection.
kernels
    Collision kernels, their assumptions and the dissipation functional.
control
    Collision set, geometric control, Lebeau constants and equivalence classes.
solver
    Time evolution, decay fits, hitting-time statistics and output formats.
config, cli
    YAML experiment files and the ``linboltz`` command.
"""

__version__ = "0.1.0"

from .control import (ClassStructure, GCCReport, LebeauEstimate, OmegaPartition, build_classes, check_gcc,
                      extract_omega, lebeau_constant, project_equilibrium, stationary_basis)
from .errors import (AssumptionViolation, ConfigurationError, ContractError, DegenerateError, LinBoltzError,
                     NumericError, OutOfRangeError)
from .fields import DistributionField
from .flow import IDENTITY, RELATIVISTIC, State, TrajectoryRecord, VelocityMap, closed_form_harmonic, trace
from .geometry import DomainSpec, PhaseGrid, PotentialSpec, build_grid
from .kernels import (GridKernel, KernelReport, KernelSpec, Profile, apply_collision, bgk_equilibrium, bgk_kernel,
                      dissipation, fermi_dirac, grid_kernel, validate_assumptions)
from .solver import (DecayReport, EvolutionSeries, SurvivalReport, evolve, fit_decay, observability_check,
                     tau_survival, weighted_norm)

__all__ = [
    "__version__",
    "AssumptionViolation", "ConfigurationError", "ContractError", "DegenerateError", "LinBoltzError",
    "NumericError", "OutOfRangeError",
    "DomainSpec", "PotentialSpec", "PhaseGrid", "build_grid",
    "VelocityMap", "IDENTITY", "RELATIVISTIC", "State", "TrajectoryRecord", "trace", "closed_form_harmonic",
    "Profile", "KernelSpec", "GridKernel", "KernelReport", "grid_kernel", "validate_assumptions",
    "apply_collision", "dissipation", "bgk_equilibrium", "bgk_kernel", "fermi_dirac",
    "OmegaPartition", "GCCReport", "LebeauEstimate", "ClassStructure", "extract_omega", "check_gcc",
    "lebeau_constant", "build_classes", "stationary_basis", "project_equilibrium",
    "DistributionField", "EvolutionSeries", "DecayReport", "SurvivalReport", "evolve", "fit_decay",
    "tau_survival", "observability_check", "weighted_norm",
]
