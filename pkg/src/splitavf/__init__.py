"""Energy-preserving splitting integrator for Langevin dynamics.

The scheme alternates an implicit averaged-gradient Hamiltonian substep with
an exactly sampled friction/noise substep, keeping the Hamiltonian defect at
Newton-solver level on the conservative half while the friction map handles
dissipation in closed form.  Around the integrator the package provides
first-variation (sensitivity) covariance propagation with spectral
diagnostics, coupled-path strong-convergence measurement against a tamed
explicit reference, kernel-density comparison of terminal laws, and
exponential-moment monitoring, all behind a config-driven command line.

Hot kernels run through a compiled extension when it is importable and fall
back to pure numpy otherwise; results are identical either way.
"""

from ._kernels import BACKEND
from .density import (
    DensityConvergenceResult,
    DensityGrid,
    build_grid,
    density_convergence,
    density_distance,
    grid_mass,
    kde,
    monotone_report,
)
from .experiments import (
    ConvergenceResult,
    ExperimentError,
    MonitorSeries,
    energy_audit,
    exp_moment_monitor,
    fit_slope,
    strong_error,
)
from .integrators import (
    SCHEMES,
    AvfConfig,
    IntegrationError,
    IntegrationStats,
    NewtonDivergenceError,
    avf_step,
    integrate,
    integrate_with_stats,
    make_avf_config,
    ou_substep,
    tamed_euler_step,
)
from .malliavin import (
    MalliavinState,
    averaged_hessians,
    gamma_path,
    gamma_step,
    malliavin_fd_check,
    nondegeneracy_report,
    propagator_matrix,
)
from .model import (
    LangevinModel,
    PotentialSpec,
    State,
    builtin_potential,
    hamiltonian,
    potential_values,
    validate_assumptions,
)
from .noise import PathHierarchy, generate_path, ou_variance_factor, sample_key

__version__ = "0.1.0"

__all__ = [
    "__version__",
    "BACKEND",
    "SCHEMES",
    # model
    "LangevinModel",
    "PotentialSpec",
    "State",
    "averaged_hessians",
    "builtin_potential",
    "hamiltonian",
    "potential_values",
    "validate_assumptions",
    # noise
    "PathHierarchy",
    "generate_path",
    "sample_key",
    # integrators
    "AvfConfig",
    "IntegrationError",
    "IntegrationStats",
    "NewtonDivergenceError",
    "avf_step",
    "integrate",
    "integrate_with_stats",
    "make_avf_config",
    "ou_substep",
    "tamed_euler_step",
    # sensitivity covariance
    "MalliavinState",
    "gamma_path",
    "gamma_step",
    "malliavin_fd_check",
    "nondegeneracy_report",
    "ou_variance_factor",
    "propagator_matrix",
    # experiments
    "ConvergenceResult",
    "ExperimentError",
    "MonitorSeries",
    "energy_audit",
    "exp_moment_monitor",
    "fit_slope",
    "strong_error",
    # density
    "DensityConvergenceResult",
    "DensityGrid",
    "build_grid",
    "density_convergence",
    "density_distance",
    "grid_mass",
    "kde",
    "monotone_report",
]
