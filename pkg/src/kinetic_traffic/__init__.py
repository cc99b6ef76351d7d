"""Numerical laboratory for homogeneous kinetic traffic models.

Two binary-interaction kernels on a shared velocity grid: a jump kernel
whose equilibria are known in closed form (mass concentrated on a ladder
of quantized speeds) and a spread kernel that relaxes to smooth profiles.
The package builds the discrete interaction tensors, integrates the
resulting quadratic ODE system, evaluates the closed-form oracle, and
reduces everything to macroscopic outputs: fundamental diagrams,
acceleration estimates, and convergence rates.
"""
from .dynamics import (
    CellMassVector,
    FitResult,
    IntegratorControls,
    NumericalError,
    PiecewiseLinearCDF,
    SteadyStateTimeout,
    TimeSeries,
    Trajectory,
    collision_rhs,
    cumulative_distribution,
    distance_to_equilibrium,
    find_steady_state,
    fit_convergence_rate,
    integrate,
    select_fit_window,
    staircase_distance,
)
from .equilibrium import (
    QuantizedEquilibrium,
    SupportCluster,
    SupportReport,
    closed_form_equilibrium,
    equilibrium_on_grid,
    unstable_equilibrium,
    verify_quantized_support,
)
from .macroscopics import (
    CapacityDropReport,
    DiagramSample,
    FundamentalDiagram,
    Moments,
    TransitionBracket,
    compare_diagrams,
    deceleration_time,
    detect_capacity_drop,
    expected_speed,
    flux_infinite_r,
    fundamental_diagram,
    initial_acceleration,
    moments,
)
from .matrices import (
    GridRatio,
    InteractionTensor,
    StochasticityReport,
    VelocityGrid,
    build_chi_tensor,
    build_delta_tensor_generic,
    build_delta_tensor_integer,
    build_grid,
    dump_tensor,
    verify_stochasticity,
)
from .params import (
    ConfigurationError,
    CustomLaw,
    Kernel,
    ModelParams,
    PowerLaw,
    ProbabilityLaw,
    critical_density,
    evaluate_probability,
)

__version__ = "0.1.0"

__all__ = [
    "CapacityDropReport",
    "CellMassVector",
    "ConfigurationError",
    "CustomLaw",
    "DiagramSample",
    "FitResult",
    "FundamentalDiagram",
    "GridRatio",
    "IntegratorControls",
    "InteractionTensor",
    "Kernel",
    "ModelParams",
    "Moments",
    "NumericalError",
    "PiecewiseLinearCDF",
    "PowerLaw",
    "ProbabilityLaw",
    "QuantizedEquilibrium",
    "SteadyStateTimeout",
    "StochasticityReport",
    "SupportCluster",
    "SupportReport",
    "TimeSeries",
    "Trajectory",
    "TransitionBracket",
    "VelocityGrid",
    "build_chi_tensor",
    "build_delta_tensor_generic",
    "build_delta_tensor_integer",
    "build_grid",
    "closed_form_equilibrium",
    "collision_rhs",
    "compare_diagrams",
    "critical_density",
    "cumulative_distribution",
    "deceleration_time",
    "detect_capacity_drop",
    "distance_to_equilibrium",
    "dump_tensor",
    "equilibrium_on_grid",
    "expected_speed",
    "find_steady_state",
    "fit_convergence_rate",
    "flux_infinite_r",
    "fundamental_diagram",
    "initial_acceleration",
    "integrate",
    "moments",
    "select_fit_window",
    "staircase_distance",
    "unstable_equilibrium",
    "verify_quantized_support",
    "verify_stochasticity",
]
