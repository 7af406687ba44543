"""Desk-scale laboratory for a compressible heat-conducting flow coupled to a damped clamped beam."""

from .chgvar import (
    CutoffProfile,
    DiffeoCertificate,
    DiffeoMap,
    build_cutoff,
    build_diffeo,
    check_diffeo,
    initial_diffeo,
    map_gradient,
    metric_tensors,
    update_map,
)
from .cli_io import (
    CheckResult,
    RunConfig,
    RunReport,
    parse_config,
    print_config,
    run_scenario,
    scenario_library,
    with_background,
)
from .core_grid import (
    BeamField,
    DiffOps,
    FluidField,
    Grid2D,
    NormSpec,
    beam_embed,
    build_grid,
    diff_ops,
    discrete_norm,
    integrate_beam,
    integrate_fluid,
    weighted_time_norm,
)
from .errors import ConfigError, DiffeoFailure, FsilabError, GeometryError, NumericsError
from .fixed_point import (
    ConservedSeries,
    IterationConfig,
    IterationReport,
    Trajectory,
    conserved_quantities,
    march_global,
    march_local,
    run_global,
    run_local,
    state_norm,
)
from .fs_operator import (
    BlockLayout,
    OperatorMatrix,
    SectorScanResult,
    assemble_block,
    assemble_coupled,
    block_layout,
    constraint_functionals,
    energy_rate,
    gamma_search,
    kernel_vectors,
    pack_fields,
    project_mean_zero,
    resolvent_solve,
    restrict_Xm,
    sector_scan,
    spectrum,
    state_to_vector,
    unpack_fields,
    vector_to_state,
)
from .linear_subsystems import (
    ConvergenceReport,
    PhysParams,
    SourceBundle,
    default_params,
    manufactured_convergence,
    plate_energy,
    plate_operator,
    solve_lift_Dv,
    step_density,
    step_plate,
    step_temperature,
    step_velocity,
)
from .nonlinear_sources import (
    CompatCondition,
    CompatReport,
    FullState,
    check_compatibility,
    eval_global_sources,
    eval_local_sources,
    split_mean,
)

__version__ = "0.1.0"

__all__ = [
    "BeamField",
    "BlockLayout",
    "CheckResult",
    "CompatCondition",
    "CompatReport",
    "ConfigError",
    "ConservedSeries",
    "ConvergenceReport",
    "CutoffProfile",
    "DiffOps",
    "DiffeoCertificate",
    "DiffeoFailure",
    "DiffeoMap",
    "FluidField",
    "FsilabError",
    "FullState",
    "GeometryError",
    "Grid2D",
    "IterationConfig",
    "IterationReport",
    "NormSpec",
    "NumericsError",
    "OperatorMatrix",
    "PhysParams",
    "RunConfig",
    "RunReport",
    "SectorScanResult",
    "SourceBundle",
    "Trajectory",
    "assemble_block",
    "assemble_coupled",
    "beam_embed",
    "block_layout",
    "build_cutoff",
    "build_diffeo",
    "build_grid",
    "check_compatibility",
    "check_diffeo",
    "conserved_quantities",
    "constraint_functionals",
    "default_params",
    "diff_ops",
    "discrete_norm",
    "energy_rate",
    "eval_global_sources",
    "eval_local_sources",
    "gamma_search",
    "initial_diffeo",
    "integrate_beam",
    "integrate_fluid",
    "kernel_vectors",
    "manufactured_convergence",
    "map_gradient",
    "march_global",
    "march_local",
    "metric_tensors",
    "pack_fields",
    "parse_config",
    "plate_energy",
    "plate_operator",
    "print_config",
    "project_mean_zero",
    "resolvent_solve",
    "restrict_Xm",
    "run_global",
    "run_local",
    "run_scenario",
    "scenario_library",
    "sector_scan",
    "solve_lift_Dv",
    "spectrum",
    "split_mean",
    "state_norm",
    "state_to_vector",
    "step_density",
    "step_plate",
    "step_temperature",
    "step_velocity",
    "unpack_fields",
    "update_map",
    "vector_to_state",
    "weighted_time_norm",
    "with_background",
]
