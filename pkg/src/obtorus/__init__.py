"""Pseudo-spectral simulation of the regularised Oldroyd-B model on the unit periodic box."""

from .diagnostics import (
    CSV_HEADER,
    DiagnosticsRecord,
    EnergyConstants,
    Recorder,
    bound_r1,
    check_energy_bound,
    energy_constants,
    energy_ledger,
    l2_distance,
    min_eig_sigma,
)
from .diffusive import rhs_sigma, rhs_vorticity, run_diffusive, step_imex
from .experiments import (
    RunConfig,
    epsilon_sweep,
    initial_condition,
    load_config,
    parse_config,
    self_convergence,
    simulate,
    stability_pair,
)
from .flowmap import (
    FlowMapError,
    FlowStepState,
    VelocitySlab,
    backward_trajectory,
    deformation_gradient,
    offgrid_eval,
    run_nondiffusive,
    sigma_step_flowmap,
)
from .model import CFLError, ForcingSpec, NO_FORCING, PhysParams, SimState, SimulationAborted
from .mollifier import Mollifier, build_mollifier, mollifier_constant
from .persistence import SnapshotError, read_snapshot, write_csv, write_snapshot
from .spectral import Field, Grid, l2_norm, sobolev_norm
from .vorticity import curl, curl_div_tensor, omega_nonlinear, velocity_from_vorticity

__version__ = "0.1.0"
