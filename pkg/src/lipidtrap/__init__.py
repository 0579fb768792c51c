"""Numerical laboratory for the lipid-structured drift-diffusion model.

A finite-volume PDE solver with operator splitting, an Euler-Maruyama particle
twin, diagnostics for every functional the theory bounds (mass, L^p norms,
moments, virial monitor, support edges), and a preset-driven batch CLI.
"""

from .model import (
    DomainError,
    DriftSign,
    DriftSpec,
    GronwallBound,
    InitialDataSpec,
    LocalizationKind,
    LocalizationSpec,
    LogisticSpec,
    ProblemSpec,
    Profile,
    blowup_time_Tb,
    characteristic_a,
    characteristic_vanishing_time,
    drift_f,
    find_root_h,
    gronwall_T_alpha,
    h_function,
    logistic_g,
)
from .pde import (
    CFLError,
    Field,
    Grid,
    NumericalFailure,
    StabilityError,
    StepperConfig,
    build_initial_field,
    make_grid,
    run,
    step,
    step_advection_a,
    step_diffusion,
    step_porous_diffusion,
)
from .diagnostics import (
    BlowupReport,
    DiagnosticsConfig,
    DiagnosticsSeries,
    EnvelopeReport,
    check_envelopes,
    detect_blowup,
    half_moment_psi,
    lp_norm,
    mass,
    moment_a,
    sup_weighted,
    support_bounds,
    virial_y,
)
from .particles import (
    EnsembleResult,
    FieldSampler,
    Particle,
    em_step,
    empirical_density,
    simulate_ensemble,
)
from .presets import PRESETS, RunSetup, build_preset, preset_names

__version__ = "0.1.0"
