"""Simulation and analysis toolkit for coupled electron-nuclear spins in doped crystals."""

from .spincore import (
    SpinSystem,
    FieldVector,
    PrincipalForm,
    EnergyLevels,
    tensor_from_principal,
    principal_from_tensor,
    build_hamiltonian,
    eigenlevels,
    label_levels,
)
from .spectra import (
    ResonancePeak,
    NmrLine,
    c2_partner,
    resonance_fields,
    endor_frequencies,
    nmr_field_gradient,
    stick_to_lineshape,
)
from .relaxation import (
    T1eParams,
    RelaxParams,
    DecayCurve,
    MimsFit,
    LineShape,
    polarization,
    t1e_rate,
    t1n_rate,
    fit_rate_model,
    fit_exponential,
    mims_fit,
    id_flip_probability,
    id_line_fit,
)
from .tensorfit import (
    Roadmap,
    RoadmapRecord,
    FitParams,
    FitResult,
    objective,
    fit,
    residual_report,
    synthesize_roadmap,
    gauge_equivalents,
    gauge_distance,
)
from .pulsesim import (
    PulseOp,
    Wait,
    Readout,
    Sequence,
    TransitionTable,
    labeled_levels,
    thermal_populations,
    build_rate_matrix,
    evolve,
    echo_amplitude,
    apply_pulse,
    run_sequence,
    run_davies_endor,
    run_ms_assignment,
    generalized_davies_chain,
    run_generalized_davies,
    run_rabi,
    tidy_reset,
    simulate_t1n_measurement,
    assemble_level_diagram,
)
from .config import ProjectConfig, load_config

__version__ = "0.1.0"
