from .population import (
    ETA_NAMES,
    KAPPA_NAMES,
    MG_TO_UMOL,
    N_PARAMS,
    PACLITAXEL_MW,
    PARAM_NAMES,
    DomainError,
    IndividualParameters,
    PatientCovariates,
    PopulationModel,
    individualize,
    typical_vmel,
)
from .simulate import (
    CYCLE_LENGTH_H,
    DEFAULT_INFUSION_H,
    DoseEvent,
    DoseRegimen,
    SimulationError,
    Trajectory,
    cycle_nadirs,
    exposure_time_above,
    nadir,
    observe,
    quad_min,
    simulate,
    simulate_cycle_batch,
)

__all__ = [
    "CYCLE_LENGTH_H",
    "DEFAULT_INFUSION_H",
    "DomainError",
    "DoseEvent",
    "DoseRegimen",
    "ETA_NAMES",
    "IndividualParameters",
    "KAPPA_NAMES",
    "MG_TO_UMOL",
    "N_PARAMS",
    "PACLITAXEL_MW",
    "PARAM_NAMES",
    "PatientCovariates",
    "PopulationModel",
    "SimulationError",
    "Trajectory",
    "cycle_nadirs",
    "exposure_time_above",
    "individualize",
    "nadir",
    "observe",
    "quad_min",
    "simulate",
    "simulate_cycle_batch",
    "typical_vmel",
]
