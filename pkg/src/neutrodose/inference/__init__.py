from .filtering import (
    DegenerateUpdateError,
    Observation,
    ParticleEnsemble,
    pf_assimilate,
    systematic_resample,
)
from .mapfit import MapEstimate, MapProblem, map_estimate
from .patient import (
    DEFAULT_M,
    PatientFilterModel,
    PatientParticles,
    ensemble_from_json,
    ensemble_to_json,
    grade_probabilities,
    load_ensemble,
    map_grade,
    posterior_expected_nadir,
    save_ensemble,
)

__all__ = [
    "DEFAULT_M",
    "DegenerateUpdateError",
    "MapEstimate",
    "MapProblem",
    "Observation",
    "ParticleEnsemble",
    "PatientFilterModel",
    "PatientParticles",
    "ensemble_from_json",
    "ensemble_to_json",
    "grade_probabilities",
    "load_ensemble",
    "map_estimate",
    "map_grade",
    "pf_assimilate",
    "posterior_expected_nadir",
    "save_ensemble",
    "systematic_resample",
]
