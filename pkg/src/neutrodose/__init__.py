"""neutrodose: precision-dosing engine for neutropenia-inducing chemotherapy.

Simulates a population PK/PD model of drug-induced neutropenia, assimilates
per-patient neutrophil observations (MAP estimation and particle filtering),
plans doses with Monte Carlo tree search (population UCT offline, posterior
PUCT online), and benchmarks dosing policies on virtual cohorts.
"""

from .cohort import (
    CovariateClass,
    GradeScale,
    PatientState,
    class_of,
    encode_state,
    decode_state,
    grade_of,
    sample_patient,
)
from .pkpd import (
    DoseEvent,
    DoseRegimen,
    DomainError,
    IndividualParameters,
    PatientCovariates,
    PopulationModel,
    SimulationError,
    Trajectory,
    exposure_time_above,
    individualize,
    nadir,
    observe,
    simulate,
    typical_vmel,
)
from .planner import PlannerConfig, QTable, VirtualPatientEnv, mcts_train, q_planning
from .policies import DoseGrid, PkGuidedRuleTable, RewardSpec

__version__ = "0.1.0"

__all__ = [
    "CovariateClass",
    "DomainError",
    "DoseEvent",
    "DoseGrid",
    "DoseRegimen",
    "GradeScale",
    "IndividualParameters",
    "PatientCovariates",
    "PatientState",
    "PkGuidedRuleTable",
    "PlannerConfig",
    "PopulationModel",
    "QTable",
    "RewardSpec",
    "SimulationError",
    "Trajectory",
    "VirtualPatientEnv",
    "class_of",
    "decode_state",
    "encode_state",
    "exposure_time_above",
    "grade_of",
    "individualize",
    "mcts_train",
    "nadir",
    "observe",
    "q_planning",
    "sample_patient",
    "simulate",
    "typical_vmel",
]
