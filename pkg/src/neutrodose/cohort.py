"""Virtual patient generation, covariate classes, neutropenia grading, state encoding.

Covariates are discretized into L = 32 classes (2 sex x 4 age bins x 4
baseline-ANC bins).  A patient state is (class, grade history); grade
histories of length 0..5 are decision states (a dose is still to be chosen),
length 6 is a leaf.  Decision states are enumerated per class by base-5
positional encoding with depth offsets, 3906 per class, 124992 globally.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .pkpd import (
    ETA_NAMES,
    KAPPA_NAMES,
    DomainError,
    IndividualParameters,
    PatientCovariates,
    PopulationModel,
    individualize,
)

N_GRADES = 5
N_CYCLES = 6
AGE_EDGES = (18.0, 50.0, 60.0, 70.0, 100.0)
ANC0_EDGES = (1.5, 2.5, 5.0, 10.0, 25.0)
N_AGE_BINS = len(AGE_EDGES) - 1
N_ANC0_BINS = len(ANC0_EDGES) - 1
N_CLASSES = 2 * N_AGE_BINS * N_ANC0_BINS

# 1 + 5 + 25 + 125 + 625 + 3125 decision states per class
DECISION_STATES_PER_CLASS = sum(N_GRADES ** m for m in range(N_CYCLES))
TOTAL_STATES_PER_CLASS = sum(N_GRADES ** m for m in range(N_CYCLES + 1))
N_DECISION_STATES = N_CLASSES * DECISION_STATES_PER_CLASS
_DEPTH_OFFSETS = tuple(
    sum(N_GRADES ** j for j in range(m)) for m in range(N_CYCLES + 1)
)

LEAF = -1  # encode_state marker for a completed (length-6) history


@dataclass(frozen=True)
class GradeScale:
    """Descending ANC thresholds separating grades 0..4.

    A value v maps to the first grade g whose threshold satisfies
    v >= thresholds[g], with grade 4 below the last threshold; intervals are
    inclusive at the lower bound (exactly 0.5 is grade 3).
    """

    thresholds: tuple[float, ...] = (2.0, 1.5, 1.0, 0.5)

    def __post_init__(self) -> None:
        if len(self.thresholds) != N_GRADES - 1 or any(
            b >= a for a, b in zip(self.thresholds, self.thresholds[1:])
        ):
            raise DomainError("thresholds must be 4 strictly decreasing values")

    def grade_of(self, value: float) -> int:
        if value < 0:
            raise DomainError(f"ANC value must be >= 0, got {value}")
        for g, thr in enumerate(self.thresholds):
            if value >= thr:
                return g
        return N_GRADES - 1


DEFAULT_GRADE_SCALE = GradeScale()


def grade_of(value: float, scale: GradeScale = DEFAULT_GRADE_SCALE) -> int:
    """CTCAE neutropenia grade for an ANC value in 1e9 cells/L."""
    return scale.grade_of(value)


@dataclass(frozen=True)
class CovariateClass:
    sex: int
    age_bin: int
    anc0_bin: int

    def __post_init__(self) -> None:
        if self.sex not in (0, 1):
            raise DomainError("sex bin must be 0 or 1")
        if not 0 <= self.age_bin < N_AGE_BINS:
            raise DomainError(f"age bin must be in [0, {N_AGE_BINS})")
        if not 0 <= self.anc0_bin < N_ANC0_BINS:
            raise DomainError(f"anc0 bin must be in [0, {N_ANC0_BINS})")

    @property
    def index(self) -> int:
        return (self.sex * N_AGE_BINS + self.age_bin) * N_ANC0_BINS + self.anc0_bin

    @classmethod
    def from_index(cls, index: int) -> "CovariateClass":
        if not 0 <= index < N_CLASSES:
            raise DomainError(f"class index must be in [0, {N_CLASSES})")
        sex, rest = divmod(index, N_AGE_BINS * N_ANC0_BINS)
        age_bin, anc0_bin = divmod(rest, N_ANC0_BINS)
        return cls(sex, age_bin, anc0_bin)

    @property
    def age_range(self) -> tuple[float, float]:
        return AGE_EDGES[self.age_bin], AGE_EDGES[self.age_bin + 1]

    @property
    def anc0_range(self) -> tuple[float, float]:
        return ANC0_EDGES[self.anc0_bin], ANC0_EDGES[self.anc0_bin + 1]

    def describe(self) -> str:
        sex = "male" if self.sex else "female"
        a0, a1 = self.age_range
        n0, n1 = self.anc0_range
        return f"{sex}, age [{a0:g},{a1:g}), ANC0 [{n0:g},{n1:g})"


def class_of(cov: PatientCovariates) -> CovariateClass:
    """Covariate class containing the patient; the binning is a partition."""
    age_bin = int(np.searchsorted(AGE_EDGES, cov.age, side="right") - 1)
    anc0_bin = int(np.searchsorted(ANC0_EDGES, cov.anc0, side="right") - 1)
    if not 0 <= age_bin < N_AGE_BINS:
        raise DomainError(f"age {cov.age} outside covered range {AGE_EDGES}")
    if not 0 <= anc0_bin < N_ANC0_BINS:
        raise DomainError(f"anc0 {cov.anc0} outside covered range {ANC0_EDGES}")
    return CovariateClass(cov.sex, age_bin, anc0_bin)


@dataclass(frozen=True)
class PatientState:
    """Discrete planning state: covariate class plus observed grade history."""

    cls: CovariateClass
    grades: tuple[int, ...] = ()

    def __post_init__(self) -> None:
        if len(self.grades) > N_CYCLES:
            raise DomainError(f"grade history longer than {N_CYCLES} cycles")
        if any(not 0 <= g < N_GRADES for g in self.grades):
            raise DomainError("grades must be in 0..4")

    @property
    def cycle(self) -> int:
        """Number of completed cycles."""
        return len(self.grades)

    @property
    def is_leaf(self) -> bool:
        return len(self.grades) == N_CYCLES

    def child(self, grade: int) -> "PatientState":
        return PatientState(self.cls, (*self.grades, grade))

    def parent(self) -> "PatientState":
        if not self.grades:
            raise DomainError("root state has no parent")
        return PatientState(self.cls, self.grades[:-1])


def encode_local(grades: tuple[int, ...]) -> int:
    """Index of a decision-state grade history within one class (0..3905)."""
    m = len(grades)
    if m >= N_CYCLES:
        return LEAF
    val = 0
    for g in grades:
        val = val * N_GRADES + g
    return _DEPTH_OFFSETS[m] + val


def decode_local(index: int) -> tuple[int, ...]:
    """Inverse of encode_local."""
    if not 0 <= index < DECISION_STATES_PER_CLASS:
        raise DomainError(f"local state index out of range: {index}")
    m = 0
    while m + 1 <= N_CYCLES - 1 and index >= _DEPTH_OFFSETS[m + 1]:
        m += 1
    val = index - _DEPTH_OFFSETS[m]
    grades = [0] * m
    for i in range(m - 1, -1, -1):
        grades[i] = val % N_GRADES
        val //= N_GRADES
    return tuple(grades)


def encode_state(state: PatientState) -> int:
    """Global decision-state index; LEAF for a completed history."""
    local = encode_local(state.grades)
    if local == LEAF:
        return LEAF
    return state.cls.index * DECISION_STATES_PER_CLASS + local


def decode_state(index: int) -> PatientState:
    cls_idx, local = divmod(index, DECISION_STATES_PER_CLASS)
    return PatientState(CovariateClass.from_index(cls_idx), decode_local(local))


@dataclass(frozen=True)
class CovariateSampler:
    """Sampling distributions for virtual patient covariates.

    Defaults: age uniform (within bin or the study 5th-95th percentile range),
    BSA normal(1.8, 0.2^2) truncated to [1.4, 2.4] m^2, bilirubin lognormal
    (median 7 uM, geometric sd 1.3), baseline ANC uniform within its bin or
    lognormal (median 6.48, gsd 1.4) truncated to the covered range.
    """

    age_range: tuple[float, float] = (51.0, 74.0)
    bsa_mean: float = 1.8
    bsa_sd: float = 0.2
    bsa_range: tuple[float, float] = (1.4, 2.4)
    bili_median: float = 7.0
    bili_gsd: float = 1.3
    anc0_median: float = 6.48
    anc0_gsd: float = 1.4

    def _trunc_normal(self, rng, mean, sd, lo, hi):
        while True:
            x = mean + sd * rng.standard_normal()
            if lo <= x <= hi:
                return x

    def _trunc_lognormal(self, rng, median, gsd, lo, hi):
        mu, s = math.log(median), math.log(gsd)
        while True:
            x = math.exp(mu + s * rng.standard_normal())
            if lo <= x <= hi:
                return x

    def sample_covariates(
        self, rng: np.random.Generator, cls: CovariateClass | None = None
    ) -> PatientCovariates:
        if cls is None:
            sex = int(rng.integers(0, 2))
            age = rng.uniform(*self.age_range)
            anc0 = self._trunc_lognormal(
                rng, self.anc0_median, self.anc0_gsd, ANC0_EDGES[0], ANC0_EDGES[-1]
            )
        else:
            sex = cls.sex
            age = rng.uniform(*cls.age_range)
            anc0 = rng.uniform(*cls.anc0_range)
        bsa = self._trunc_normal(rng, self.bsa_mean, self.bsa_sd, *self.bsa_range)
        bili = self._trunc_lognormal(rng, self.bili_median, self.bili_gsd, 0.5, 60.0)
        return PatientCovariates(sex=sex, age=age, bsa=bsa, bili=bili, anc0=anc0)


DEFAULT_SAMPLER = CovariateSampler()


def sample_patient(
    rng: np.random.Generator,
    model: PopulationModel,
    cls: CovariateClass | int | None = None,
    sampler: CovariateSampler = DEFAULT_SAMPLER,
    n_cycles: int = N_CYCLES,
) -> tuple[PatientCovariates, IndividualParameters]:
    """Draw a virtual patient: covariates within the class, eta ~ N(0, Omega),
    kappa_c ~ N(0, Pi) i.i.d. per cycle, baseline from the ANC0 observation."""
    if isinstance(cls, int):
        cls = CovariateClass.from_index(cls)
    cov = sampler.sample_covariates(rng, cls)
    omega = np.sqrt(np.asarray(model.omega2))
    pi = np.sqrt(np.asarray(model.pi2))
    eta = omega * rng.standard_normal(len(ETA_NAMES))
    eta_circ0 = float(rng.standard_normal())
    kappa = pi * rng.standard_normal((n_cycles, len(KAPPA_NAMES)))
    params = individualize(
        cov, model, eta=eta, kappa=kappa, eta_circ0=eta_circ0, n_cycles=n_cycles
    )
    return cov, params


def patient_to_json(cov: PatientCovariates, params: IndividualParameters) -> str:
    """One JSON line per patient so cohorts replay bit-exactly."""
    doc = {
        "covariates": {
            "sex": cov.sex, "age": cov.age, "bsa": cov.bsa,
            "bili": cov.bili, "anc0": cov.anc0,
        },
        "eta": params.eta.tolist(),
        "eta_circ0": params.eta_circ0,
        "kappa": params.kappa.tolist(),
    }
    return json.dumps(doc)


def patient_from_json(
    line: str, model: PopulationModel
) -> tuple[PatientCovariates, IndividualParameters]:
    doc = json.loads(line)
    cov = PatientCovariates(**doc["covariates"])
    params = individualize(
        cov,
        model,
        eta=np.array(doc["eta"]),
        kappa=np.array(doc["kappa"]),
        eta_circ0=doc["eta_circ0"],
        n_cycles=len(doc["kappa"]),
    )
    return cov, params


def export_cohort(
    path: str | Path,
    patients: list[tuple[PatientCovariates, IndividualParameters]],
) -> None:
    with open(path, "w") as fh:
        for cov, params in patients:
            fh.write(patient_to_json(cov, params) + "\n")


def import_cohort(
    path: str | Path, model: PopulationModel
) -> list[tuple[PatientCovariates, IndividualParameters]]:
    with open(path) as fh:
        return [patient_from_json(line, model) for line in fh if line.strip()]
