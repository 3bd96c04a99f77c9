"""Non-tree dosing policies: standard, PK-guided, MAP-guided, DA-guided.

Doses are absolute mg unless a function is documented to return mg/m^2 (the
PK-guided table operates per body surface area).  All policies keep their
output within [60, 250] mg/m^2 x BSA and break ties toward the lowest dose.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.optimize import minimize_scalar

from .cohort import DEFAULT_GRADE_SCALE, GradeScale
from .inference import ParticleEnsemble
from .inference.patient import PatientFilterModel
from .pkpd import DomainError, cycle_nadirs, simulate_cycle_batch


@dataclass(frozen=True)
class DoseGrid:
    """Evenly spaced dose levels in mg/m^2."""

    d_min: float = 60.0
    d_max: float = 250.0
    step: float = 5.0

    def __post_init__(self) -> None:
        n = (self.d_max - self.d_min) / self.step
        if abs(n - round(n)) > 1e-9 or n <= 0:
            raise DomainError("dose grid must be evenly spaced")

    @property
    def levels(self) -> np.ndarray:
        return np.arange(self.d_min, self.d_max + self.step / 2, self.step)

    @property
    def n(self) -> int:
        return len(self.levels)

    def clamp(self, dose_mgm2: float) -> float:
        return min(max(dose_mgm2, self.d_min), self.d_max)

    def snap(self, dose_mgm2: float) -> float:
        """Nearest grid level (ties toward the lower dose)."""
        levels = self.levels
        i = int(np.argmin(np.abs(levels - dose_mgm2)))
        return float(levels[i])


DEFAULT_DOSE_GRID = DoseGrid()


@dataclass(frozen=True)
class RewardSpec:
    """Per-grade rewards, MAP utility curve, and DA risk weights."""

    grade_rewards: tuple[float, ...] = (-1.0, 1.0, 1.0, 1.0, -2.0)
    target_nadir: float = 1.0
    lambda0: float = 1.0 / 3.0
    lambda4: float = 2.0 / 3.0
    # piecewise-linear utility over nadir, mirroring the grade rewards
    utility_nadirs: tuple[float, ...] = (0.0, 0.5, 2.0, 4.0)
    utility_values: tuple[float, ...] = (-2.0, 1.0, 1.0, -1.0)

    def __post_init__(self) -> None:
        if len(self.grade_rewards) != 5:
            raise DomainError("grade_rewards must have one value per grade 0..4")
        if not math.isclose(self.lambda0 + self.lambda4, 1.0, rel_tol=1e-9):
            raise DomainError("lambda0 + lambda4 must equal 1")
        if len(self.utility_nadirs) != len(self.utility_values):
            raise DomainError("utility curve points must pair up")

    def reward(self, grade: int) -> float:
        return self.grade_rewards[grade]

    @property
    def reward_bounds(self) -> tuple[float, float]:
        return min(self.grade_rewards), max(self.grade_rewards)

    def utility(self, nadir: float) -> float:
        """Flat extrapolation beyond the configured curve ends."""
        return float(np.interp(nadir, self.utility_nadirs, self.utility_values))

    def to_json(self, path: str | Path | None = None) -> str:
        doc = {
            "grade_rewards": list(self.grade_rewards),
            "target_nadir": self.target_nadir,
            "lambda0": self.lambda0,
            "lambda4": self.lambda4,
            "utility_nadirs": list(self.utility_nadirs),
            "utility_values": list(self.utility_values),
        }
        text = json.dumps(doc, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    @classmethod
    def from_json(cls, source: str | Path) -> "RewardSpec":
        text = Path(source).read_text() if Path(str(source)).exists() else str(source)
        doc = json.loads(text)
        return cls(
            grade_rewards=tuple(doc["grade_rewards"]),
            target_nadir=doc["target_nadir"],
            lambda0=doc["lambda0"],
            lambda4=doc["lambda4"],
            utility_nadirs=tuple(doc["utility_nadirs"]),
            utility_values=tuple(doc["utility_values"]),
        )


DEFAULT_REWARD_SPEC = RewardSpec()


# -- standard dosing ------------------------------------------------------------


def standard_dose(
    prev_dose_mg: float | None,
    prev_grade: int | None,
    bsa: float,
    base_mgm2: float = 200.0,
    reduction: float = 0.2,
) -> float:
    """BSA-based dosing with a 20 % reduction after observed grade 4.

    Cycle 1 gives base * BSA; later cycles repeat the previous absolute dose,
    reduced when the previous cycle's observed grade was 4.  Reductions
    compound and are never re-escalated.
    """
    if prev_dose_mg is None:
        return base_mgm2 * bsa
    if prev_grade == 4:
        return prev_dose_mg * (1.0 - reduction)
    return prev_dose_mg


# -- PK-guided dosing -----------------------------------------------------------


_DEFAULT_PK_RULES = {
    # placeholder defaults: 200 mg/m^2 baseline with +/-10 % age/sex modifiers
    "first_dose_mgm2": {
        "female_lt": 200.0, "female_ge": 180.0, "male_lt": 220.0, "male_ge": 200.0,
    },
    "age_threshold_y": 60.0,
    "exposure_bands_h": [26.0, 31.0],
    # adjustment % by previous grade (rows 0..4) x exposure band (low, mid, high)
    "adjustment_pct": [
        [30.0, 20.0, 0.0],
        [20.0, 0.0, 0.0],
        [0.0, 0.0, -20.0],
        [0.0, -20.0, -20.0],
        [-20.0, -20.0, -20.0],
    ],
    "dose_bounds_mgm2": [60.0, 250.0],
    "exposure_threshold_uM": 0.05,
}


@dataclass(frozen=True)
class PkGuidedRuleTable:
    """Config-driven first-dose and adjustment rules for PK-guided dosing.

    The shipped defaults are clearly labelled placeholders; the table is a
    plain JSON document so the original study rules can be transcribed
    without code changes.
    """

    first_dose_mgm2: dict
    age_threshold_y: float
    exposure_bands_h: tuple[float, ...]
    adjustment_pct: tuple[tuple[float, ...], ...]
    dose_bounds_mgm2: tuple[float, float]
    exposure_threshold_uM: float = 0.05

    def __post_init__(self) -> None:
        if sorted(self.exposure_bands_h) != list(self.exposure_bands_h):
            raise DomainError("exposure bands must be ascending")
        if len(self.adjustment_pct) != 5:
            raise DomainError("adjustment table needs one row per grade 0..4")
        n_bands = len(self.exposure_bands_h) + 1
        if any(len(r) != n_bands for r in self.adjustment_pct):
            raise DomainError(f"each adjustment row needs {n_bands} entries")

    @classmethod
    def default(cls) -> "PkGuidedRuleTable":
        return cls.from_dict(_DEFAULT_PK_RULES)

    @classmethod
    def from_dict(cls, doc: dict) -> "PkGuidedRuleTable":
        return cls(
            first_dose_mgm2=dict(doc["first_dose_mgm2"]),
            age_threshold_y=doc["age_threshold_y"],
            exposure_bands_h=tuple(doc["exposure_bands_h"]),
            adjustment_pct=tuple(tuple(r) for r in doc["adjustment_pct"]),
            dose_bounds_mgm2=tuple(doc["dose_bounds_mgm2"]),
            exposure_threshold_uM=doc.get("exposure_threshold_uM", 0.05),
        )

    @classmethod
    def from_json(cls, source: str | Path) -> "PkGuidedRuleTable":
        text = Path(str(source)).read_text() if Path(str(source)).exists() else str(source)
        return cls.from_dict(json.loads(text))

    def to_json(self, path: str | Path | None = None) -> str:
        doc = {
            "first_dose_mgm2": self.first_dose_mgm2,
            "age_threshold_y": self.age_threshold_y,
            "exposure_bands_h": list(self.exposure_bands_h),
            "adjustment_pct": [list(r) for r in self.adjustment_pct],
            "dose_bounds_mgm2": list(self.dose_bounds_mgm2),
            "exposure_threshold_uM": self.exposure_threshold_uM,
        }
        text = json.dumps(doc, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text

    def first_dose(self, sex: int, age: float) -> float:
        key = ("male" if sex else "female") + ("_lt" if age < self.age_threshold_y else "_ge")
        return float(self.first_dose_mgm2[key])

    def band_of(self, exposure_h: float) -> int:
        return int(np.searchsorted(self.exposure_bands_h, exposure_h, side="right"))

    def adjustment(self, prev_grade: int, exposure_h: float) -> float:
        return self.adjustment_pct[prev_grade][self.band_of(exposure_h)] / 100.0


def pk_guided_dose(
    cycle: int,
    sex: int,
    age: float,
    prev_dose_mgm2: float | None,
    prev_grade: int | None,
    exposure_h: float | None,
    table: PkGuidedRuleTable | None = None,
) -> float:
    """Table-driven dose in mg/m^2: first dose by sex/age, later cycles
    adjusted by (previous grade, exposure band) and clamped to the bounds."""
    table = PkGuidedRuleTable.default() if table is None else table
    if cycle <= 1:
        return table.first_dose(sex, age)
    if exposure_h is None:
        raise DomainError("PK-guided dosing needs the previous cycle's exposure")
    if prev_dose_mgm2 is None or prev_grade is None:
        raise DomainError("PK-guided dosing needs the previous dose and grade")
    dose = prev_dose_mgm2 * (1.0 + table.adjustment(prev_grade, exposure_h))
    lo, hi = table.dose_bounds_mgm2
    return min(max(dose, lo), hi)


# -- search helpers -------------------------------------------------------------


def _grid_then_refine(
    objective: Callable[[float], float],
    doses_mg: np.ndarray,
    refine: bool = True,
    xatol_mg: float = 1.0,
) -> tuple[float, float]:
    """Coarse scan over candidate doses plus bounded local refinement.

    Returns (best dose, best objective); exact ties resolve to the lowest
    dose because argmin takes the first minimum of the ascending dose scan.
    """
    values = np.array([objective(d) for d in doses_mg])
    i = int(np.argmin(values))
    best_d, best_v = float(doses_mg[i]), float(values[i])
    if refine and len(doses_mg) > 1:
        lo = doses_mg[max(i - 1, 0)]
        hi = doses_mg[min(i + 1, len(doses_mg) - 1)]
        if hi > lo:
            res = minimize_scalar(
                objective, bounds=(lo, hi), method="bounded",
                options={"xatol": xatol_mg},
            )
            if np.isfinite(res.fun) and res.fun < best_v - 1e-12:
                best_d, best_v = float(res.x), float(res.fun)
    return best_d, best_v


# -- MAP-guided dosing ----------------------------------------------------------


def map_guided_dose(
    nadir_fn: Callable[[float], float],
    mode: str,
    bsa: float,
    spec: RewardSpec = DEFAULT_REWARD_SPEC,
    grid: DoseGrid = DEFAULT_DOSE_GRID,
    refine: bool = True,
) -> float:
    """One-cycle-horizon dose selection on MAP predictions, in mg.

    nadir_fn maps an absolute dose in mg to the predicted nadir for the next
    cycle.  mode "target" minimizes (nadir - target)^2; mode "utility"
    maximizes the piecewise-linear utility.  The search scans the dose grid
    and locally refines around the best level.
    """
    if mode not in ("target", "utility"):
        raise DomainError(f"unknown MAP objective mode {mode!r}")

    if mode == "target":
        objective = lambda d: (nadir_fn(d) - spec.target_nadir) ** 2
    else:
        objective = lambda d: -spec.utility(nadir_fn(d))

    doses_mg = grid.levels * bsa
    best_d, _ = _grid_then_refine(objective, doses_mg, refine=refine)
    return best_d


def map_nadir_fn(
    model: PatientFilterModel,
    params,
    cycle: int,
    state0: np.ndarray,
) -> Callable[[float], float]:
    """Next-cycle nadir predictor for a MAP parameter point.

    state0 is the model state at the cycle's start under the MAP parameters;
    simulation of candidate doses starts there.
    """
    t0 = (cycle - 1) * model.cycle_length_h
    t1 = cycle * model.cycle_length_h
    theta = params.occasion(cycle)[None, :]

    def nadir_of(dose_mg: float) -> float:
        y0 = state0[None, :].copy()
        grid, outs, status = simulate_cycle_batch(
            theta, y0, t0, t1, dose_mg, infusion_h=model.infusion_h,
            rtol=model.rtol, atol=model.atol,
        )
        if status[0] != 0:
            raise RuntimeError(f"simulation failed for dose {dose_mg} mg")
        return float(cycle_nadirs(outs, grid)[0])

    return nadir_of


# -- DA-guided dosing -----------------------------------------------------------


def da_member_grades_fn(
    ensemble: ParticleEnsemble,
    model: PatientFilterModel,
    cycle: int,
    scale: GradeScale = DEFAULT_GRADE_SCALE,
    members: np.ndarray | None = None,
    grid_dt: float = 2.0,
) -> Callable[[float], np.ndarray]:
    """Factory for the per-member next-cycle grade prediction.

    Members start from their current states (the ensemble must be propagated
    to the cycle start); the members' own inter-occasion draws for the next
    cycle provide the fresh-occasion variability.  The ensemble itself is
    never mutated.  `members` restricts the simulation to a subset of member
    indices (the caller weighs the results accordingly).
    """
    t0 = (cycle - 1) * model.cycle_length_h
    t1 = cycle * model.cycle_length_h
    if abs(ensemble.t - t0) > 1e-6:
        raise DomainError(
            f"ensemble is at t={ensemble.t}, expected cycle start {t0}"
        )
    particles = ensemble.particles
    thetas = model.occasion_thetas(particles, cycle)
    state0 = particles.state
    if members is not None:
        thetas = thetas[members]
        state0 = state0[members]

    def grades_of(dose_mg: float) -> np.ndarray:
        y0 = state0.copy()
        grid, outs, status = simulate_cycle_batch(
            thetas, y0, t0, t1, dose_mg, infusion_h=model.infusion_h,
            grid_dt=grid_dt, rtol=model.rtol, atol=model.atol,
        )
        if np.any(status != 0):
            raise RuntimeError(f"member simulation failed for dose {dose_mg} mg")
        nadirs = cycle_nadirs(outs, grid)
        return np.array([scale.grade_of(n) for n in nadirs])

    return grades_of


def da_risk_objective(
    grades_fn: Callable[[float], np.ndarray],
    weights: np.ndarray,
    spec: RewardSpec = DEFAULT_REWARD_SPEC,
) -> Callable[[float], float]:
    """Weighted posterior risk lambda0 * P(grade 0) + lambda4 * P(grade 4)."""

    def objective(dose_mg: float) -> float:
        grades = grades_fn(dose_mg)
        p0 = float(weights[grades == 0].sum())
        p4 = float(weights[grades == 4].sum())
        return spec.lambda0 * p0 + spec.lambda4 * p4

    return objective


def da_guided_dose(
    ensemble: ParticleEnsemble,
    model: PatientFilterModel,
    cycle: int,
    bsa: float,
    spec: RewardSpec = DEFAULT_REWARD_SPEC,
    grid: DoseGrid = DEFAULT_DOSE_GRID,
    scan_stride: int = 1,
    refine: bool = True,
    opt_members: int | None = None,
    rng: np.random.Generator | None = None,
    grades_fn: Callable[[float], np.ndarray] | None = None,
) -> float:
    """Dose (mg) minimizing the weighted risk of grade 0 or 4 next cycle.

    Bounded scalar minimization over [d_min, d_max] x BSA: a scan over every
    scan_stride-th grid level brackets the minimum and a bounded local search
    refines it.  Ties resolve to the lowest dose.  opt_members evaluates the
    risk on a systematic weighted subsample of the ensemble (cheaper
    objective, unchanged assimilation).  A degenerate ensemble (single unique
    member) still yields the risk-minimizing dose for that member, which
    coincides with a MAP-style point optimization.
    """
    weights = ensemble.weights
    if grades_fn is None:
        members = None
        if opt_members is not None and opt_members < ensemble.m:
            from .inference import systematic_resample

            rng = np.random.default_rng(0) if rng is None else rng
            picks = systematic_resample(weights, rng)
            members = picks[
                np.linspace(0, len(picks) - 1, opt_members).astype(int)
            ]
            weights = np.full(opt_members, 1.0 / opt_members)
        grades_fn = da_member_grades_fn(ensemble, model, cycle, members=members)
    objective = da_risk_objective(grades_fn, weights, spec)
    levels = grid.levels[::max(1, int(scan_stride))]
    if levels[-1] != grid.levels[-1]:
        levels = np.append(levels, grid.levels[-1])
    best_d, _ = _grid_then_refine(objective, levels * bsa, refine=refine)
    return best_d
