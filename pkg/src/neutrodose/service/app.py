"""HTTP JSON API for interactive dosing sessions.

Endpoints (all payloads carry explicit units):
    POST /v1/sessions                              create a session
    POST /v1/sessions/{id}/events                  record a dose or observation
    GET  /v1/sessions/{id}                         session summary
    GET  /v1/sessions/{id}/recommendation?policy=  dose recommendation + report
    GET  /v1/sessions/{id}/whatif?dose_mg=         posterior-predictive preview
    GET  /v1/qtables/{cls}/row?state=g1,g2         population action-value row

Environment: NEUTRODOSE_DATA_DIR (session storage), NEUTRODOSE_QTABLE
(population table for rl/da-rl), NEUTRODOSE_PORT.
"""

from __future__ import annotations

import os
from pathlib import Path
from typing import Literal

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from pydantic import BaseModel, Field

from ..cohort import CovariateClass, PatientState, class_of
from ..online import OnlinePlanSession, plan_dose
from ..pkpd import CYCLE_LENGTH_H, DomainError, PatientCovariates, cycle_nadirs, simulate_cycle_batch
from ..planner import QTable, UntrainedStateError, greedy_policy
from ..policies import (
    DEFAULT_DOSE_GRID,
    da_member_grades_fn,
    da_risk_objective,
    da_guided_dose,
    map_guided_dose,
    map_nadir_fn,
    pk_guided_dose,
    standard_dose,
)
from .store import SessionStore

POLICY_CHOICES = ("standard", "pk", "map-target", "map-utility", "da", "rl", "da-rl")


class CovariatesIn(BaseModel):
    sex: int = Field(description="0 female / 1 male")
    age: float = Field(gt=0, description="years")
    bsa: float = Field(gt=0, description="m^2")
    bili: float = Field(gt=0, description="umol/L")
    anc0: float = Field(description="baseline neutrophils, 1e9 cells/L")


class SessionCreateIn(BaseModel):
    covariates: CovariatesIn
    seed: int | None = None
    ensemble_size: int = 100
    request_id: str | None = None


class EventIn(BaseModel):
    request_id: str
    type: Literal["dose", "observation"]
    time_h: float = Field(ge=0, description="hours since therapy start")
    amount_mg: float | None = Field(default=None, description="dose events: absolute mg")
    duration_h: float | None = Field(default=None, description="infusion duration, h")
    value: float | None = Field(default=None, description="observation value")
    kind: Literal["neutrophil", "drug"] = "neutrophil"


def create_app(
    data_dir: str | Path | None = None,
    qtable_path: str | Path | None = None,
    console_dir: str | Path | None = None,
) -> FastAPI:
    data_dir = Path(data_dir or os.environ.get("NEUTRODOSE_DATA_DIR", "./neutrodose-data"))
    qtable_path = qtable_path or os.environ.get("NEUTRODOSE_QTABLE")
    console_dir = console_dir or os.environ.get("NEUTRODOSE_CONSOLE_DIR")
    store = SessionStore(data_dir)
    qtable: QTable | None = None
    if qtable_path and Path(qtable_path).exists():
        qtable = QTable.load(qtable_path)

    app = FastAPI(title="neutrodose dosing service", version="1")
    app.state.store = store
    app.state.qtable = qtable
    if console_dir and Path(console_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/console", StaticFiles(directory=console_dir, html=True),
                  name="console")

    def _get(session_id: str):
        try:
            return store.load(session_id)
        except KeyError:
            raise HTTPException(404, f"unknown session {session_id!r}")

    def _summary(state) -> dict:
        return {
            "session_id": state.session_id,
            "covariates": {
                "sex": state.cov.sex, "age_y": state.cov.age, "bsa_m2": state.cov.bsa,
                "bili_umol_L": state.cov.bili, "anc0_1e9_L": state.cov.anc0,
            },
            "class_index": class_of(state.cov).index,
            "n_events": len(state.events),
            "doses": state.doses,
            "observations": state.observations,
            "completed_cycles": state.completed_cycles(),
            "ensemble": {
                "m": state.ensemble.m,
                "t_h": state.ensemble.t,
                "ess": state.ensemble.ess,
                "degenerate_warnings": state.degenerate_warnings,
            },
            "grade_history": {
                "observed": state.observed_grade_history(),
                "expected-nadir": state.grade_history("expected-nadir"),
                "map-grade": state.grade_history("map-grade"),
            },
            "schema_version": state.schema_version,
        }

    @app.post("/v1/sessions", status_code=201)
    def create_session(payload: SessionCreateIn):
        try:
            cov = PatientCovariates(**payload.covariates.model_dump())
        except DomainError as err:
            raise HTTPException(422, str(err))
        state = store.create(
            cov, seed=payload.seed, m=payload.ensemble_size,
            request_id=payload.request_id,
        )
        return {"session_id": state.session_id, "seed": state.seed}

    @app.get("/v1/sessions/{session_id}")
    def get_session(session_id: str):
        return _summary(_get(session_id))

    @app.post("/v1/sessions/{session_id}/events")
    def record_event(session_id: str, payload: EventIn):
        _get(session_id)
        event = {"request_id": payload.request_id, "type": payload.type,
                 "time_h": payload.time_h}
        if payload.type == "dose":
            if payload.amount_mg is None:
                raise HTTPException(422, "dose events need amount_mg")
            event["amount_mg"] = payload.amount_mg
            if payload.duration_h:
                event["duration_h"] = payload.duration_h
        else:
            if payload.value is None:
                raise HTTPException(422, "observation events need value")
            event["value"] = payload.value
            event["kind"] = payload.kind
        try:
            state = store.append_event(session_id, event)
        except DomainError as err:
            raise HTTPException(409, str(err))
        return _summary(state)

    @app.get("/v1/sessions/{session_id}/recommendation")
    def recommendation(
        session_id: str,
        policy: str = Query(default="da"),
        seed: int = Query(default=0),
    ):
        if policy not in POLICY_CHOICES:
            raise HTTPException(422, f"policy must be one of {POLICY_CHOICES}")
        state = _get(session_id)
        cycle = state.completed_cycles() + 1
        if cycle > state.model.n_cycles:
            raise HTTPException(409, "therapy horizon is complete")
        t_c = (cycle - 1) * CYCLE_LENGTH_H
        state.ensure_at(t_c)
        bsa = state.cov.bsa
        report: dict = {"policy": policy, "cycle": cycle}

        try:
            if policy == "standard":
                doses = state.doses
                prev = doses[-1]["amount_mg"] if doses else None
                grades = state.observed_grade_history()
                prev_grade = grades[-1] if grades and prev is not None else None
                dose = standard_dose(prev, prev_grade, bsa)
                report["rule"] = (
                    "first cycle: 200 mg/m2 x BSA"
                    if prev is None else
                    "repeat previous dose, reduced 20 % after observed grade 4"
                )
            elif policy == "pk":
                grades = state.observed_grade_history()
                exposure = state.events and _last_exposure(state)
                prev_mgm2 = (
                    state.doses[-1]["amount_mg"] / bsa if state.doses else None
                )
                mgm2 = pk_guided_dose(
                    cycle, state.cov.sex, state.cov.age, prev_mgm2,
                    grades[-1] if grades else None,
                    exposure if exposure else None,
                )
                dose = mgm2 * bsa
                report["exposure_h"] = exposure
            elif policy in ("map-target", "map-utility"):
                dose, extra = _map_recommendation(state, cycle, policy.split("-")[1])
                report.update(extra)
            elif policy == "da":
                dose = da_guided_dose(
                    state.ensemble, state.model, cycle, bsa,
                    rng=np.random.default_rng(seed),
                )
                report["risk_curve"] = _risk_curve(state, cycle, bsa)
            elif policy == "rl":
                if qtable is None:
                    raise HTTPException(409, "no population QTable loaded")
                st = PatientState(class_of(state.cov), tuple(state.observed_grade_history()))
                decision = greedy_policy(qtable, st)
                dose = decision.dose_mgm2 * bsa
                gidx = _state_index(decision.state_used)
                report["q_row"] = qtable.q[gidx].tolist()
                report["visits"] = qtable.n[gidx].tolist()
                report["fallback_state"] = decision.fallback
            else:  # da-rl
                if qtable is None:
                    raise HTTPException(409, "no population QTable loaded")
                st = PatientState(
                    class_of(state.cov),
                    tuple(state.grade_history("expected-nadir")),
                )
                session = OnlinePlanSession(
                    population=qtable, state=st, ensemble=state.ensemble,
                    model=state.model, bsa=bsa, k_online=500,
                )
                result = plan_dose(session, seed=seed)
                dose = result.dose_mgm2 * bsa
                report.update(result.report)
        except UntrainedStateError as err:
            raise HTTPException(409, str(err))
        except DomainError as err:
            raise HTTPException(409, str(err))

        return {
            "dose_mg": dose,
            "dose_mgm2": dose / bsa,
            "report": report,
        }

    @app.get("/v1/sessions/{session_id}/whatif")
    def whatif(
        session_id: str,
        dose_mg: float = Query(ge=0),
        admin: bool = Query(default=False),
    ):
        state = _get(session_id)
        cycle = state.completed_cycles() + 1
        if cycle > state.model.n_cycles:
            raise HTTPException(409, "therapy horizon is complete")
        bsa = state.cov.bsa
        lo, hi = DEFAULT_DOSE_GRID.d_min * bsa, DEFAULT_DOSE_GRID.d_max * bsa
        if not admin and not lo - 1e-9 <= dose_mg <= hi + 1e-9:
            raise HTTPException(
                422, f"dose {dose_mg:.0f} mg outside [{lo:.0f}, {hi:.0f}] mg "
                f"(60-250 mg/m2 x BSA {bsa:.2f})"
            )
        t0 = (cycle - 1) * CYCLE_LENGTH_H
        state.ensure_at(t0)
        t1 = cycle * CYCLE_LENGTH_H
        particles = state.ensemble.particles
        thetas = state.model.occasion_thetas(particles, cycle)
        y0 = particles.state.copy()  # what-if never mutates the ensemble
        grid, outs, status = simulate_cycle_batch(
            thetas, y0, t0, t1, dose_mg, infusion_h=state.model.infusion_h,
            grid_dt=6.0, rtol=state.model.rtol, atol=state.model.atol,
        )
        if np.any(status != 0):
            raise HTTPException(500, "member simulation failed")
        nadirs = cycle_nadirs(outs, grid)
        w = state.ensemble.weights
        scale = state.model.grade_scale
        probs = np.zeros(5)
        for wi, ni in zip(w, nadirs):
            probs[scale.grade_of(ni)] += wi
        probs /= probs.sum()
        order = np.argsort(nadirs)
        cdf = np.cumsum(w[order])
        quant = {}
        for q in (0.05, 0.25, 0.5, 0.75, 0.95):
            quant[str(q)] = float(nadirs[order][np.searchsorted(cdf, q)])
        circ = outs[:, :, 8]
        bands = np.percentile(circ, [5, 50, 95], axis=0)
        return {
            "dose_mg": dose_mg,
            "cycle": cycle,
            "grade_probabilities": probs.tolist(),
            "nadir_quantiles_1e9_L": quant,
            "expected_nadir_1e9_L": float(w @ nadirs),
            "band_times_h": grid.tolist(),
            "circ_bands_1e9_L": {
                "p5": bands[0].tolist(), "p50": bands[1].tolist(),
                "p95": bands[2].tolist(),
            },
        }

    @app.get("/v1/qtables/{cls}/row")
    def qtable_row(cls: int, state: str = Query(default="")):
        if qtable is None:
            raise HTTPException(409, "no population QTable loaded")
        grades = tuple(int(g) for g in state.split(",") if g != "")
        try:
            st = PatientState(CovariateClass.from_index(cls), grades)
        except DomainError as err:
            raise HTTPException(422, str(err))
        gidx = _state_index(st)
        if gidx < 0:
            raise HTTPException(422, "state is a leaf; no dose decision exists")
        return {
            "class": cls,
            "grades": list(grades),
            "doses_mgm2": DEFAULT_DOSE_GRID.levels.tolist(),
            "q": qtable.q[gidx].tolist(),
            "visits": qtable.n[gidx].tolist(),
        }

    def _last_exposure(state) -> float | None:
        # drug concentration history of the previous cycle, from the posterior
        # mean trajectory; a stand-in for measured exposure when no drug TDM
        # samples were recorded
        cycle = state.completed_cycles()
        if cycle < 1:
            return None
        t0, t1 = (cycle - 1) * CYCLE_LENGTH_H, cycle * CYCLE_LENGTH_H
        doses = [
            d for d in state.doses if t0 - 1e-9 <= d["time_h"] < t1
        ]
        if not doses:
            return 0.0
        w = state.ensemble.weights
        particles = state.ensemble.particles
        thetas = state.model.occasion_thetas(particles, cycle)
        y0 = np.zeros((state.ensemble.m, 9))
        y0[:, 3:] = particles.circ0[:, None]
        # conservative reconstruction: simulate the dosed cycle only
        grid, outs, status = simulate_cycle_batch(
            thetas, y0, t0, t1, doses[-1]["amount_mg"],
            dose_time=doses[-1]["time_h"],
            infusion_h=doses[-1].get("duration_h") or state.model.infusion_h,
            grid_dt=1.0, rtol=state.model.rtol, atol=state.model.atol,
        )
        from ..pkpd import Trajectory, exposure_time_above

        exposures = []
        for j in range(outs.shape[0]):
            traj = Trajectory(times=grid, states=outs[j], conc=outs[j, :, 0] / thetas[j, 0])
            exposures.append(exposure_time_above(traj, 0.05))
        return float(w @ np.array(exposures))

    def _map_recommendation(state, cycle: int, mode: str):
        from ..inference import MapProblem, map_estimate
        from ..inference.filtering import Observation as Obs

        observations = [
            Obs(e["time_h"], e["value"], e["kind"])
            for e in state.observations if e["time_h"] > 0
        ]
        doses = [
            (d["time_h"], d["amount_mg"], d.get("duration_h") or state.model.infusion_h)
            for d in state.doses
        ]
        problem = MapProblem(
            state.cov, store.model, observations, doses,
            free_eta=("Slope",), free_kappa=False,
        )
        est = map_estimate(problem, maxfev=300, n_random_starts=0)
        start = np.zeros(9)
        start[3:] = est.params.circ0
        if cycle > 1 and doses:
            from ..pkpd import DoseEvent, DoseRegimen, simulate

            regimen = DoseRegimen(
                tuple(DoseEvent(*d) for d in doses), n_cycles=cycle - 1
            )
            traj = simulate(est.params, regimen, grid_dt=CYCLE_LENGTH_H,
                            rtol=1e-6, atol=1e-9, fast=True)
            start = traj.states[-1].copy()
        nadir_fn = map_nadir_fn(state.model, est.params, cycle, start)
        dose = map_guided_dose(nadir_fn, mode, state.cov.bsa)
        return dose, {
            "map_eta": est.eta.tolist(),
            "map_eta_circ0": est.eta_circ0,
            "map_objective": est.objective,
            "converged": est.converged,
        }

    def _risk_curve(state, cycle: int, bsa: float) -> dict:
        grades_fn = da_member_grades_fn(state.ensemble, state.model, cycle)
        objective = da_risk_objective(grades_fn, state.ensemble.weights)
        doses = DEFAULT_DOSE_GRID.levels * bsa
        return {
            "doses_mgm2": DEFAULT_DOSE_GRID.levels.tolist(),
            "risk": [objective(d) for d in doses],
        }

    return app


def _state_index(state: PatientState) -> int:
    from ..cohort import encode_state

    return encode_state(state)
