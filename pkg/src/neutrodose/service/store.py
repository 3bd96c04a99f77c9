"""Event-sourced session persistence.

Each session is an append-only JSON-lines event log (created / dose /
observation) plus a compressed ensemble snapshot per assimilated observation
for fast reload.  Session state is a pure fold over the log: replaying the
events (with the same persisted seed) reproduces the ensemble bit-exactly,
which the snapshot merely caches.
"""

from __future__ import annotations

import json
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..inference import (
    DegenerateUpdateError,
    Observation,
    PatientFilterModel,
    load_ensemble,
    pf_assimilate,
    posterior_expected_nadir,
    grade_probabilities,
    save_ensemble,
)
from ..pkpd import CYCLE_LENGTH_H, DomainError, PatientCovariates, PopulationModel


@dataclass
class SessionState:
    """Rebuilt (folded) view of one session's event log."""

    session_id: str
    cov: PatientCovariates
    seed: int
    m: int
    schema_version: int
    events: list[dict] = field(default_factory=list)
    model: PatientFilterModel | None = None
    ensemble = None
    degenerate_warnings: int = 0

    @property
    def doses(self) -> list[dict]:
        return [e for e in self.events if e["type"] == "dose"]

    @property
    def observations(self) -> list[dict]:
        return [e for e in self.events if e["type"] == "observation"]

    def last_event_time(self) -> float:
        times = [e["time_h"] for e in self.events if "time_h" in e]
        return max(times) if times else -1.0

    def completed_cycles(self) -> int:
        return min(
            int(self.last_event_time() // CYCLE_LENGTH_H)
            + (1 if self.last_event_time() % CYCLE_LENGTH_H > 0 else 0),
            self.model.n_cycles,
        ) if self.events else 0

    def ensure_at(self, t: float) -> None:
        """Advance the ensemble deterministically to time t (no data there).

        Reads that need cycle summaries call this; afterwards only events at
        times >= t can be assimilated (append-only timeline).
        """
        if self.ensemble.t < t - 1e-9:
            self.model.propagate(self.ensemble.particles, self.ensemble.t, t)
            self.ensemble.t = t

    def grade_history(self, mode: str) -> list[int]:
        """Estimated grades for completed cycles; the ensemble must be
        propagated through them."""
        self.ensure_at(math_floor_cycle(self.last_event_time()))
        grades = []
        scale = self.model.grade_scale
        for c in range(1, self.completed_cycles() + 1):
            window = ((c - 1) * CYCLE_LENGTH_H, c * CYCLE_LENGTH_H)
            if self.ensemble.t < window[1] - 1e-9:
                break
            if mode == "expected-nadir":
                grades.append(
                    scale.grade_of(
                        posterior_expected_nadir(self.ensemble, self.model, window)
                    )
                )
            else:
                probs = grade_probabilities(self.ensemble, self.model, window)
                grades.append(int(np.argmax(probs)))
        return grades

    def observed_grade_history(self) -> list[int]:
        """Grade per completed cycle from the latest neutrophil observation
        strictly inside the cycle (the day-0 draw belongs to the prior state)."""
        grades = []
        scale = self.model.grade_scale
        for c in range(1, self.completed_cycles() + 1):
            t0, t1 = (c - 1) * CYCLE_LENGTH_H, c * CYCLE_LENGTH_H
            best = None
            for e in self.observations:
                if e["kind"] == "neutrophil" and t0 < e["time_h"] <= t1:
                    best = e
            if best is None:
                break
            grades.append(scale.grade_of(best["value"]))
        return grades


class SessionStore:
    """Directory-backed store; per-session writes are serialized."""

    SCHEMA_VERSION = 1

    def __init__(self, data_dir: str | Path, model: PopulationModel | None = None):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.model = model if model is not None else PopulationModel()
        self._cache: dict[str, SessionState] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._global = threading.Lock()

    def _lock(self, session_id: str) -> threading.Lock:
        with self._global:
            return self._locks.setdefault(session_id, threading.Lock())

    def _dir(self, session_id: str) -> Path:
        return self.data_dir / session_id

    def _log_path(self, session_id: str) -> Path:
        return self._dir(session_id) / "events.jsonl"

    def _snapshot_path(self, session_id: str) -> Path:
        return self._dir(session_id) / "ensemble.json.gz"

    # -- creation ---------------------------------------------------------

    def create(
        self,
        cov: PatientCovariates,
        seed: int | None = None,
        m: int = 100,
        request_id: str | None = None,
    ) -> SessionState:
        if request_id:
            existing = self._created_registry().get(request_id)
            if existing:
                return self.load(existing)
        session_id = uuid.uuid4().hex[:12]
        seed = int(np.random.SeedSequence().entropy % 2**31) if seed is None else seed
        event = {
            "type": "created",
            "request_id": request_id or uuid.uuid4().hex,
            "covariates": {
                "sex": cov.sex, "age": cov.age, "bsa": cov.bsa,
                "bili": cov.bili, "anc0": cov.anc0,
            },
            "seed": seed,
            "m": m,
            "schema_version": self.SCHEMA_VERSION,
        }
        self._dir(session_id).mkdir(parents=True)
        with open(self._log_path(session_id), "w") as fh:
            fh.write(json.dumps(event) + "\n")
        if request_id:
            with self._global, open(self.data_dir / "created.jsonl", "a") as fh:
                fh.write(json.dumps({"request_id": request_id,
                                     "session_id": session_id}) + "\n")
        state = self._fold(session_id, [event])
        self._cache[session_id] = state
        return state

    def _created_registry(self) -> dict[str, str]:
        path = self.data_dir / "created.jsonl"
        if not path.exists():
            return {}
        registry = {}
        for line in path.read_text().splitlines():
            if line.strip():
                doc = json.loads(line)
                registry[doc["request_id"]] = doc["session_id"]
        return registry

    # -- event folding -------------------------------------------------------

    def _init_state(self, session_id: str, created: dict) -> SessionState:
        cov = PatientCovariates(**created["covariates"])
        state = SessionState(
            session_id=session_id,
            cov=cov,
            seed=created["seed"],
            m=created["m"],
            schema_version=created["schema_version"],
            events=[created],
        )
        state.model = PatientFilterModel(cov, self.model)
        rng = np.random.default_rng(np.random.SeedSequence(state.seed, spawn_key=(0,)))
        state.ensemble = state.model.new_ensemble(state.m, rng)
        return state

    def _apply(self, state: SessionState, event: dict) -> None:
        """Apply one dose/observation event; assimilation RNG is keyed by the
        event index so replay is bit-exact."""
        etype = event["type"]
        if etype == "dose":
            state.model.record_dose(
                event["time_h"], event["amount_mg"], event.get("duration_h")
            )
        elif etype == "observation":
            obs = Observation(event["time_h"], event["value"], event["kind"])
            rng = np.random.default_rng(
                np.random.SeedSequence(state.seed, spawn_key=(len(state.events),))
            )
            try:
                pf_assimilate(state.ensemble, obs, state.model, rng)
            except DegenerateUpdateError:
                state.degenerate_warnings += 1
        else:
            raise DomainError(f"unknown event type {etype!r}")
        state.events.append(event)

    def _fold(self, session_id: str, events: list[dict]) -> SessionState:
        state = self._init_state(session_id, events[0])
        for event in events[1:]:
            self._apply(state, event)
        return state

    # -- loading -----------------------------------------------------------------

    def load(self, session_id: str) -> SessionState:
        cached = self._cache.get(session_id)
        if cached is not None:
            return cached
        path = self._log_path(session_id)
        if not path.exists():
            raise KeyError(session_id)
        events = [json.loads(line) for line in path.read_text().splitlines() if line]
        state = self._fold(session_id, events)
        snap = self._snapshot_path(session_id)
        if snap.exists():
            # snapshot is a cache of the fold; prefer it only if it is ahead
            loaded = load_ensemble(snap)
            if loaded.t >= state.ensemble.t - 1e-9:
                state.ensemble = loaded
        self._cache[session_id] = state
        return state

    def exists(self, session_id: str) -> bool:
        return session_id in self._cache or self._log_path(session_id).exists()

    # -- appends ---------------------------------------------------------------

    def append_event(self, session_id: str, event: dict) -> SessionState:
        """Append one event idempotently (by request_id) and persist."""
        with self._lock(session_id):
            state = self.load(session_id)
            rid = event.get("request_id")
            if rid and any(e.get("request_id") == rid for e in state.events):
                return state
            t = event.get("time_h", 0.0)
            if t < state.last_event_time() - 1e-9 or t < state.ensemble.t - 1e-9:
                raise DomainError(
                    f"event at t={t} h precedes the recorded timeline "
                    f"(last event {state.last_event_time()} h, filter at "
                    f"{state.ensemble.t} h); events are append-only"
                )
            self._apply(state, event)
            with open(self._log_path(session_id), "a") as fh:
                fh.write(json.dumps(event) + "\n")
            if event["type"] == "observation":
                save_ensemble(self._snapshot_path(session_id), state.ensemble)
            return state


def math_floor_cycle(t: float) -> float:
    import math

    if t <= 0:
        return 0.0
    return math.floor((t - 1e-9) / CYCLE_LENGTH_H + 1) * CYCLE_LENGTH_H
