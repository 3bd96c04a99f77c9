"""Patient-specific state-space model for the particle filter.

Particles live on the augmented state-parameter space: each member carries
its random effects (eta, eta_circ0, per-cycle kappa), the derived baseline,
its current ODE state, and the history of circulating-neutrophil curves
(for smoothed nadir summaries).  Propagation is the deterministic PK/PD
simulation under the administered doses; all stochasticity enters through
the parameter draws and the observation model.
"""

from __future__ import annotations

import gzip
import json
import math
from dataclasses import dataclass, field

import numpy as np

from ..cohort import DEFAULT_GRADE_SCALE, GradeScale, N_CYCLES
from ..pkpd import (
    CYCLE_LENGTH_H,
    DEFAULT_INFUSION_H,
    ETA_NAMES,
    KAPPA_NAMES,
    MG_TO_UMOL,
    DomainError,
    PatientCovariates,
    PopulationModel,
    Trajectory,
    individualize,
    nadir as traj_nadir,
)
from ..pkpd.odecore import C1_LINEAR_UM, NSTATE, STATUS_OK, _simulate_span_batch
from ..pkpd.simulate import _BATCH_LOCK
from .filtering import Observation, ParticleEnsemble

DEFAULT_M = 100
REJUVENATION_H = 0.1  # jitter scale relative to the weighted posterior spread


@dataclass
class PatientParticles:
    """Array-of-members payload; all arrays share the leading M dimension."""

    eta: np.ndarray           # (M, 7)
    eta_circ0: np.ndarray     # (M,)
    kappa: np.ndarray         # (M, C, 2)
    circ0: np.ndarray         # (M,)
    state: np.ndarray         # (M, 9)
    hist_times: list[np.ndarray] = field(default_factory=list)
    hist_circ: list[np.ndarray] = field(default_factory=list)   # (M, n_k)

    @property
    def m(self) -> int:
        return len(self.circ0)


class PatientFilterModel:
    """State-space model contract bound to one patient's covariates and doses."""

    def __init__(
        self,
        cov: PatientCovariates,
        model: PopulationModel,
        y0: float | None = None,
        n_cycles: int = N_CYCLES,
        cycle_length_h: float = CYCLE_LENGTH_H,
        infusion_h: float = DEFAULT_INFUSION_H,
        grade_scale: GradeScale = DEFAULT_GRADE_SCALE,
        rtol: float = 1e-6,
        atol: float = 1e-9,
        grid_dt: float = 1.0,
        fast: bool = True,
    ):
        self.cov = cov
        self.model = model
        self.y0 = cov.anc0 if y0 is None else float(y0)
        self.n_cycles = n_cycles
        self.cycle_length_h = cycle_length_h
        self.infusion_h = infusion_h
        self.grade_scale = grade_scale
        self.rtol = rtol
        self.atol = atol
        self.grid_dt = grid_dt
        self.fast = fast
        self.doses: list[tuple[float, float, float]] = []  # (time, mg, duration)

    # -- dosing log -------------------------------------------------------

    def record_dose(self, time_h: float, amount_mg: float,
                    duration_h: float | None = None) -> None:
        if amount_mg < 0:
            raise DomainError("dose amount must be >= 0")
        self.doses.append(
            (time_h, amount_mg, self.infusion_h if duration_h is None else duration_h)
        )
        self.doses.sort()

    def cycle_of(self, t: float) -> int:
        """1-based cycle containing time t (boundary belongs to the next cycle)."""
        return min(int(t // self.cycle_length_h) + 1, self.n_cycles)

    # -- particle initialization ------------------------------------------

    def init_particles(self, m: int, rng: np.random.Generator) -> PatientParticles:
        omega = np.sqrt(np.asarray(self.model.omega2))
        pi = np.sqrt(np.asarray(self.model.pi2))
        eta = rng.standard_normal((m, len(ETA_NAMES))) * omega
        eta_circ0 = rng.standard_normal(m)
        kappa = rng.standard_normal((m, self.n_cycles, len(KAPPA_NAMES))) * pi
        circ0 = self.y0 * np.exp(self.model.sigma_pd * eta_circ0)
        state = np.zeros((m, NSTATE))
        state[:, 3:] = circ0[:, None]
        return PatientParticles(
            eta=eta, eta_circ0=eta_circ0, kappa=kappa, circ0=circ0, state=state
        )

    def new_ensemble(self, m: int, rng: np.random.Generator) -> ParticleEnsemble:
        return ParticleEnsemble(
            particles=self.init_particles(m, rng),
            weights=np.full(m, 1.0 / m),
            t=0.0,
        )

    # -- dynamics ----------------------------------------------------------

    def occasion_thetas(self, particles: PatientParticles, cycle: int) -> np.ndarray:
        """Per-member parameter vectors for one cycle, (M, 13)."""
        m = particles.m
        e = particles.eta
        base = individualize(self.cov, self.model, n_cycles=1).theta[0]
        thetas = np.tile(base, (m, 1))
        k = particles.kappa[:, cycle - 1, :]
        thetas[:, 0] = self.model.v1 * np.exp(k[:, 0])
        thetas[:, 1] = self.model.v3 * np.exp(e[:, 0])
        thetas[:, 3] = base[3] * np.exp(e[:, 1] + k[:, 1])
        thetas[:, 4] = self.model.km_tr * np.exp(e[:, 2])
        thetas[:, 5] = self.model.vm_tr * np.exp(e[:, 3])
        thetas[:, 6] = self.model.k21 * np.exp(e[:, 4])
        thetas[:, 7] = self.model.q * np.exp(e[:, 5])
        thetas[:, 9] = self.model.slope * np.exp(e[:, 6])
        thetas[:, 12] = particles.circ0
        return thetas

    def _infusions_between(self, t0: float, t1: float):
        starts, ends, rates = [], [], []
        for time_h, mg, dur in self.doses:
            if t0 - 1e-9 <= time_h < t1 - 1e-9 and mg > 0:
                starts.append(time_h)
                ends.append(time_h + dur)
                rates.append(mg * MG_TO_UMOL / dur)
        return np.array(starts), np.array(ends), np.array(rates)

    def propagate(
        self,
        particles: PatientParticles,
        t0: float,
        t1: float,
        rng: np.random.Generator | None = None,
        record_history: bool = True,
    ) -> None:
        """Deterministically advance all members from t0 to t1 under the
        administered doses, splitting at cycle boundaries (occasion switches)."""
        while t0 < t1 - 1e-9:
            cyc = self.cycle_of(t0)
            seg_end = min(t1, cyc * self.cycle_length_h)
            if seg_end <= t0 + 1e-9:
                seg_end = t1
            thetas = self.occasion_thetas(particles, cyc)
            starts, ends, rates = self._infusions_between(t0, seg_end)
            m = particles.m
            rates_m = np.tile(rates, (m, 1)) if rates.size else np.zeros((m, 0))
            n = max(1, int(math.ceil((seg_end - t0) / self.grid_dt)))
            grid = np.linspace(t0, seg_end, n + 1)
            outs = np.empty((m, grid.size, NSTATE))
            status = np.zeros(m, dtype=np.int64)
            with _BATCH_LOCK:
                _simulate_span_batch(
                    particles.state, thetas, t0, seg_end, starts, ends,
                    np.ascontiguousarray(rates_m), grid, outs, status,
                    self.rtol, self.atol, C1_LINEAR_UM if self.fast else 0.0,
                )
            if np.any(status != STATUS_OK):
                bad = int(np.flatnonzero(status != STATUS_OK)[0])
                raise RuntimeError(
                    f"particle {bad} simulation failed in [{t0}, {seg_end}]"
                )
            if record_history:
                particles.hist_times.append(grid)
                particles.hist_circ.append(outs[:, :, 8].copy())
            t0 = seg_end

    # -- observation model --------------------------------------------------

    def log_likelihood(self, particles: PatientParticles, obs: Observation) -> np.ndarray:
        if obs.kind == "neutrophil":
            h = particles.state[:, 8]
            sigma = self.model.sigma_pd
        elif obs.kind == "drug":
            cyc = self.cycle_of(obs.time_h)
            v1 = self.model.v1 * np.exp(particles.kappa[:, cyc - 1, 0])
            h = particles.state[:, 0] / v1
            sigma = self.model.sigma_pk
        else:
            raise DomainError(f"unknown observation kind {obs.kind!r}")
        with np.errstate(divide="ignore", invalid="ignore"):
            res = np.log(obs.value) - np.log(h)
            ll = -0.5 * (res / sigma) ** 2 - math.log(sigma)
        ll[~np.isfinite(ll)] = -np.inf
        return ll

    # -- resampling support ---------------------------------------------------

    def take(self, particles: PatientParticles, idx: np.ndarray) -> None:
        particles.eta = particles.eta[idx]
        particles.eta_circ0 = particles.eta_circ0[idx]
        particles.kappa = particles.kappa[idx]
        particles.circ0 = particles.circ0[idx]
        particles.state = particles.state[idx]
        particles.hist_circ = [h[idx] for h in particles.hist_circ]

    def resample(
        self,
        particles: PatientParticles,
        pre_weights: np.ndarray,
        idx: np.ndarray,
        rng: np.random.Generator,
    ) -> None:
        """Systematic-resampling copy followed by rejuvenation jitter.

        Jitter ~ N(0, h^2 * Cov_hat) on the log-scale effect vector, with
        Cov_hat the weighted empirical covariance before resampling and
        h = 0.1; only effects of occasions already started are perturbed.
        """
        t = particles.hist_times[-1][-1] if particles.hist_times else 0.0
        c_used = self.cycle_of(t) if t > 0 else 1
        n_eta = particles.eta.shape[1]
        v = np.concatenate(
            [
                particles.eta,
                particles.eta_circ0[:, None],
                particles.kappa[:, :c_used, :].reshape(particles.m, -1),
            ],
            axis=1,
        )
        mean = pre_weights @ v
        centered = v - mean
        cov = (centered * pre_weights[:, None]).T @ centered
        d = v.shape[1]
        try:
            chol = np.linalg.cholesky(cov + 1e-12 * np.eye(d))
        except np.linalg.LinAlgError:
            chol = np.diag(np.sqrt(np.maximum(np.diag(cov), 0.0)))

        self.take(particles, idx)
        jitter = REJUVENATION_H * (rng.standard_normal((particles.m, d)) @ chol.T)
        v_new = v[idx] + jitter
        particles.eta = v_new[:, :n_eta]
        particles.eta_circ0 = v_new[:, n_eta]
        particles.kappa[:, :c_used, :] = v_new[:, n_eta + 1:].reshape(
            particles.m, c_used, -1
        )
        particles.circ0 = self.y0 * np.exp(self.model.sigma_pd * particles.eta_circ0)

    # -- posterior summaries ---------------------------------------------------

    def member_nadirs(
        self, particles: PatientParticles, window: tuple[float, float]
    ) -> np.ndarray:
        """Per-member minimum Circ over the window, from carried histories,
        refined by quadratic interpolation around the grid minimum."""
        t0, t1 = window
        times, curves = [], []
        for grid, circ in zip(particles.hist_times, particles.hist_circ):
            mask = (grid >= t0 - 1e-9) & (grid <= t1 + 1e-9)
            if mask.any():
                times.append(grid[mask])
                curves.append(circ[:, mask])
        if not times:
            raise DomainError(f"particle histories do not cover [{t0}, {t1}]")
        t = np.concatenate(times)
        c = np.concatenate(curves, axis=1)
        order = np.argsort(t, kind="stable")
        t = t[order]
        c = c[:, order]
        res = np.empty(particles.m)
        for j in range(particles.m):
            traj = Trajectory(times=t, states=_circ_only_states(c[j]), conc=c[j])
            res[j] = traj_nadir(traj, (t[0], t[-1]))
        return res


def _circ_only_states(circ: np.ndarray) -> np.ndarray:
    states = np.zeros((circ.size, NSTATE))
    states[:, 8] = circ
    return states


def posterior_expected_nadir(
    ensemble: ParticleEnsemble, model: PatientFilterModel,
    window: tuple[float, float],
) -> float:
    """Weighted mean of member nadirs over the smoothed histories."""
    nadirs = model.member_nadirs(ensemble.particles, window)
    return float(ensemble.weights @ nadirs)


def grade_probabilities(
    ensemble: ParticleEnsemble, model: PatientFilterModel,
    window: tuple[float, float],
) -> np.ndarray:
    """Posterior probability of each neutropenia grade 0..4 for the window."""
    nadirs = model.member_nadirs(ensemble.particles, window)
    probs = np.zeros(5)
    for w, n in zip(ensemble.weights, nadirs):
        probs[model.grade_scale.grade_of(n)] += w
    return probs / probs.sum()


def map_grade(
    ensemble: ParticleEnsemble, model: PatientFilterModel,
    window: tuple[float, float],
) -> int:
    """Grade with the highest posterior weight; ties go to the lower grade."""
    return int(np.argmax(grade_probabilities(ensemble, model, window)))


# -- serialization --------------------------------------------------------------


def ensemble_to_json(ensemble: ParticleEnsemble) -> dict:
    p = ensemble.particles
    return {
        "t": ensemble.t,
        "weights": ensemble.weights.tolist(),
        "eta": p.eta.tolist(),
        "eta_circ0": p.eta_circ0.tolist(),
        "kappa": p.kappa.tolist(),
        "circ0": p.circ0.tolist(),
        "state": p.state.tolist(),
        "hist_times": [t.tolist() for t in p.hist_times],
        "hist_circ": [c.tolist() for c in p.hist_circ],
    }


def ensemble_from_json(doc: dict) -> ParticleEnsemble:
    particles = PatientParticles(
        eta=np.array(doc["eta"]),
        eta_circ0=np.array(doc["eta_circ0"]),
        kappa=np.array(doc["kappa"]),
        circ0=np.array(doc["circ0"]),
        state=np.array(doc["state"]),
        hist_times=[np.array(t) for t in doc["hist_times"]],
        hist_circ=[np.array(c) for c in doc["hist_circ"]],
    )
    return ParticleEnsemble(
        particles=particles, weights=np.array(doc["weights"]), t=doc["t"]
    )


def save_ensemble(path, ensemble: ParticleEnsemble) -> None:
    with gzip.open(path, "wt") as fh:
        json.dump(ensemble_to_json(ensemble), fh)


def load_ensemble(path) -> ParticleEnsemble:
    with gzip.open(path, "rt") as fh:
        return ensemble_from_json(json.load(fh))
