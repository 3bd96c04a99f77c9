"""Generic particle filter with systematic resampling and rejuvenation.

The filter is written against a small state-space model contract so the same
update code runs on conjugate toy models (exact-filter oracles in the tests)
and on the PK/PD patient model:

    model.log_likelihood(particles, obs) -> (M,) log p(obs | particle)
    model.propagate(particles, t0, t1, rng)   advance particles in place
    model.take(particles, idx)                reorder/copy rows after resampling
    model.resample(particles, pre_weights, idx, rng)
        optional override of the resampling step (e.g. to add rejuvenation
        jitter computed from the pre-resampling weighted spread); the default
        is plain take().

Smoothing is realised by history carrying: each particle keeps its full state
history, resampling copies histories, and smoothed summaries use the final
weights over those histories.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any

import numpy as np


class DegenerateUpdateError(RuntimeError):
    """All particle likelihoods vanished; the update is uninformative."""


@dataclass(frozen=True)
class Observation:
    time_h: float
    value: float
    kind: str = "neutrophil"  # or "drug"


@dataclass
class ParticleEnsemble:
    """Weighted particle set; weights are kept normalized to sum 1."""

    particles: Any
    weights: np.ndarray
    t: float = 0.0

    @property
    def m(self) -> int:
        return len(self.weights)

    @property
    def ess(self) -> float:
        return float(1.0 / np.sum(self.weights**2))

    def normalized(self) -> None:
        s = self.weights.sum()
        if not np.isfinite(s) or s <= 0:
            raise DegenerateUpdateError("weight sum is not positive and finite")
        self.weights = self.weights / s


def systematic_resample(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Low-variance systematic resampling; returns ancestor indices."""
    m = len(weights)
    positions = (np.arange(m) + rng.uniform()) / m
    cumulative = np.cumsum(weights)
    cumulative[-1] = 1.0  # guard against round-off
    return np.searchsorted(cumulative, positions).astype(np.int64)


def pf_assimilate(
    ensemble: ParticleEnsemble,
    obs: Observation,
    model: Any,
    rng: np.random.Generator,
    ess_fraction: float = 0.5,
) -> ParticleEnsemble:
    """Assimilate one observation: propagate, reweight, resample if needed.

    Raises DegenerateUpdateError when every particle has numerically zero
    likelihood; the ensemble is left propagated but unweighted in that case so
    the caller can fall back to prior propagation.
    """
    if obs.time_h < ensemble.t - 1e-9:
        raise ValueError(
            f"observation at t={obs.time_h} precedes ensemble time {ensemble.t}"
        )
    if obs.time_h > ensemble.t:
        model.propagate(ensemble.particles, ensemble.t, obs.time_h, rng)
        ensemble.t = obs.time_h

    loglik = np.asarray(model.log_likelihood(ensemble.particles, obs), dtype=float)
    finite = np.isfinite(loglik)
    if not finite.any():
        raise DegenerateUpdateError(
            f"all particle likelihoods vanished at t={obs.time_h}"
        )
    shifted = np.where(finite, loglik - loglik[finite].max(), -np.inf)
    new_w = ensemble.weights * np.exp(shifted)
    s = new_w.sum()
    if not np.isfinite(s) or s <= 0:
        raise DegenerateUpdateError(
            f"all particle likelihoods vanished at t={obs.time_h}"
        )
    ensemble.weights = new_w / s

    if ensemble.ess < ess_fraction * ensemble.m:
        pre_weights = ensemble.weights.copy()
        idx = systematic_resample(ensemble.weights, rng)
        resample = getattr(model, "resample", None)
        if resample is not None:
            resample(ensemble.particles, pre_weights, idx, rng)
        else:
            model.take(ensemble.particles, idx)
        ensemble.weights = np.full(ensemble.m, 1.0 / ensemble.m)
    return ensemble
