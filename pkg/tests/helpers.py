"""Shared test fixtures: oracle models and toy planning environments."""

from __future__ import annotations

import numpy as np

from neutrodose.planner import TERMINAL


class LinearGaussianSSM:
    """Scalar linear-Gaussian state-space model for filter oracle tests.

    x_{k+1} = a x_k + N(0, q2);  y_k = x_k + N(0, r2).  Implements the
    particle-filter model contract; propagate treats (t0, t1) as one step per
    unit time.
    """

    def __init__(self, a=0.9, q2=0.5, x0_mean=0.0, x0_var=2.0, r2=0.4):
        self.a = a
        self.q2 = q2
        self.x0_mean = x0_mean
        self.x0_var = x0_var
        self.r2 = r2

    def init_particles(self, m, rng):
        return {"x": self.x0_mean + np.sqrt(self.x0_var) * rng.standard_normal(m)}

    def propagate(self, particles, t0, t1, rng):
        steps = int(round(t1 - t0))
        for _ in range(steps):
            particles["x"] = (
                self.a * particles["x"]
                + np.sqrt(self.q2) * rng.standard_normal(len(particles["x"]))
            )

    def log_likelihood(self, particles, obs):
        return -0.5 * (obs.value - particles["x"]) ** 2 / self.r2

    def take(self, particles, idx):
        particles["x"] = particles["x"][idx]

    def kalman_posterior(self, observations):
        """Exact filtering mean/variance after assimilating observations
        taken at integer times 1..n (one prediction step before each)."""
        mean, var = self.x0_mean, self.x0_var
        out = []
        for obs in observations:
            mean, var = self.a * mean, self.a**2 * var + self.q2
            k = var / (var + self.r2)
            mean = mean + k * (obs.value - mean)
            var = (1 - k) * var
            out.append((mean, var))
        return out


class FixedRewardEnv:
    """One-cycle toy: reward depends only on the chosen action."""

    def __init__(self, rewards):
        self.rewards = np.asarray(rewards, dtype=float)
        self.n_states = 1
        self.n_actions = len(rewards)
        self.n_cycles = 1

    class _Ctx:
        state_idx = 0

    def reset(self, rng):
        return self._Ctx()

    def step(self, ctx, action, rng):
        return float(self.rewards[action]), TERMINAL


class BernoulliBanditEnv:
    """Two-armed bandit embedded as a one-cycle tree."""

    def __init__(self, p=(0.9, 0.1)):
        self.p = p
        self.n_states = 1
        self.n_actions = len(p)
        self.n_cycles = 1

    class _Ctx:
        state_idx = 0

    def reset(self, rng):
        return self._Ctx()

    def step(self, ctx, action, rng):
        return float(rng.uniform() < self.p[action]), TERMINAL


class ChainEnv:
    """Deterministic multi-step toy: states 0..n-1, action a gives reward
    r[s][a] and moves to state s+1 (terminal after the last)."""

    def __init__(self, rewards):
        self.rewards = np.asarray(rewards, dtype=float)  # (n_states, n_actions)
        self.n_states, self.n_actions = self.rewards.shape
        self.n_cycles = self.n_states

    class _Ctx:
        def __init__(self):
            self.state_idx = 0

    def reset(self, rng):
        return self._Ctx()

    def step(self, ctx, action, rng):
        s = ctx.state_idx
        r = float(self.rewards[s, action])
        ctx.state_idx = s + 1 if s + 1 < self.n_states else TERMINAL
        return r, ctx.state_idx


class FakeNadirModel:
    """Stands in for PatientFilterModel in posterior-summary tests."""

    def __init__(self, nadirs, grade_scale=None):
        from neutrodose.cohort import DEFAULT_GRADE_SCALE

        self.nadirs = np.asarray(nadirs, dtype=float)
        self.grade_scale = grade_scale or DEFAULT_GRADE_SCALE

    def member_nadirs(self, particles, window):
        return self.nadirs.copy()
