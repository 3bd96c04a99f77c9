"""Decision-time planning on the individualized posterior.

At each dosing decision a fresh tree search runs from the patient's current
state: episodes draw a member from the posterior particle ensemble, simulate
the remaining cycles, and back returns up a local action-value table that
covers only the future-reachable subtree.  Selection uses PUCT with prior
action probabilities obtained by a Boltzmann transform (plus kernel
smoothing) of the population table's rows.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cohort import (
    DEFAULT_GRADE_SCALE,
    N_CYCLES,
    N_GRADES,
    GradeScale,
    PatientState,
    encode_state,
)
from .inference import ParticleEnsemble, grade_probabilities, posterior_expected_nadir
from .inference.patient import PatientFilterModel
from .planner import (
    TERMINAL,
    PlannerConfig,
    QTable,
    epsilon,
    run_mcts_episode,
)
from .policies import DoseGrid, RewardSpec
from .pkpd import DomainError, cycle_nadirs, simulate_cycle_batch


def boltzmann_priors(
    q_row: np.ndarray,
    n_row: np.ndarray | None = None,
    bandwidth: float = 2.0,
) -> np.ndarray:
    """Prior action probabilities from a population action-value row.

    Unvisited doses are imputed with the row minimum of the visited ones
    before the softmax, so untried doses keep low but positive mass; a
    Gaussian kernel over the dose axis (bandwidth in grid steps) smooths the
    probabilities, which are then renormalized.
    """
    q_eff = np.asarray(q_row, dtype=float).copy()
    if n_row is not None:
        visited = np.asarray(n_row) > 0
        if not visited.any():
            raise DomainError("prior row needs at least one visited dose")
        q_eff[~visited] = q_eff[visited].min()
    p = np.exp(q_eff - q_eff.max())
    p /= p.sum()
    if bandwidth and bandwidth > 0:
        idx = np.arange(len(p))
        kernel = np.exp(-0.5 * ((idx[:, None] - idx[None, :]) / bandwidth) ** 2)
        p = kernel @ p
        p /= p.sum()
    return p


def estimate_state(
    ensemble: ParticleEnsemble,
    model: PatientFilterModel,
    previous: PatientState,
    window: tuple[float, float],
    mode: str = "expected-nadir",
    scale: GradeScale = DEFAULT_GRADE_SCALE,
) -> PatientState:
    """Append the cycle's estimated grade to the state.

    "expected-nadir" grades the posterior expectation of the nadir (default);
    "map-grade" takes the grade with the highest posterior weight.
    """
    if mode == "expected-nadir":
        grade = scale.grade_of(posterior_expected_nadir(ensemble, model, window))
    elif mode == "map-grade":
        grade = int(np.argmax(grade_probabilities(ensemble, model, window)))
    else:
        raise DomainError(f"unknown state-estimate mode {mode!r}")
    return previous.child(grade)


class _LocalTree:
    """Indexing of the future-reachable subtree below a root state.

    Depth m (0-based) holds the states whose grade history extends the root
    by m grades; only Sum_{m<=depth_max} 5^m nodes are allocated.
    """

    def __init__(self, root: PatientState, n_cycles: int = N_CYCLES):
        self.root = root
        self.depth_max = n_cycles - 1 - len(root.grades)
        if self.depth_max < 0:
            raise DomainError("therapy is complete; no decision states remain")
        self.offsets = [0]
        for m in range(self.depth_max + 1):
            self.offsets.append(self.offsets[-1] + N_GRADES**m)
        self.n_states = self.offsets[-1]

    def encode(self, suffix: tuple[int, ...]) -> int:
        val = 0
        for g in suffix:
            val = val * N_GRADES + g
        return self.offsets[len(suffix)] + val

    def global_state(self, suffix: tuple[int, ...]) -> PatientState:
        return PatientState(self.root.cls, (*self.root.grades, *suffix))


@dataclass
class _MemberEpisode:
    state_idx: int
    member: int
    phys_state: np.ndarray
    suffix: tuple[int, ...] = ()
    depth: int = 0


class PosteriorMemberEnv:
    """Episode environment that replays posterior members over future cycles.

    Each reset draws one member proportionally to the ensemble weights; steps
    simulate the next cycle with that member's occasion parameters and grade
    the model-predicted nadir (planning is model-based, so no observation
    noise enters).
    """

    def __init__(
        self,
        ensemble: ParticleEnsemble,
        model: PatientFilterModel,
        tree: _LocalTree,
        dose_grid: DoseGrid,
        reward_spec: RewardSpec,
        scale: GradeScale,
        bsa: float,
    ):
        self.ensemble = ensemble
        self.model = model
        self.tree = tree
        self.dose_grid = dose_grid
        self.reward_spec = reward_spec
        self.scale = scale
        self.bsa = bsa
        self.c0 = len(tree.root.grades)
        particles = ensemble.particles
        self._state0 = particles.state
        self._thetas = [
            model.occasion_thetas(particles, c)
            for c in range(self.c0 + 1, model.n_cycles + 1)
        ]

    @property
    def n_states(self) -> int:
        return self.tree.n_states

    @property
    def n_actions(self) -> int:
        return self.dose_grid.n

    @property
    def n_cycles(self) -> int:
        return self.tree.depth_max + 1

    def reset(self, rng: np.random.Generator) -> _MemberEpisode:
        j = int(rng.choice(self.ensemble.m, p=self.ensemble.weights))
        return _MemberEpisode(
            state_idx=self.tree.encode(()),
            member=j,
            phys_state=self._state0[j].copy(),
        )

    def step(
        self, ctx: _MemberEpisode, action: int, rng: np.random.Generator
    ) -> tuple[float, int]:
        cycle = self.c0 + ctx.depth + 1
        t0 = (cycle - 1) * self.model.cycle_length_h
        t1 = cycle * self.model.cycle_length_h
        dose_mg = float(self.dose_grid.levels[action]) * self.bsa
        theta = self._thetas[ctx.depth][ctx.member][None, :]
        y0 = ctx.phys_state[None, :]
        grid, outs, status = simulate_cycle_batch(
            theta, y0, t0, t1, dose_mg, infusion_h=self.model.infusion_h,
            rtol=self.model.rtol, atol=self.model.atol,
        )
        if status[0] != 0:
            raise RuntimeError(f"member simulation failed in cycle {cycle}")
        ctx.phys_state = y0[0]
        grade = self.scale.grade_of(float(cycle_nadirs(outs, grid)[0]))
        ctx.suffix = (*ctx.suffix, grade)
        ctx.depth += 1
        r = self.reward_spec.reward(grade)
        if ctx.depth > self.tree.depth_max:
            ctx.state_idx = TERMINAL
        else:
            ctx.state_idx = self.tree.encode(ctx.suffix)
        return r, ctx.state_idx


@dataclass
class OnlinePlanSession:
    """One decision-time planning task bound to a patient's posterior."""

    population: QTable
    state: PatientState
    ensemble: ParticleEnsemble
    model: PatientFilterModel
    bsa: float
    config: PlannerConfig = field(default_factory=PlannerConfig)
    k_online: int = 2000
    prior_bandwidth: float = 2.0


@dataclass
class PlanResult:
    dose_mgm2: float
    action: int
    report: dict
    local: QTable


def plan_dose(
    session: OnlinePlanSession,
    seed: int = 0,
    use_priors: bool = True,
) -> PlanResult:
    """Run the decision-time tree search and return the greedy root dose.

    Episodes draw members from the posterior, PUCT guides selection with the
    population-derived priors, and the recommendation is the argmax of the
    local action values at the root (no exploration).  use_priors=False drops
    the prioritizing factor, reducing the search to plain UCT on the local
    tree (useful for reduction testing).
    """
    if session.ensemble.m == 0:
        raise DomainError("posterior ensemble is empty")
    tree = _LocalTree(session.state, session.config.n_cycles)
    env = PosteriorMemberEnv(
        ensemble=session.ensemble,
        model=session.model,
        tree=tree,
        dose_grid=session.config.dose_grid,
        reward_spec=session.config.reward_spec,
        scale=session.model.grade_scale,
        bsa=session.bsa,
    )
    local = QTable.zeros(tree.n_states, env.n_actions)
    c0 = len(session.state.grades)
    eps = np.array(
        [epsilon(c, session.config) for c in range(c0, session.config.n_cycles)]
    )

    prior_cache: dict[int, np.ndarray] = {}
    uniform_fallbacks: set[int] = set()

    def priors(local_idx: int) -> np.ndarray:
        row = prior_cache.get(local_idx)
        if row is None:
            suffix = _suffix_of(tree, local_idx)
            gidx = encode_state(tree.global_state(suffix))
            pop_n = session.population.n[gidx]
            if pop_n.sum() > 0:
                row = boltzmann_priors(
                    session.population.q[gidx], pop_n, session.prior_bandwidth
                )
            else:
                row = np.full(env.n_actions, 1.0 / env.n_actions)
                uniform_fallbacks.add(local_idx)
            prior_cache[local_idx] = row
        return row

    for ep in range(session.k_online):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(ep,)))
        run_mcts_episode(
            local.q, local.n, env, rng, eps, session.config.gamma,
            priors=priors if use_priors else None,
        )

    root = tree.encode(())
    visited = local.n[root] > 0
    if not visited.any():
        raise RuntimeError("no completed planning episodes")
    root_q = np.where(visited, local.q[root], -np.inf)
    action = int(np.argmax(root_q))
    report = {
        "state": {"class": session.state.cls.index, "grades": list(session.state.grades)},
        "k_online": session.k_online,
        "doses_mgm2": session.config.dose_grid.levels.tolist(),
        "prior_row": priors(root).tolist() if use_priors else None,
        "local_q": local.q[root].tolist(),
        "visits": local.n[root].tolist(),
        "chosen_action": action,
        "chosen_dose_mgm2": float(session.config.dose_grid.levels[action]),
        "uniform_prior_states": len(uniform_fallbacks),
    }
    return PlanResult(
        dose_mgm2=float(session.config.dose_grid.levels[action]),
        action=action,
        report=report,
        local=local,
    )


def _suffix_of(tree: _LocalTree, local_idx: int) -> tuple[int, ...]:
    m = 0
    while m < tree.depth_max and local_idx >= tree.offsets[m + 1]:
        m += 1
    val = local_idx - tree.offsets[m]
    suffix = [0] * m
    for i in range(m - 1, -1, -1):
        suffix[i] = val % N_GRADES
        val //= N_GRADES
    return tuple(suffix)
