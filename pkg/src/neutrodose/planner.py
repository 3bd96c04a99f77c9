"""Offline model-based planning: MCTS with UCT and tabular Q-planning.

The tree search operates on integer state indices so the same episode runner
serves the population QTable (all decision states of a covariate class) and
the per-patient online subtree (see the online module).  Environments follow
a small duck-typed contract:

    env.n_actions, env.n_cycles
    env.reset(rng) -> ctx            episode context with .state_idx
    env.step(ctx, action, rng) -> (reward, next_state_idx or TERMINAL)
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .cohort import (
    N_DECISION_STATES,
    DEFAULT_GRADE_SCALE,
    CovariateClass,
    GradeScale,
    PatientState,
    encode_state,
    sample_patient,
)
from .pkpd import (
    CYCLE_LENGTH_H,
    DEFAULT_INFUSION_H,
    DomainError,
    PopulationModel,
    cycle_nadirs,
    simulate_cycle_batch,
)
from .policies import DEFAULT_DOSE_GRID, DEFAULT_REWARD_SPEC, DoseGrid, RewardSpec

TERMINAL = -1


class UntrainedStateError(RuntimeError):
    """Requested a greedy dose from a table with no visits on the state path."""


@dataclass(frozen=True)
class PlannerConfig:
    episodes: int = 10_000
    gamma: float = 0.5
    c_uct: float = 3.0
    reward_spec: RewardSpec = DEFAULT_REWARD_SPEC
    dose_grid: DoseGrid = DEFAULT_DOSE_GRID
    n_cycles: int = 6

    def __post_init__(self) -> None:
        if not 0.0 <= self.gamma <= 1.0:
            raise DomainError("gamma must be in [0, 1]")
        if self.episodes < 1:
            raise DomainError("episodes must be >= 1")

    @property
    def return_bounds(self) -> tuple[float, float]:
        a, b = self.reward_spec.reward_bounds
        geom = sum(self.gamma**k for k in range(self.n_cycles))
        return a * geom, b * geom


def reward(grade: int, spec: RewardSpec = DEFAULT_REWARD_SPEC) -> float:
    """Immediate reward of a neutropenia grade."""
    return spec.reward(grade)


def discounted_return(rewards: np.ndarray | list[float], gamma: float) -> float:
    """G_c = sum_k gamma^(k-(c+1)) r_k over the remaining rewards."""
    g = 0.0
    for r in reversed(list(rewards)):
        g = r + gamma * g
    return g


def epsilon(cycle: int, config: PlannerConfig) -> float:
    """Cycle-dependent exploration magnitude from the return's Hoeffding range.

    epsilon(c) = c_UCT * sqrt(sum_{k=1}^{C-c} gamma^(k-1) (b-a)^2) for the
    reward bounds (a, b); zero at the horizon.
    """
    if not 0 <= cycle <= config.n_cycles:
        raise DomainError(f"cycle must be in [0, {config.n_cycles}]")
    a, b = config.reward_spec.reward_bounds
    span2 = (b - a) ** 2
    total = sum(config.gamma ** (k - 1) * span2
                for k in range(1, config.n_cycles - cycle + 1))
    return config.c_uct * np.sqrt(total)


def uct_select(q_row: np.ndarray, n_row: np.ndarray, eps: float) -> int:
    """argmax of q + eps * sqrt(N(s)) / (n + 1); ties go to the lowest dose."""
    total = n_row.sum()
    scores = q_row + eps * np.sqrt(total) / (n_row + 1.0)
    return int(np.argmax(scores))


def puct_select(
    q_row: np.ndarray, n_row: np.ndarray, prior_row: np.ndarray, eps: float
) -> int:
    """UCT with the exploration term weighted by prior action probabilities."""
    total = n_row.sum()
    scores = q_row + eps * prior_row * np.sqrt(total) / (n_row + 1.0)
    return int(np.argmax(scores))


@dataclass
class QTable:
    """Dense action-value table with visit counts."""

    q: np.ndarray  # (S, D) float64
    n: np.ndarray  # (S, D) int64
    meta: dict = field(default_factory=dict)

    @classmethod
    def zeros(cls, n_states: int, n_actions: int, meta: dict | None = None) -> "QTable":
        return cls(
            q=np.zeros((n_states, n_actions)),
            n=np.zeros((n_states, n_actions), dtype=np.int64),
            meta=meta or {},
        )

    def state_visits(self, s: int) -> int:
        return int(self.n[s].sum())

    MAGIC = b"NDQT1\n"

    def save(self, path: str | Path) -> None:
        header = dict(self.meta)
        header["shape"] = list(self.q.shape)
        blob = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(self.MAGIC)
            fh.write(struct.pack(">Q", len(blob)))
            fh.write(blob)
            fh.write(np.ascontiguousarray(self.q).tobytes())
            fh.write(np.ascontiguousarray(self.n).tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "QTable":
        with open(path, "rb") as fh:
            magic = fh.read(len(cls.MAGIC))
            if magic != cls.MAGIC:
                raise DomainError(f"{path} is not a QTable file")
            (hlen,) = struct.unpack(">Q", fh.read(8))
            meta = json.loads(fh.read(hlen).decode())
            s, d = meta.pop("shape")
            q = np.frombuffer(fh.read(s * d * 8), dtype=np.float64).reshape(s, d).copy()
            n = np.frombuffer(fh.read(s * d * 8), dtype=np.int64).reshape(s, d).copy()
        return cls(q=q, n=n, meta=meta)


def config_digest(config: PlannerConfig) -> str:
    doc = {
        "gamma": config.gamma,
        "c_uct": config.c_uct,
        "rewards": list(config.reward_spec.grade_rewards),
        "grid": [config.dose_grid.d_min, config.dose_grid.d_max, config.dose_grid.step],
        "n_cycles": config.n_cycles,
    }
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# -- episode runner -------------------------------------------------------------


def run_mcts_episode(
    q: np.ndarray,
    n: np.ndarray,
    env,
    rng: np.random.Generator,
    eps_by_depth: np.ndarray,
    gamma: float,
    priors: Callable[[int], np.ndarray] | None = None,
) -> tuple[list[tuple[int, int]], list[float]]:
    """One MCTS episode: select within the tree, expand one unvisited action,
    roll out uniformly at random, back-propagate incremental-mean returns.

    Returns the in-tree path and the realized rewards (one per cycle).
    """
    ctx = env.reset(rng)
    n_actions = env.n_actions
    path: list[tuple[int, int]] = []
    rewards: list[float] = []
    in_tree = True
    s = ctx.state_idx
    depth = 0
    while s != TERMINAL:
        if in_tree:
            n_row = n[s]
            unvisited = np.flatnonzero(n_row == 0)
            if unvisited.size:
                a = int(unvisited[rng.integers(unvisited.size)])
                in_tree = False
            elif priors is None:
                a = uct_select(q[s], n_row, eps_by_depth[depth])
            else:
                a = puct_select(q[s], n_row, priors(s), eps_by_depth[depth])
            path.append((s, a))
        else:
            a = int(rng.integers(n_actions))
        r, s = env.step(ctx, a, rng)
        rewards.append(r)
        depth += 1

    # back-propagate: G at depth j discounts rewards j.. with weight 1 on r_j
    g = 0.0
    returns = [0.0] * len(rewards)
    for j in range(len(rewards) - 1, -1, -1):
        g = rewards[j] + gamma * g
        returns[j] = g
    for j, (s, a) in enumerate(path):
        n[s, a] += 1
        q[s, a] += (returns[j] - q[s, a]) / n[s, a]
    return path, rewards


def mcts_train(
    env,
    config: PlannerConfig,
    seed: int,
    episodes: int | None = None,
    table: QTable | None = None,
    n_states: int | None = None,
    debug: bool = False,
) -> QTable:
    """Population MCTS training: one fresh virtual patient per episode.

    Episode RNG streams are keyed by (seed, episode) so training is
    bit-reproducible.  Realized returns are asserted against the reward
    bounds each episode.  debug=True additionally tracks exact batch means
    in table.meta["debug_sums"] for cross-checking the incremental updates.
    """
    episodes = config.episodes if episodes is None else episodes
    if table is None:
        table = QTable.zeros(
            n_states if n_states is not None else env.n_states, env.n_actions
        )
    eps = np.array([epsilon(c, config) for c in range(config.n_cycles)])
    lo, hi = config.return_bounds
    debug_sums: dict[tuple[int, int], tuple[float, int]] = {}

    for ep in range(episodes):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(ep,)))
        try:
            path, rewards = run_mcts_episode(
                table.q, table.n, env, rng, eps, config.gamma
            )
        except RuntimeError:
            table.meta["failed_episodes"] = table.meta.get("failed_episodes", 0) + 1
            continue
        g = discounted_return(rewards, config.gamma)
        if not (lo - 1e-12 <= g <= hi + 1e-12):
            raise AssertionError(
                f"episode {ep}: return {g} outside bounds [{lo}, {hi}]"
            )
        if debug:
            for j, (s, a) in enumerate(path):
                g_j = discounted_return(rewards[j:], config.gamma)
                tot, cnt = debug_sums.get((s, a), (0.0, 0))
                debug_sums[(s, a)] = (tot + g_j, cnt + 1)

    table.meta.setdefault("episodes", 0)
    table.meta["episodes"] += episodes
    table.meta["seed"] = seed
    table.meta["config"] = config_digest(config)
    if debug:
        table.meta["debug_sums"] = debug_sums
    return table


def q_planning(
    env,
    config: PlannerConfig,
    seed: int,
    episodes: int | None = None,
    alpha: float = 0.1,
    eps_greedy: float = 0.3,
    eps_decay: float = 1.0,
    table: QTable | None = None,
) -> QTable:
    """Tabular Q-planning with one-step backups and an epsilon-greedy policy.

    Backup: q <- q + alpha (R + gamma max_d' q(s', d') - q), with the empty
    max convention (0) on terminal transitions.
    """
    if not 0.0 < alpha <= 1.0:
        raise DomainError("alpha must be in (0, 1]")
    episodes = config.episodes if episodes is None else episodes
    if table is None:
        table = QTable.zeros(env.n_states, env.n_actions)
    eps = eps_greedy
    for ep in range(episodes):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(ep,)))
        ctx = env.reset(rng)
        s = ctx.state_idx
        while s != TERMINAL:
            if rng.uniform() < eps:
                a = int(rng.integers(env.n_actions))
            else:
                a = int(np.argmax(table.q[s]))
            r, s_next = env.step(ctx, a, rng)
            target = r if s_next == TERMINAL else r + config.gamma * table.q[s_next].max()
            table.q[s, a] += alpha * (target - table.q[s, a])
            table.n[s, a] += 1
            s = s_next
        eps *= eps_decay
    table.meta.setdefault("episodes", 0)
    table.meta["episodes"] += episodes
    table.meta["seed"] = seed
    table.meta["algorithm"] = "q-planning"
    return table


@dataclass(frozen=True)
class GreedyDecision:
    action: int
    dose_mgm2: float
    state_used: PatientState
    fallback: bool


def greedy_policy(
    table: QTable,
    state: PatientState,
    grid: DoseGrid = DEFAULT_DOSE_GRID,
) -> GreedyDecision:
    """Greedy dose: argmax of q among visited doses of the state.

    States never visited in training fall back to the nearest visited
    grade-history ancestor (flagged); a table with no visits anywhere on the
    path raises UntrainedStateError.
    """
    current = state
    while True:
        idx = encode_state(current)
        if idx != TERMINAL and table.n[idx].sum() > 0:
            row_q = np.where(table.n[idx] > 0, table.q[idx], -np.inf)
            a = int(np.argmax(row_q))
            return GreedyDecision(
                action=a,
                dose_mgm2=float(grid.levels[a]),
                state_used=current,
                fallback=current is not state,
            )
        if not current.grades:
            raise UntrainedStateError(
                f"no visits anywhere on the ancestor path of {state}"
            )
        current = current.parent()


# -- virtual patient environment ---------------------------------------------------


@dataclass
class EpisodeContext:
    state_idx: int
    cls: CovariateClass
    cov: object
    params: object
    phys_state: np.ndarray
    grades: list[int]
    cycle: int = 0


class VirtualPatientEnv:
    """Planning environment: fresh virtual patient each episode, one cycle per step.

    grade_source "observation" infers the cycle grade from a noisy neutrophil
    measurement on obs_day (matching how the policy will be applied);
    "model-nadir" uses the simulated nadir directly.
    """

    def __init__(
        self,
        cls: CovariateClass | int,
        model: PopulationModel | None = None,
        reward_spec: RewardSpec = DEFAULT_REWARD_SPEC,
        dose_grid: DoseGrid = DEFAULT_DOSE_GRID,
        grade_scale: GradeScale = DEFAULT_GRADE_SCALE,
        grade_source: str = "observation",
        obs_day: int = 15,
        n_cycles: int = 6,
        cycle_length_h: float = CYCLE_LENGTH_H,
        infusion_h: float = DEFAULT_INFUSION_H,
        rtol: float = 1e-6,
        atol: float = 1e-9,
    ):
        if grade_source not in ("observation", "model-nadir"):
            raise DomainError(f"unknown grade source {grade_source!r}")
        self.cls = CovariateClass.from_index(cls) if isinstance(cls, int) else cls
        self.model = PopulationModel() if model is None else model
        self.reward_spec = reward_spec
        self.dose_grid = dose_grid
        self.grade_scale = grade_scale
        self.grade_source = grade_source
        self.obs_day = obs_day
        self.n_cycles = n_cycles
        self.cycle_length_h = cycle_length_h
        self.infusion_h = infusion_h
        self.rtol = rtol
        self.atol = atol

    @property
    def n_states(self) -> int:
        return N_DECISION_STATES

    @property
    def n_actions(self) -> int:
        return self.dose_grid.n

    def reset(self, rng: np.random.Generator) -> EpisodeContext:
        cov, params = sample_patient(rng, self.model, self.cls, n_cycles=self.n_cycles)
        phys = np.zeros(9)
        phys[3:] = params.circ0
        state = PatientState(self.cls, ())
        return EpisodeContext(
            state_idx=encode_state(state),
            cls=self.cls,
            cov=cov,
            params=params,
            phys_state=phys,
            grades=[],
        )

    def step(
        self, ctx: EpisodeContext, action: int, rng: np.random.Generator
    ) -> tuple[float, int]:
        cycle = ctx.cycle + 1
        dose_mg = float(self.dose_grid.levels[action]) * ctx.cov.bsa
        t0 = (cycle - 1) * self.cycle_length_h
        t1 = cycle * self.cycle_length_h
        theta = ctx.params.occasion(cycle)[None, :]
        y0 = ctx.phys_state[None, :]
        grid, outs, status = simulate_cycle_batch(
            theta, y0, t0, t1, dose_mg, infusion_h=self.infusion_h,
            rtol=self.rtol, atol=self.atol,
        )
        if status[0] != 0:
            raise RuntimeError(f"episode simulation failed in cycle {cycle}")
        ctx.phys_state = y0[0]

        if self.grade_source == "observation":
            t_obs = t0 + 24.0 * self.obs_day
            gi = int(np.searchsorted(grid, t_obs))
            h = outs[0, gi, 8]
            value = h * np.exp(self.model.sigma_pd * rng.standard_normal())
            grade = self.grade_scale.grade_of(value)
        else:
            grade = self.grade_scale.grade_of(float(cycle_nadirs(outs, grid)[0]))

        ctx.grades.append(grade)
        ctx.cycle = cycle
        r = self.reward_spec.reward(grade)
        state = PatientState(self.cls, tuple(ctx.grades))
        nxt = TERMINAL if state.is_leaf or cycle >= self.n_cycles else encode_state(state)
        ctx.state_idx = nxt
        return r, nxt
