"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The desk-scale study trains K = 10^4 episodes per covariate class on the four
classes used by the test cohort and benchmarks N = 200 seeded virtual
patients per policy.  Heavy artifacts (tables, benches) are session-cached
and shared between criteria.  Expect roughly half an hour in total.
"""

import math
import time

import numpy as np
import pytest

from helpers import BernoulliBanditEnv, LinearGaussianSSM

from neutrodose.cohort import (
    DECISION_STATES_PER_CLASS,
    N_CLASSES,
    N_DECISION_STATES,
    TOTAL_STATES_PER_CLASS,
)
from neutrodose.harness import TrialConfig, compare_state_estimators, run_trial
from neutrodose.inference import (
    MapProblem,
    Observation,
    ParticleEnsemble,
    map_estimate,
    pf_assimilate,
)
from neutrodose.planner import (
    PlannerConfig,
    QTable,
    VirtualPatientEnv,
    discounted_return,
    epsilon,
    mcts_train,
)
from neutrodose.pkpd import (
    DoseRegimen,
    PatientCovariates,
    PopulationModel,
    individualize,
    simulate,
    typical_vmel,
)
from neutrodose.policies import DEFAULT_DOSE_GRID, RewardSpec

SEED = 2026
CLASSES = (6, 21, 26, 9)  # two sexes, ages [50,60)/[60,70), ANC0 [2.5,5)/[5,10)
N_PATIENTS = 200
K_PER_CLASS = 10_000


def _announce(criterion: str, passed: bool, detail: str) -> None:
    print(f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}")


def _train_table(grade4_reward: float) -> QTable:
    spec = RewardSpec(grade_rewards=(-1.0, 1.0, 1.0, 1.0, grade4_reward))
    config = PlannerConfig(episodes=K_PER_CLASS, reward_spec=spec)
    table = None
    for cls in CLASSES:
        env = VirtualPatientEnv(cls, reward_spec=spec)
        table = mcts_train(env, config, seed=SEED + cls * 1_000_003,
                           table=table, n_states=env.n_states)
    return table


@pytest.fixture(scope="session")
def desk_table():
    return _train_table(-2.0)


_BENCH_CACHE: dict = {}

_POLICY_OPTIONS = {
    "standard": {},
    "map-target": {"free_eta": ("Slope",), "maxfev": 200, "n_random_starts": 0},
    "map-utility": {"free_eta": ("Slope",), "maxfev": 200, "n_random_starts": 0},
    "da": {"scan_stride": 3, "opt_members": 50},
    "da-rl": {"k_online": 100},
    "rl": {},
}


def _bench(policy: str, table: QTable | None = None, **overrides):
    key = (policy, tuple(sorted(overrides.items())), id(table) if table else None)
    if key not in _BENCH_CACHE:
        config = TrialConfig(
            policy=policy,
            n_patients=N_PATIENTS,
            seed=SEED,
            classes=CLASSES,
            qtable=table,
            policy_options=_POLICY_OPTIONS.get(policy, {}),
            **overrides,
        )
        t0 = time.time()
        _BENCH_CACHE[key] = run_trial(config)
        print(f"    [bench {policy}: {time.time() - t0:.0f} s]")
    return _BENCH_CACHE[key]


# -- criterion 1: state-space arithmetic -------------------------------------------


def test_state_space_arithmetic():
    ok = (
        TOTAL_STATES_PER_CLASS == 19531
        and DECISION_STATES_PER_CLASS == 3906
        and N_CLASSES * TOTAL_STATES_PER_CLASS == 624_992
        and N_DECISION_STATES == 124_992
        and DEFAULT_DOSE_GRID.n == 39
    )
    _announce(
        "state-space arithmetic",
        ok,
        f"per-class {TOTAL_STATES_PER_CLASS}/{DECISION_STATES_PER_CLASS} states, "
        f"totals {N_CLASSES * TOTAL_STATES_PER_CLASS}/{N_DECISION_STATES}, "
        f"{DEFAULT_DOSE_GRID.n} dose levels",
    )
    assert ok


# -- criterion 2: schedule and return constants -------------------------------------


def test_schedule_and_return_constants(desk_table):
    cfg = PlannerConfig()
    eps5 = epsilon(5, cfg)
    eps0 = epsilon(0, cfg)
    g_hi = discounted_return([1.0] * 6, 0.5)
    g_lo = discounted_return([-2.0] * 6, 0.5)
    ok_eps = (
        abs(eps5 - 9.0) < 1e-12
        and abs(eps0 - 3.0 * math.sqrt(9.0 * 1.96875)) < 1e-12
        and abs(g_hi - 1.96875) < 1e-12
        and abs(g_lo + 3.9375) < 1e-12
    )
    # the per-episode bounds assertion is armed inside mcts_train; the desk
    # table trained 4 x 10^4 real-environment episodes without tripping it
    episodes = desk_table.meta["episodes"]
    ok_bounds = episodes >= 4 * K_PER_CLASS
    _announce(
        "schedule/return constants",
        ok_eps and ok_bounds,
        f"eps(5)={eps5:.12g}, eps(0)={eps0:.12g}, bounds ±({g_hi}/{g_lo}) "
        f"held over {episodes} training episodes",
    )
    assert ok_eps and ok_bounds


# -- criterion 3: PK/PD correctness ---------------------------------------------


def test_pkpd_correctness():
    model = PopulationModel()
    cov = PatientCovariates(sex=0, age=56.0, bsa=1.8, bili=7.0, anc0=5.0)
    vm = typical_vmel(cov, model)
    params = individualize(cov, model)

    drug_free = simulate(params, DoseRegimen.cycle_doses([0.0] * 6))  # 126 days
    dev = float(np.abs(drug_free.states[:, 3:] / params.circ0 - 1.0).max())

    regimen = DoseRegimen.cycle_doses([360.0] * 6)
    base = simulate(params, regimen, rtol=1e-8, atol=1e-10)
    half = simulate(params, regimen, rtol=5e-9, atol=5e-11)
    tol_change = float(np.abs(half.circ / base.circ - 1.0).max())

    ok = abs(vm - 35.9) < 1e-9 and dev < 1e-6 and tol_change < 1e-5
    _announce(
        "PK/PD correctness",
        ok,
        f"VM_EL,TV {vm:.4f} umol/h, drug-free deviation {dev:.2e}, "
        f"tolerance-halving change {tol_change:.2e}",
    )
    assert ok


# -- criterion 4: inference oracles ----------------------------------------------


def test_inference_oracles():
    # particle filter vs exact Kalman posterior mean, M = 10^4
    ssm = LinearGaussianSSM()
    m = 10_000
    rng = np.random.default_rng(314)
    ens = ParticleEnsemble(
        particles=ssm.init_particles(m, rng), weights=np.full(m, 1.0 / m)
    )
    observations = [Observation(float(k), v) for k, v in
                    zip(range(1, 7), (1.1, 0.4, -0.8, 0.2, 1.7, 0.9))]
    exact = ssm.kalman_posterior(observations)
    max_z = 0.0
    for obs, (mean, var) in zip(observations, exact):
        pf_assimilate(ens, obs, ssm, rng)
        pf_mean = float(ens.weights @ ens.particles["x"])
        max_z = max(max_z, abs(pf_mean - mean) / math.sqrt(var / ens.ess))
    kalman_ok = max_z < 3.0

    # MAP slope recovery vs 1-D grid search at 1e-3 resolution
    model = PopulationModel()
    cov = PatientCovariates(sex=0, age=56.0, bsa=1.8, bili=7.0, anc0=5.0)
    doses = [(0.0, 360.0, 3.0)]
    gen = MapProblem(cov, model, [Observation(1.0, 1.0)], doses,
                     free_eta=("Slope",), free_eta_circ0=False, free_kappa=False)
    times = [72.0, 144.0, 216.0, 288.0, 360.0, 432.0]
    gen.observations = [Observation(t, 1.0) for t in times]
    eta_true = np.zeros(7)
    eta_true[6] = 0.3
    h = gen.predict(eta_true, 0.0, np.zeros((6, 2)))
    problem = MapProblem(
        cov, model, [Observation(t, float(v)) for t, v in zip(times, h)], doses,
        free_eta=("Slope",), free_eta_circ0=False, free_kappa=False,
    )
    est = map_estimate(problem, rng=np.random.default_rng(0))
    grid = np.arange(-0.2, 0.8001, 1e-3)
    oracle = grid[int(np.argmin([problem.neg_log_posterior(np.array([g]))
                                 for g in grid]))]
    map_ok = abs(est.eta[6] - oracle) < 0.05

    _announce(
        "inference oracles",
        kalman_ok and map_ok,
        f"particle filter max |z| = {max_z:.2f} (< 3 MC s.e.), "
        f"MAP slope {est.eta[6]:.4f} vs grid {oracle:.4f}",
    )
    assert kalman_ok and map_ok


# -- criterion 5: planner oracle --------------------------------------------------


def test_planner_oracle():
    spec = RewardSpec(grade_rewards=(0.0, 1.0, 1.0, 1.0, 1.0))  # rewards in [0, 1]
    wins = 0
    for seed in range(100):
        env = BernoulliBanditEnv((0.9, 0.1))
        cfg = PlannerConfig(episodes=10_000, n_cycles=1, reward_spec=spec)
        table = mcts_train(env, cfg, seed=seed)
        wins += int(np.argmax(table.q[0]) == 0)
    bandit_ok = wins >= 99

    env = BernoulliBanditEnv((0.7, 0.3))
    cfg = PlannerConfig(episodes=1000, n_cycles=1, reward_spec=spec)
    table = mcts_train(env, cfg, seed=5, debug=True)
    max_err = 0.0
    for (s, a), (tot, cnt) in table.meta["debug_sums"].items():
        max_err = max(max_err, abs(table.q[s, a] - tot / cnt))
    mean_ok = max_err < 1e-12

    _announce(
        "planner oracle",
        bandit_ok and mean_ok,
        f"bandit argmax correct in {wins}/100 seeded runs; "
        f"incremental-vs-batch mean max error {max_err:.2e}",
    )
    assert bandit_ok and mean_ok


# -- criterion 6: desk-scale study -------------------------------------------------


def test_desk_a_cumulative_neutropenia():
    res = _bench("standard")
    med = np.median(res.metrics.nadirs, axis=0)
    ok = med[5] < med[0]
    _announce(
        "desk study (a) cumulative neutropenia",
        ok,
        f"standard-dosing median model nadirs {np.round(med, 3).tolist()}",
    )
    assert ok


def test_desk_b_map_target_vs_utility():
    target = _bench("map-target")
    utility = _bench("map-utility")
    # Occurrence from the day-15 observed grade, the clinically reported
    # basis whose magnitudes the published per-cycle table reflects; the
    # model-nadir occurrences are printed for reference.
    g4t = (np.array([o.observed_grades for o in target.outcomes]) == 4).mean(axis=0)
    g4u = (np.array([o.observed_grades for o in utility.outcomes]) == 4).mean(axis=0)
    wins = int(np.sum(g4t > g4u))
    ok = wins >= 5
    true_t = target.metrics.grade_occurrence[:, 4]
    true_u = utility.metrics.grade_occurrence[:, 4]
    _announce(
        "desk study (b) MAP target vs utility grade-4 ordering",
        ok,
        f"observed-grade occurrence target {np.round(g4t, 3).tolist()} vs "
        f"utility {np.round(g4u, 3).tolist()} -> target higher in {wins}/6 "
        f"cycles (model-nadir basis: {np.round(true_t, 3).tolist()} vs "
        f"{np.round(true_u, 3).tolist()})",
    )
    assert ok


def _combined_grade04(res) -> float:
    occ = res.metrics.grade_occurrence
    return float(occ[2:, 0].mean() + occ[2:, 4].mean())


def test_desk_c_da_and_darl_reduction(desk_table):
    base = _combined_grade04(_bench("standard"))
    reductions = {}
    for policy in ("da", "da-rl"):
        table = desk_table if policy == "da-rl" else None
        val = _combined_grade04(_bench(policy, table=table))
        reductions[policy] = 1.0 - val / base
    ok = all(r >= 0.20 for r in reductions.values())
    _announce(
        "desk study (c) DA / DA-RL grade-0+4 reduction, cycles 3-6",
        ok,
        f"standard {base:.3f}; reductions "
        + ", ".join(f"{p} {r * 100:.0f}%" for p, r in reductions.items()),
    )
    assert ok


def test_desk_d_estimator_rmse():
    t0 = time.time()
    rmse = compare_state_estimators(
        n_patients=N_PATIENTS, seed=SEED, classes=CLASSES
    )
    pen = rmse["expected-nadir"]["overall"]
    d15 = rmse["day15"]["overall"]
    ok = pen <= d15
    _announce(
        "desk study (d) posterior-nadir vs day-15 grade RMSE",
        ok,
        f"expected-nadir {pen:.3f} <= day-15 observation {d15:.3f} "
        f"(day-12 {rmse['day12']['overall']:.3f}, "
        f"map-grade {rmse['map-grade']['overall']:.3f}; {time.time() - t0:.0f} s)",
    )
    assert ok


# -- criterion 7: reward-variant sweep ----------------------------------------------


def test_reward_variant_sweep(desk_table):
    tables = {-2.0: desk_table}
    for r4 in (-1.0, -3.0):
        tables[r4] = _train_table(r4)
    occurrence = {}
    for r4, table in sorted(tables.items(), reverse=True):
        res = _bench("rl", table=table)
        occurrence[r4] = float((res.metrics.grades == 4).mean())
    ordered = [occurrence[r4] for r4 in (-1.0, -2.0, -3.0)]
    ok = ordered[0] >= ordered[1] >= ordered[2]
    _announce(
        "reward-variant sweep",
        ok,
        f"grade-4 occurrence at R4 = -1/-2/-3: "
        + ", ".join(f"{v:.3f}" for v in ordered),
    )
    assert ok


# -- criterion 8: reproducibility ---------------------------------------------------


def test_reproducibility(desk_table):
    import numba

    base = dict(policy="rl", n_patients=8, seed=123, classes=CLASSES,
                qtable=desk_table)
    r1 = run_trial(TrialConfig(workers=1, **base))
    r2 = run_trial(TrialConfig(workers=2, **base))
    workers_ok = (
        np.array_equal(r1.metrics.nadirs, r2.metrics.nadirs)
        and np.array_equal(r1.metrics.grades, r2.metrics.grades)
        and all(o1.doses_mg == o2.doses_mg
                for o1, o2 in zip(r1.outcomes, r2.outcomes))
    )

    saved = numba.get_num_threads()
    try:
        numba.set_num_threads(1)
        r3 = run_trial(TrialConfig(workers=1, **base))
    finally:
        numba.set_num_threads(saved)
    threads_ok = np.array_equal(r1.metrics.nadirs, r3.metrics.nadirs)

    env = VirtualPatientEnv(CLASSES[0])
    cfg = PlannerConfig(episodes=300)
    t1 = mcts_train(env, cfg, seed=77)
    t2 = mcts_train(VirtualPatientEnv(CLASSES[0]), cfg, seed=77)
    train_ok = np.array_equal(t1.q, t2.q) and np.array_equal(t1.n, t2.n)

    ok = workers_ok and threads_ok and train_ok
    _announce(
        "reproducibility",
        ok,
        f"bench bit-identical across worker counts ({workers_ok}) and numba "
        f"thread counts ({threads_ok}); training bit-identical ({train_ok})",
    )
    assert ok
