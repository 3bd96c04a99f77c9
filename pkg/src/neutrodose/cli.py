"""Command-line interface: training, benchmarking, exports, and the service."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from .cohort import (
    CovariateClass,
    N_CLASSES,
    PatientState,
    export_cohort,
    sample_patient,
)
from .harness import TrialConfig, compare_state_estimators, run_trial
from .pkpd import DoseRegimen, PatientCovariates, PopulationModel, individualize, simulate
from .planner import (
    PlannerConfig,
    QTable,
    VirtualPatientEnv,
    config_digest,
    mcts_train,
    q_planning,
)
from .policies import DEFAULT_DOSE_GRID, RewardSpec


@click.group()
def main() -> None:
    """Precision-dosing engine for neutropenia-inducing chemotherapy."""


@main.command()
@click.option("--classes", "classes_opt", default="all",
              help="comma-separated class indices (0-31) or 'all'")
@click.option("--episodes", "-k", default=10_000, show_default=True)
@click.option("--seed", "-s", default=0, show_default=True)
@click.option("--gamma", default=0.5, show_default=True)
@click.option("--c-uct", default=3.0, show_default=True)
@click.option("--grade4-reward", default=-2.0, show_default=True)
@click.option("--grade-source", default="observation",
              type=click.Choice(["observation", "model-nadir"]), show_default=True)
@click.option("--obs-day", default=15, show_default=True)
@click.option("--algorithm", default="mcts", type=click.Choice(["mcts", "q-planning"]),
              show_default=True)
@click.option("--out", "-o", type=click.Path(), required=True)
@click.option("--append/--no-append", default=False,
              help="extend an existing table file instead of starting fresh")
def train(classes_opt, episodes, seed, gamma, c_uct, grade4_reward, grade_source,
          obs_day, algorithm, out, append):
    """Train the population action-value table with MCTS (or Q-planning)."""
    rewards = (-1.0, 1.0, 1.0, 1.0, grade4_reward)
    spec = RewardSpec(grade_rewards=rewards)
    config = PlannerConfig(
        episodes=episodes, gamma=gamma, c_uct=c_uct, reward_spec=spec,
    )
    if classes_opt == "all":
        classes = list(range(N_CLASSES))
    else:
        classes = [int(c) for c in classes_opt.split(",")]

    table = QTable.load(out) if append and Path(out).exists() else None
    for cls in classes:
        env = VirtualPatientEnv(
            cls, reward_spec=spec, grade_source=grade_source, obs_day=obs_day,
        )
        click.echo(f"training class {cls} ({env.cls.describe()}), K={episodes} ...")
        if algorithm == "mcts":
            table = mcts_train(env, config, seed=seed + cls * 1_000_003,
                               table=table, n_states=env.n_states)
        else:
            table = q_planning(env, config, seed=seed + cls * 1_000_003, table=table)
    table.meta["classes"] = sorted(
        set(table.meta.get("classes", [])) | set(classes)
    )
    table.meta["grade4_reward"] = grade4_reward
    table.save(out)
    click.echo(f"saved QTable to {out} (config {config_digest(config)})")


@main.command()
@click.option("--policy", "-p", required=True,
              type=click.Choice(["standard", "pk", "map-target", "map-utility",
                                 "da", "rl", "da-rl"]))
@click.option("--n", "-n", default=200, show_default=True)
@click.option("--seed", "-s", default=0, show_default=True)
@click.option("--days", default="0,15", show_default=True,
              help="observation days within each cycle")
@click.option("--classes", "classes_opt", default=None,
              help="restrict the cohort to these class indices")
@click.option("--qtable", type=click.Path(exists=True), default=None)
@click.option("--grade-source", default="observation",
              type=click.Choice(["observation", "model-nadir", "posterior-nadir"]))
@click.option("--out", "-o", type=click.Path(), required=True)
@click.option("--preset", type=click.Choice(["full", "desk"]), default="desk",
              show_default=True,
              help="desk-scale presets shrink the per-decision search budgets")
@click.option("--workers", default=1, show_default=True)
def bench(policy, n, seed, days, classes_opt, qtable, grade_source, out, preset,
          workers):
    """Benchmark one dosing policy on a virtual cohort."""
    desk = preset == "desk"
    options = {}
    if policy in ("map-target", "map-utility"):
        options = {"free_eta": ("Slope",), "maxfev": 200 if desk else 2000,
                   "n_random_starts": 0 if desk else 2}
        if not desk:
            options["free_eta"] = ("V3", "VM_EL", "KM_TR", "VM_TR", "k21", "Q", "Slope")
            options["free_kappa"] = True
    if policy == "da":
        options = {"scan_stride": 3 if desk else 1,
                   "opt_members": 50 if desk else None}
    if policy == "da-rl":
        options = {"k_online": 100 if desk else 2000}
    config = TrialConfig(
        policy=policy,
        n_patients=n,
        seed=seed,
        obs_days=tuple(int(d) for d in days.split(",")),
        classes=tuple(int(c) for c in classes_opt.split(",")) if classes_opt else None,
        qtable=QTable.load(qtable) if qtable else None,
        grade_source=grade_source,
        policy_options=options,
        workers=workers,
    )
    result = run_trial(config)
    result.write_outputs(out)
    click.echo(json.dumps(result.metrics.aggregates, indent=2))
    click.echo(f"outputs written to {out}")


@main.command("compare-estimators")
@click.option("--n", default=200, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--classes", "classes_opt", default=None)
@click.option("--out", type=click.Path(), default=None)
def compare_estimators(n, seed, classes_opt, out):
    """RMSE of grade estimators (day-12/day-15 observation, posterior modes)."""
    classes = tuple(int(c) for c in classes_opt.split(",")) if classes_opt else None
    rmse = compare_state_estimators(n_patients=n, seed=seed, classes=classes)
    text = json.dumps(rmse, indent=2)
    if out:
        Path(out).write_text(text)
    click.echo(text)


@main.command("q-curve")
@click.option("--qtable", type=click.Path(exists=True), required=True)
@click.option("--cls", "cls_index", type=int, required=True)
@click.option("--grades", default="", help="comma-separated grade history")
@click.option("--out", type=click.Path(), required=True)
def q_curve(qtable, cls_index, grades, out):
    """Export a state's action-value row as CSV (dose, q, visits)."""
    from .cohort import encode_state

    table = QTable.load(qtable)
    hist = tuple(int(g) for g in grades.split(",") if g != "")
    state = PatientState(CovariateClass.from_index(cls_index), hist)
    idx = encode_state(state)
    with open(out, "w") as fh:
        fh.write("dose_mgm2,q,visits\n")
        for d, (qv, nv) in enumerate(zip(table.q[idx], table.n[idx])):
            fh.write(f"{DEFAULT_DOSE_GRID.levels[d]:.0f},{float(qv)!r},{int(nv)}\n")
    click.echo(f"wrote {out}")


@main.command("simulate-patient")
@click.option("--sex", type=int, default=0, show_default=True)
@click.option("--age", type=float, default=56.0, show_default=True)
@click.option("--bsa", type=float, default=1.8, show_default=True)
@click.option("--bili", type=float, default=7.0, show_default=True)
@click.option("--anc0", type=float, default=5.0, show_default=True)
@click.option("--dose-mgm2", type=float, default=200.0, show_default=True)
@click.option("--cycles", type=int, default=6, show_default=True)
@click.option("--out", type=click.Path(), required=True)
def simulate_patient(sex, age, bsa, bili, anc0, dose_mgm2, cycles, out):
    """Simulate the typical patient at a fixed dose; export trajectory CSV."""
    cov = PatientCovariates(sex=sex, age=age, bsa=bsa, bili=bili, anc0=anc0)
    params = individualize(cov, PopulationModel(), n_cycles=cycles)
    regimen = DoseRegimen.cycle_doses([dose_mgm2 * bsa] * cycles)
    traj = simulate(params, regimen)
    traj.to_csv(out)
    click.echo(f"wrote {out}")


@main.command()
@click.option("--n", default=100, show_default=True)
@click.option("--seed", default=0, show_default=True)
@click.option("--cls", "cls_index", type=int, default=None)
@click.option("--out", type=click.Path(), required=True)
def cohort(n, seed, cls_index, out):
    """Sample a virtual cohort and export it as JSON lines (replayable)."""
    model = PopulationModel()
    patients = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i, 0)))
        patients.append(sample_patient(rng, model, cls_index))
    export_cohort(out, patients)
    click.echo(f"wrote {n} patients to {out}")


@main.command()
@click.option("--host", default="127.0.0.1", show_default=True)
@click.option("--port", default=8437, show_default=True, envvar="NEUTRODOSE_PORT")
@click.option("--data-dir", default="./neutrodose-data", show_default=True,
              envvar="NEUTRODOSE_DATA_DIR")
@click.option("--qtable", default=None, envvar="NEUTRODOSE_QTABLE")
def serve(host, port, data_dir, qtable):
    """Run the interactive dosing-session service."""
    import uvicorn

    from .service import create_app

    app = create_app(data_dir=data_dir, qtable_path=qtable)
    uvicorn.run(app, host=host, port=port)


if __name__ == "__main__":
    main()
